#include "segcomp/compensation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "segcomp/error.hpp"

namespace segcomp {

const char* comp_mode_name(CompMode mode) {
    switch (mode) {
        case CompMode::free: return "free";
        case CompMode::symmetric: return "symmetric";
        case CompMode::unconstrained: return "unconstrained";
    }
    return "?";
}

CompMode comp_mode_from_name(std::string_view name) {
    if (name == "free") return CompMode::free;
    if (name == "symmetric") return CompMode::symmetric;
    if (name == "unconstrained") return CompMode::unconstrained;
    throw ConfigError("unknown compensation mode: " + std::string(name));
}

CompensationMatrix CompensationMatrix::zeros(int num_classes, CompMode mode) {
    if (num_classes < 2) throw ConfigError("compensation needs at least 2 classes");
    CompensationMatrix c;
    c.num_classes = num_classes;
    c.mode = mode;
    const size_t k = static_cast<size_t>(num_classes);
    c.p.init(mode == CompMode::symmetric ? k * (k - 1) / 2 : k * k);
    return c;
}

size_t CompensationMatrix::tri_index(int i, int j) const {
    // packed upper triangle, row-major, i < j
    const size_t k = static_cast<size_t>(num_classes);
    return static_cast<size_t>(i) * k - static_cast<size_t>(i) * (i + 1) / 2 +
           static_cast<size_t>(j - i - 1);
}

std::vector<double> CompensationMatrix::materialize() const {
    const int k = num_classes;
    std::vector<double> m(static_cast<size_t>(k) * k, 0.0);
    switch (mode) {
        case CompMode::unconstrained:
            m = p.v;
            break;
        case CompMode::free:
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j)
                    if (i != j) m[static_cast<size_t>(i) * k + j] = p.v[static_cast<size_t>(i) * k + j];
            break;
        case CompMode::symmetric:
            for (int i = 0; i < k; ++i)
                for (int j = i + 1; j < k; ++j) {
                    const double x = p.v[tri_index(i, j)];
                    m[static_cast<size_t>(i) * k + j] = x;
                    m[static_cast<size_t>(j) * k + i] = x;
                }
            break;
    }
    return m;
}

void CompensationMatrix::accumulate_grad(std::span<const double> d_mat) {
    const int k = num_classes;
    switch (mode) {
        case CompMode::unconstrained:
            for (size_t i = 0; i < p.g.size(); ++i) p.g[i] += d_mat[i];
            break;
        case CompMode::free:
            for (int i = 0; i < k; ++i)
                for (int j = 0; j < k; ++j)
                    if (i != j)
                        p.g[static_cast<size_t>(i) * k + j] += d_mat[static_cast<size_t>(i) * k + j];
            break;
        case CompMode::symmetric:
            for (int i = 0; i < k; ++i)
                for (int j = i + 1; j < k; ++j)
                    p.g[tri_index(i, j)] +=
                        d_mat[static_cast<size_t>(i) * k + j] + d_mat[static_cast<size_t>(j) * k + i];
            break;
    }
}

std::vector<ParamRef> CompensationMatrix::params() { return {{"comp.B", &p}}; }

void CompensationMatrix::zero_grad() { std::fill(p.g.begin(), p.g.end(), 0.0); }

bool CompensationMatrix::is_zero() const {
    return std::all_of(p.v.begin(), p.v.end(), [](double x) { return x == 0.0; });
}

void write_compensation_csv(const std::filesystem::path& file, const CompensationMatrix& comp,
                            const std::vector<std::string>& class_names) {
    const int k = comp.num_classes;
    const auto names =
        class_names.empty() ? default_class_names(k) : class_names;
    if (static_cast<int>(names.size()) != k)
        throw ConfigError("class name count does not match matrix size");
    const auto m = comp.materialize();
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "B_ij";
    for (const auto& n : names) out << "," << n;
    out << "\n";
    char buf[64];
    for (int i = 0; i < k; ++i) {
        out << names[i];
        for (int j = 0; j < k; ++j) {
            std::snprintf(buf, sizeof(buf), "%.6g", m[static_cast<size_t>(i) * k + j]);
            out << "," << buf;
        }
        out << "\n";
    }
}

void plain_probabilities(std::span<const double> logits, std::span<double> out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logits) {
        if (!std::isfinite(l)) throw NumericError("non-finite logit in softmax");
        mx = std::max(mx, l);
    }
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (size_t i = 0; i < logits.size(); ++i) out[i] /= sum;
}

std::vector<double> plain_probabilities(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    plain_probabilities(logits, out);
    return out;
}

void compensated_probabilities(std::span<const double> logits, std::span<const double> B,
                               int num_classes, double beta, int gt, std::span<double> out) {
    if (gt < 0 || gt >= num_classes) throw DataError("ground-truth class out of range");
    // z_i = l_i + beta * B[i][gt]; with a zero column this is bit-identical
    // to the plain path (z_i == l_i), so B = 0 or beta = 0 reduce exactly.
    for (int i = 0; i < num_classes; ++i)
        out[i] = logits[i] + beta * B[static_cast<size_t>(i) * num_classes + gt];
    plain_probabilities(out, out);
}

std::vector<double> compensated_probabilities(std::span<const double> logits,
                                              std::span<const double> B, int num_classes,
                                              double beta, int gt) {
    std::vector<double> out(num_classes);
    compensated_probabilities(logits, B, num_classes, beta, gt, out);
    return out;
}

namespace {

double sign_or_zero(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

LossBreakdown loss_impl(const LogitGrid& logits, const BetaGrid& betas, const LabelGrid& labels,
                        std::span<const double> B, int num_classes, double alpha, double scale,
                        Grid3* d_logits, Grid2* d_beta, std::span<double> d_B) {
    if (logits.h != labels.h || logits.w != labels.w || betas.h != labels.h ||
        betas.w != labels.w)
        throw DataError("logit/beta/label shapes disagree");
    if (logits.c != num_classes) throw DataError("logit channel count != num_classes");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");

    const int k = num_classes;
    const size_t n = logits.pixels();
    const double inv_n = 1.0 / static_cast<double>(n);
    const bool grad = d_logits != nullptr;

    LossBreakdown out;
    out.alpha = alpha;
    std::vector<double> probs(k);
    for (size_t p = 0; p < n; ++p) {
        const int gt = labels.v[p];
        if (gt < 0 || gt >= k) throw DataError("label out of range");
        const double beta = betas.v[p];
        const double* l = logits.v.data() + p * k;

        compensated_probabilities(std::span<const double>(l, k), B, k, beta, gt, probs);
        const double p_gt = probs[gt];
        if (!(p_gt > 0.0))
            throw NumericError("compensated probability underflowed to zero");
        out.cross_entropy += -std::log(p_gt);

        double col_abs = 0.0;
        for (int i = 0; i < k; ++i) col_abs += std::abs(B[static_cast<size_t>(i) * k + gt]);
        out.lasso += (alpha / k) * beta * col_abs;

        if (grad) {
            // dCE/dz_i = p_i - 1[i = gt]; z_i = l_i + beta * B[i][gt]
            const double s = scale * inv_n;
            double* dl = d_logits->v.data() + p * k;
            double dbeta_acc = 0.0;
            for (int i = 0; i < k; ++i) {
                const double dz = (probs[i] - (i == gt ? 1.0 : 0.0)) * s;
                dl[i] += dz;
                const size_t bij = static_cast<size_t>(i) * k + gt;
                d_B[bij] += dz * beta;
                dbeta_acc += dz * B[bij];
                // lasso: (alpha/K) * beta * |B_ij| per pixel
                d_B[bij] += s * (alpha / k) * beta * sign_or_zero(B[bij]);
            }
            dbeta_acc += s * (alpha / k) * col_abs;
            d_beta->v[p] += dbeta_acc;
        }
    }
    out.cross_entropy *= inv_n;
    out.lasso *= inv_n;
    out.total = out.cross_entropy + out.lasso;
    return out;
}

}  // namespace

LossBreakdown training_loss(const LogitGrid& logits, const BetaGrid& betas,
                            const LabelGrid& labels, std::span<const double> B,
                            int num_classes, double alpha) {
    return loss_impl(logits, betas, labels, B, num_classes, alpha, 1.0, nullptr, nullptr, {});
}

LossBreakdown training_loss(const LogitGrid& logits, const BetaGrid& betas,
                            const LabelGrid& labels, const CompensationMatrix& comp,
                            double alpha) {
    const auto m = comp.materialize();
    return training_loss(logits, betas, labels, m, comp.num_classes, alpha);
}

LossBreakdown training_loss_backward(const LogitGrid& logits, const BetaGrid& betas,
                                     const LabelGrid& labels, std::span<const double> B,
                                     int num_classes, double alpha, double scale,
                                     Grid3& d_logits, Grid2& d_beta, std::span<double> d_B) {
    return loss_impl(logits, betas, labels, B, num_classes, alpha, scale, &d_logits, &d_beta,
                     d_B);
}

}  // namespace segcomp
