#include "segcomp/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "segcomp/compensation.hpp"
#include "segcomp/error.hpp"

namespace segcomp {

namespace {
constexpr uint64_t kCModelStream = 0x636d6f64;
constexpr uint64_t kMcStream = 0x6d636472;
}  // namespace

TransitionHead TransitionHead::make_s_model(int num_classes, double diag_init) {
    if (num_classes < 2) throw ConfigError("transition head needs at least 2 classes");
    TransitionHead h;
    h.kind = Kind::s_model;
    h.num_classes = num_classes;
    h.s_raw.init(static_cast<size_t>(num_classes) * num_classes);
    for (int i = 0; i < num_classes; ++i)
        h.s_raw.v[static_cast<size_t>(i) * num_classes + i] = diag_init;
    return h;
}

TransitionHead TransitionHead::make_c_model(int num_classes, int feature_dim, uint64_t seed,
                                            double diag_init) {
    if (num_classes < 2) throw ConfigError("transition head needs at least 2 classes");
    if (feature_dim < 1) throw ConfigError("c-model feature_dim must be >= 1");
    TransitionHead h;
    h.kind = Kind::c_model;
    h.num_classes = num_classes;
    h.feature_dim = feature_dim;
    const int k2 = num_classes * num_classes;
    Rng rng(derive_seed(seed, kCModelStream));
    auto he = [&](Param& p, size_t n, int fan_in) {
        p.init(n);
        const double bound = std::sqrt(6.0 / fan_in);
        for (double& x : p.v) x = (2.0 * rng.next_double() - 1.0) * bound;
    };
    he(h.c_w1, static_cast<size_t>(kReduced) * feature_dim, feature_dim);
    h.c_b1.init(kReduced);
    he(h.c_w2, static_cast<size_t>(k2) * kReduced, kReduced);
    h.c_b2.init(k2);
    // bias the raw matrix towards a diagonal so the initial per-pixel T is
    // near the identity
    for (int i = 0; i < num_classes; ++i)
        h.c_b2.v[static_cast<size_t>(i) * num_classes + i] = diag_init;
    return h;
}

std::vector<ParamRef> TransitionHead::params() {
    if (kind == Kind::s_model) return {{"trans.s_raw", &s_raw}};
    return {{"trans.c_w1", &c_w1},
            {"trans.c_b1", &c_b1},
            {"trans.c_w2", &c_w2},
            {"trans.c_b2", &c_b2}};
}

void TransitionHead::zero_grad() {
    for (auto& [name, p] : params()) std::fill(p->g.begin(), p->g.end(), 0.0);
}

std::vector<double> column_softmax(std::span<const double> raw, int num_classes) {
    const int k = num_classes;
    std::vector<double> t(static_cast<size_t>(k) * k);
    std::vector<double> col(k);
    for (int j = 0; j < k; ++j) {
        for (int i = 0; i < k; ++i) col[i] = raw[static_cast<size_t>(i) * k + j];
        plain_probabilities(col, col);
        for (int i = 0; i < k; ++i) t[static_cast<size_t>(i) * k + j] = col[i];
    }
    return t;
}

void column_softmax_backward(std::span<const double> T, std::span<const double> dT,
                             int num_classes, std::span<double> d_raw) {
    const int k = num_classes;
    for (int j = 0; j < k; ++j) {
        double dot = 0.0;
        for (int i = 0; i < k; ++i)
            dot += T[static_cast<size_t>(i) * k + j] * dT[static_cast<size_t>(i) * k + j];
        for (int i = 0; i < k; ++i) {
            const size_t ij = static_cast<size_t>(i) * k + j;
            d_raw[ij] += T[ij] * (dT[ij] - dot);
        }
    }
}

std::vector<double> s_model_matrix(const TransitionHead& head) {
    if (head.kind != TransitionHead::Kind::s_model)
        throw ConfigError("head is not an s-model");
    return column_softmax(head.s_raw.v, head.num_classes);
}

std::vector<double> s_model_forward(const TransitionHead& head, std::span<const double> p) {
    const auto t = s_model_matrix(head);
    const int k = head.num_classes;
    std::vector<double> pbar(k, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) pbar[i] += t[static_cast<size_t>(i) * k + j] * p[j];
    return pbar;
}

std::vector<double> c_model_matrix(const TransitionHead& head,
                                   std::span<const double> hidden_x,
                                   std::vector<double>* reduced_out) {
    if (head.kind != TransitionHead::Kind::c_model)
        throw ConfigError("head is not a c-model");
    const int f = head.feature_dim, k = head.num_classes, k2 = k * k;
    if (static_cast<int>(hidden_x.size()) != f)
        throw DataError("hidden feature width does not match c-model branch");
    std::vector<double> reduced(TransitionHead::kReduced);
    for (int o = 0; o < TransitionHead::kReduced; ++o) {
        double acc = head.c_b1.v[o];
        const double* w = head.c_w1.v.data() + static_cast<size_t>(o) * f;
        for (int i = 0; i < f; ++i) acc += w[i] * hidden_x[i];
        reduced[o] = acc;
    }
    std::vector<double> raw(k2);
    for (int o = 0; o < k2; ++o) {
        double acc = head.c_b2.v[o];
        const double* w = head.c_w2.v.data() + static_cast<size_t>(o) * TransitionHead::kReduced;
        for (int i = 0; i < TransitionHead::kReduced; ++i) acc += w[i] * reduced[i];
        raw[o] = acc;
    }
    if (reduced_out) *reduced_out = std::move(reduced);
    return column_softmax(raw, k);
}

std::vector<double> c_model_forward(const TransitionHead& head,
                                    std::span<const double> hidden_x,
                                    std::span<const double> p_x) {
    const auto t = c_model_matrix(head, hidden_x);
    const int k = head.num_classes;
    std::vector<double> pbar(k, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) pbar[i] += t[static_cast<size_t>(i) * k + j] * p_x[j];
    return pbar;
}

void transition_backward(std::span<const double> T, std::span<const double> p,
                         std::span<const double> dpbar, int num_classes,
                         std::span<double> dT_accum, std::span<double> dp_out) {
    const int k = num_classes;
    for (int j = 0; j < k; ++j) dp_out[j] = 0.0;
    for (int i = 0; i < k; ++i) {
        const double d = dpbar[i];
        if (d == 0.0) continue;
        for (int j = 0; j < k; ++j) {
            dT_accum[static_cast<size_t>(i) * k + j] += d * p[j];
            dp_out[j] += d * T[static_cast<size_t>(i) * k + j];
        }
    }
}

void c_branch_backward(TransitionHead& head, std::span<const double> hidden_x,
                       std::span<const double> reduced, std::span<const double> d_raw,
                       std::span<double> d_hidden_accum) {
    const int f = head.feature_dim, k2 = head.num_classes * head.num_classes;
    std::vector<double> d_reduced(TransitionHead::kReduced, 0.0);
    for (int o = 0; o < k2; ++o) {
        const double d = d_raw[o];
        if (d == 0.0) continue;
        head.c_b2.g[o] += d;
        double* dw = head.c_w2.g.data() + static_cast<size_t>(o) * TransitionHead::kReduced;
        const double* w = head.c_w2.v.data() + static_cast<size_t>(o) * TransitionHead::kReduced;
        for (int i = 0; i < TransitionHead::kReduced; ++i) {
            dw[i] += d * reduced[i];
            d_reduced[i] += d * w[i];
        }
    }
    for (int o = 0; o < TransitionHead::kReduced; ++o) {
        const double d = d_reduced[o];
        if (d == 0.0) continue;
        head.c_b1.g[o] += d;
        double* dw = head.c_w1.g.data() + static_cast<size_t>(o) * f;
        const double* w = head.c_w1.v.data() + static_cast<size_t>(o) * f;
        for (int i = 0; i < f; ++i) {
            dw[i] += d * hidden_x[i];
            d_hidden_accum[i] += d * w[i];
        }
    }
}

McDropoutResult mc_dropout_predict(SegModel& model, const FeatureGrid& features,
                                   const DropoutEnsemble& ens) {
    if (ens.num_samples < 1) throw ConfigError("num_samples must be >= 1");
    if (ens.rate < 0.0 || ens.rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    const int k = model.dims.num_classes;
    const size_t n = static_cast<size_t>(features.h) * features.w;

    const double saved_rate = model.dropout_rate;
    model.dropout_rate = ens.rate;

    // per-sample probability grids; desk-scale memory
    std::vector<ProbGrid> samples;
    samples.reserve(ens.num_samples);
    for (int s = 0; s < ens.num_samples; ++s) {
        Rng rng(derive_seed(ens.seed, kMcStream, static_cast<uint64_t>(s)));
        FwdOpts opts;  // eval-mode batchnorm, active dropout
        opts.batch_stats = false;
        opts.update_running = false;
        opts.dropout = ens.rate > 0.0;
        opts.rng = &rng;
        ForwardResult r = forward_ex(model, features, opts);
        ProbGrid pg(features.h, features.w, k);
        for (size_t p = 0; p < n; ++p)
            plain_probabilities(std::span<const double>(r.logits.v.data() + p * k, k),
                                std::span<double>(pg.v.data() + p * k, k));
        samples.push_back(std::move(pg));
    }
    model.dropout_rate = saved_rate;

    McDropoutResult out;
    out.mean = ProbGrid(features.h, features.w, k);
    out.variance = Grid2(features.h, features.w);
    const double inv_s = 1.0 / ens.num_samples;
    for (size_t p = 0; p < n; ++p) {
        double var_sum = 0.0;
        for (int c = 0; c < k; ++c) {
            const size_t idx = p * k + c;
            double mean = 0.0;
            bool all_same = true;
            for (int s = 0; s < ens.num_samples; ++s) {
                mean += samples[s].v[idx];
                all_same = all_same && samples[s].v[idx] == samples[0].v[idx];
            }
            mean *= inv_s;
            out.mean.v[idx] = mean;
            if (!all_same) {
                double acc = 0.0;
                for (int s = 0; s < ens.num_samples; ++s) {
                    const double d = samples[s].v[idx] - mean;
                    acc += d * d;
                }
                var_sum += acc * inv_s;
            }
        }
        out.variance.v[p] = var_sum / k;
    }
    return out;
}

}  // namespace segcomp
