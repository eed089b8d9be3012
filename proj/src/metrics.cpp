#include "segcomp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "segcomp/error.hpp"

namespace segcomp {

int64_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), int64_t{0});
}

int64_t ConfusionMatrix::gt_count(int c) const {
    int64_t s = 0;
    for (int j = 0; j < num_classes; ++j) s += at(c, j);
    return s;
}

int64_t ConfusionMatrix::pred_count(int c) const {
    int64_t s = 0;
    for (int i = 0; i < num_classes; ++i) s += at(i, c);
    return s;
}

void ConfusionMatrix::add(const LabelGrid& gt, const LabelGrid& pred) {
    if (gt.h != pred.h || gt.w != pred.w) throw DataError("prediction/gt shapes disagree");
    for (size_t i = 0; i < gt.size(); ++i) {
        const int g = gt.v[i], p = pred.v[i];
        if (g < 0 || g >= num_classes || p < 0 || p >= num_classes)
            throw DataError("label out of range in confusion computation");
        ++at(g, p);
    }
}

ConfusionMatrix confusion(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                          int num_classes) {
    if (pred.size() != gt.size()) throw DataError("prediction/gt image counts disagree");
    ConfusionMatrix conf(num_classes);
    for (size_t i = 0; i < pred.size(); ++i) conf.add(gt[i], pred[i]);
    return conf;
}

ConfusionMatrix confusion(const LabelGrid& pred, const LabelGrid& gt, int num_classes) {
    ConfusionMatrix conf(num_classes);
    conf.add(gt, pred);
    return conf;
}

double miou(const ConfusionMatrix& conf) {
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < conf.num_classes; ++c) {
        const int64_t inter = conf.at(c, c);
        const int64_t uni = conf.gt_count(c) + conf.pred_count(c) - inter;
        if (uni == 0) continue;  // class absent from both; excluded from the mean
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++used;
    }
    if (used == 0) throw DataError("mIoU undefined: every class union is empty");
    return sum / used;
}

Accuracies accuracies(const ConfusionMatrix& conf) {
    const int64_t total = conf.total();
    if (total == 0) throw DataError("accuracy undefined on zero pixels");
    Accuracies out;
    out.per_class.resize(conf.num_classes);
    int64_t trace = 0;
    for (int c = 0; c < conf.num_classes; ++c) {
        trace += conf.at(c, c);
        const int64_t gt = conf.gt_count(c);
        if (gt > 0)
            out.per_class[c] = static_cast<double>(conf.at(c, c)) / static_cast<double>(gt);
    }
    out.aggregate = static_cast<double>(trace) / static_cast<double>(total);
    return out;
}

std::vector<double> default_r_grid(double step, double max_r) {
    std::vector<double> grid;
    const int n = static_cast<int>(std::llround(max_r / step));
    grid.reserve(n + 1);
    for (int i = 0; i <= n; ++i) grid.push_back(i * step);
    return grid;
}

namespace {

struct RankedErrors {
    size_t n = 0;
    size_t base_correct = 0;
    std::vector<size_t> error_prefix;  // errors among the first m ranked pixels
};

// Shared machinery: rank pixels, then prefix-count how many of the first m
// ranked pixels were wrong (each replacement fixes exactly those).
RankedErrors rank_pixels(const std::vector<double>* uncertainty_flat,
                         const std::vector<uint8_t>& error_flat) {
    const size_t n = error_flat.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    if (uncertainty_flat) {
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return (*uncertainty_flat)[a] > (*uncertainty_flat)[b];
        });
    } else {
        // oracle: errors first, raster ties
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return error_flat[a] > error_flat[b];
        });
    }
    RankedErrors out;
    out.n = n;
    out.error_prefix.resize(n + 1, 0);
    size_t errors = 0;
    for (size_t i = 0; i < n; ++i) {
        errors += error_flat[order[i]];
        out.error_prefix[i + 1] = errors;
    }
    out.base_correct = n - errors;
    return out;
}

std::vector<uint8_t> flatten_errors(std::span<const LabelGrid> pred,
                                    std::span<const LabelGrid> gt) {
    if (pred.size() != gt.size()) throw DataError("prediction/gt image counts disagree");
    std::vector<uint8_t> err;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i].h != gt[i].h || pred[i].w != gt[i].w)
            throw DataError("prediction/gt shapes disagree");
        for (size_t j = 0; j < pred[i].size(); ++j)
            err.push_back(pred[i].v[j] != gt[i].v[j] ? 1 : 0);
    }
    if (err.empty()) throw DataError("correction curve needs at least one pixel");
    return err;
}

CorrectionCurve curve_from_ranking(const RankedErrors& ranked, std::span<const double> r_grid) {
    CorrectionCurve curve;
    for (double r : r_grid) {
        if (r < 0.0 || r > 1.0) throw ConfigError("r grid values must lie in [0, 1]");
        const size_t m = std::min(
            ranked.n, static_cast<size_t>(std::floor(r * static_cast<double>(ranked.n) + 1e-9)));
        const size_t correct = ranked.base_correct + ranked.error_prefix[m];
        curve.r.push_back(r);
        curve.acc.push_back(static_cast<double>(correct) / static_cast<double>(ranked.n));
    }
    return curve;
}

}  // namespace

CorrectionCurve correction_curve(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                                 std::span<const Grid2> uncertainty,
                                 std::span<const double> r_grid) {
    const auto err = flatten_errors(pred, gt);
    if (uncertainty.size() != pred.size())
        throw DataError("uncertainty map count does not match predictions");
    std::vector<double> unc_flat;
    unc_flat.reserve(err.size());
    for (size_t i = 0; i < uncertainty.size(); ++i) {
        if (uncertainty[i].h != pred[i].h || uncertainty[i].w != pred[i].w)
            throw DataError("uncertainty map shape mismatch");
        unc_flat.insert(unc_flat.end(), uncertainty[i].v.begin(), uncertainty[i].v.end());
    }
    return curve_from_ranking(rank_pixels(&unc_flat, err), r_grid);
}

CorrectionCurve oracle_curve(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                             std::span<const double> r_grid) {
    const auto err = flatten_errors(pred, gt);
    return curve_from_ranking(rank_pixels(nullptr, err), r_grid);
}

CorrectionCurve oracle_curve_analytic(double base_acc, std::span<const double> r_grid) {
    if (base_acc < 0.0 || base_acc > 1.0) throw ConfigError("base accuracy must lie in [0, 1]");
    CorrectionCurve curve;
    for (double r : r_grid) {
        curve.r.push_back(r);
        curve.acc.push_back(std::min(base_acc + r, 1.0));
    }
    return curve;
}

double auc(const CorrectionCurve& curve) {
    if (curve.r.size() != curve.acc.size() || curve.r.size() < 2)
        throw ConfigError("curve needs at least two points");
    constexpr double kMax = 0.5;
    if (curve.r.front() > 1e-12 || curve.r.back() < kMax - 1e-12)
        throw ConfigError("curve must cover r in [0, 0.5]");
    double area = 0.0;
    for (size_t i = 1; i < curve.r.size(); ++i) {
        double r0 = curve.r[i - 1], r1 = curve.r[i];
        double a0 = curve.acc[i - 1], a1 = curve.acc[i];
        if (r1 <= r0) throw ConfigError("curve r values must be strictly increasing");
        if (r0 >= kMax) break;
        if (r1 > kMax) {  // clip the crossing segment
            a1 = a0 + (a1 - a0) * (kMax - r0) / (r1 - r0);
            r1 = kMax;
        }
        area += 0.5 * (a0 + a1) * (r1 - r0);
    }
    return area / kMax;
}

void write_curve_csv(const std::filesystem::path& file, const CorrectionCurve& curve) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "r,acc_a\n";
    char buf[80];
    for (size_t i = 0; i < curve.r.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.4f,%.9g\n", curve.r[i], curve.acc[i]);
        out << buf;
    }
}

void write_confusion_csv(const std::filesystem::path& file, const ConfusionMatrix& conf,
                         const std::vector<std::string>& class_names) {
    const auto names = class_names.empty() ? default_class_names(conf.num_classes)
                                           : class_names;
    if (static_cast<int>(names.size()) != conf.num_classes)
        throw ConfigError("class name count does not match confusion matrix");
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "gt\\pred";
    for (const auto& n : names) out << "," << n;
    out << "\n";
    for (int i = 0; i < conf.num_classes; ++i) {
        out << names[i];
        for (int j = 0; j < conf.num_classes; ++j) out << "," << conf.at(i, j);
        out << "\n";
    }
}

}  // namespace segcomp
