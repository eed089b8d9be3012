#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segcomp/grids.hpp"

namespace segcomp {

// Pixel counts, cell (ground truth, prediction).
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<int64_t> counts;

    explicit ConfusionMatrix(int k = 0)
        : num_classes(k), counts(static_cast<size_t>(k) * k, 0) {}
    int64_t& at(int gt, int pred) { return counts[static_cast<size_t>(gt) * num_classes + pred]; }
    int64_t at(int gt, int pred) const {
        return counts[static_cast<size_t>(gt) * num_classes + pred];
    }
    int64_t total() const;
    int64_t gt_count(int c) const;    // |Y_c|: row sum
    int64_t pred_count(int c) const;  // |X_c|: column sum
    void add(const LabelGrid& gt, const LabelGrid& pred);
};

ConfusionMatrix confusion(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                          int num_classes);
ConfusionMatrix confusion(const LabelGrid& pred, const LabelGrid& gt, int num_classes);

// Mean over classes of |X_c intersect Y_c| / |X_c union Y_c|; classes with an
// empty union are excluded from the mean. Throws DataError when every union
// is empty.
double miou(const ConfusionMatrix& conf);

struct Accuracies {
    // Acc_c = |X_c intersect Y_c| / |Y_c|; unset when the class is absent
    // from the ground truth.
    std::vector<std::optional<double>> per_class;
    double aggregate = 0.0;  // trace / total
};
Accuracies accuracies(const ConfusionMatrix& conf);

// Acc_a as a function of the fraction r of most-uncertain pixels replaced by
// ground truth; r in [0, 0.5].
struct CorrectionCurve {
    std::vector<double> r;
    std::vector<double> acc;
};

std::vector<double> default_r_grid(double step = 0.01, double max_r = 0.5);

// Pixels ranked by uncertainty descending, ties in raster order (image,
// row, column); for each r the top floor(r*N) pixels take their ground-truth
// label and Acc_a is recomputed.
CorrectionCurve correction_curve(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                                 std::span<const Grid2> uncertainty,
                                 std::span<const double> r_grid);

// Optimal ranking: every erroneous pixel first (raster ties).
CorrectionCurve oracle_curve(std::span<const LabelGrid> pred, std::span<const LabelGrid> gt,
                             std::span<const double> r_grid);

// Continuous form of the oracle, Acc_a(r) = min(base + r, 1), sampled on the
// grid. Matches oracle_curve in the large-pixel-count limit.
CorrectionCurve oracle_curve_analytic(double base_acc, std::span<const double> r_grid);

// Trapezoid integral of the curve over r in [0, 0.5], divided by 0.5. The
// curve must start at r = 0 and reach r >= 0.5.
double auc(const CorrectionCurve& curve);

void write_curve_csv(const std::filesystem::path& file, const CorrectionCurve& curve);
void write_confusion_csv(const std::filesystem::path& file, const ConfusionMatrix& conf,
                         const std::vector<std::string>& class_names);

}  // namespace segcomp
