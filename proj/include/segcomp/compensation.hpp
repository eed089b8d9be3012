#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "segcomp/grids.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

enum class CompMode {
    free,           // K x K parameters, diagonal masked to zero
    symmetric,      // shared upper-triangle parameters, zero diagonal
    unconstrained,  // raw K x K, no constraints (naive logit-compensation preset)
};

const char* comp_mode_name(CompMode mode);
CompMode comp_mode_from_name(std::string_view name);

// The K x K compensation matrix B. Entry B[i][gt] is an additive bias on the
// logit of class i for pixels annotated gt. Zero diagonal and the optional
// symmetry are enforced structurally, so they hold exactly after every
// optimizer step; mirrored entries share one parameter and accumulate both
// positions' gradients.
struct CompensationMatrix {
    int num_classes = 0;
    CompMode mode = CompMode::free;
    Param p;  // K*K (free/unconstrained) or K*(K-1)/2 (symmetric upper triangle)

    static CompensationMatrix zeros(int num_classes, CompMode mode);

    std::vector<double> materialize() const;  // row-major K x K
    // Chain rule from a gradient w.r.t. the materialized matrix into p.g.
    void accumulate_grad(std::span<const double> d_mat);
    std::vector<ParamRef> params();
    void zero_grad();
    bool is_zero() const;

    size_t tri_index(int i, int j) const;  // symmetric-mode packing, i < j
};

void write_compensation_csv(const std::filesystem::path& file, const CompensationMatrix& comp,
                            const std::vector<std::string>& class_names);

// Numerically stabilized softmax (max subtraction). Throws NumericError on
// non-finite input.
void plain_probabilities(std::span<const double> logits, std::span<double> out);
std::vector<double> plain_probabilities(std::span<const double> logits);

// Softmax of l + beta * B[:, gt]: the ground-truth-conditioned compensated
// head. beta = 1 recovers the purely global form; B = 0 or beta = 0 reduce
// bit-exactly to the plain softmax.
void compensated_probabilities(std::span<const double> logits, std::span<const double> B,
                               int num_classes, double beta, int gt, std::span<double> out);
std::vector<double> compensated_probabilities(std::span<const double> logits,
                                              std::span<const double> B, int num_classes,
                                              double beta, int gt);

struct LossBreakdown {
    double total = 0.0;
    double cross_entropy = 0.0;
    double lasso = 0.0;
    double alpha = 0.0;
};

// Mean over pixels of the compensated cross-entropy plus the local lasso
// penalty (alpha/K) * beta_x * sum_i |B[i][gt_x]|. The penalty is computed
// per pixel and averaged with the same 1/|I| as the cross-entropy, keeping
// the loss scale batch-size independent.
LossBreakdown training_loss(const LogitGrid& logits, const BetaGrid& betas,
                            const LabelGrid& labels, std::span<const double> B,
                            int num_classes, double alpha);
LossBreakdown training_loss(const LogitGrid& logits, const BetaGrid& betas,
                            const LabelGrid& labels, const CompensationMatrix& comp,
                            double alpha);

// Fused loss + gradients. Gradients (scaled by `scale`) are accumulated into
// d_logits, d_beta and d_B; the |.| subgradient at zero is zero.
LossBreakdown training_loss_backward(const LogitGrid& logits, const BetaGrid& betas,
                                     const LabelGrid& labels, std::span<const double> B,
                                     int num_classes, double alpha, double scale,
                                     Grid3& d_logits, Grid2& d_beta, std::span<double> d_B);

}  // namespace segcomp
