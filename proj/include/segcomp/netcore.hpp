#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "segcomp/grids.hpp"
#include "segcomp/rng.hpp"

namespace segcomp {

// A trainable tensor: values plus a gradient accumulator of the same shape.
struct Param {
    std::vector<double> v;
    std::vector<double> g;

    void init(size_t n, double fill = 0.0) {
        v.assign(n, fill);
        g.assign(n, 0.0);
    }
    size_t size() const { return v.size(); }
};

using ParamRef = std::pair<std::string, Param*>;

enum class Mode { train, eval };

// Low-level forward switches. Mode::train maps to {batch_stats, dropout,
// update_running}; Mode::eval disables all three. The gradient audit uses
// batch statistics without dropout or running-stat updates, MC dropout uses
// dropout with eval-mode batchnorm.
struct FwdOpts {
    bool batch_stats = false;
    bool dropout = false;
    bool update_running = false;
    Rng* rng = nullptr;

    static FwdOpts for_mode(Mode m, Rng* rng = nullptr) {
        if (m == Mode::train) return {true, true, true, rng};
        return {false, false, false, nullptr};
    }
};

constexpr int kBranchWidth = 64;  // uncertainty branch hidden channels

struct SegModelDims {
    int in_dim = 0;
    int hidden = 0;
    int num_classes = 0;
};

// Toy per-pixel segmentation network: pointwise conv -> ReLU -> 3x3 conv ->
// ReLU trunk, a pointwise classifier head producing logits, and the
// uncertainty branch (pointwise conv to 64 channels, batchnorm, pointwise
// conv to 1, sigmoid) producing beta_x in (0,1). Optional dropout after each
// trunk activation.
struct SegModel {
    SegModelDims dims;
    double dropout_rate = 0.0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;

    Param conv1_w, conv1_b;  // hidden x in_dim; hidden
    Param conv2_w, conv2_b;  // hidden x hidden x 3 x 3; hidden
    Param head_w, head_b;    // K x hidden; K
    Param br1_w;             // 64 x hidden; no bias, batchnorm follows
    Param bn_gamma, bn_beta;
    Param br2_w, br2_b;      // 1 x 64; 1
    std::vector<double> bn_rmean, bn_rvar;  // running stats (buffers, not trained)

    // Seeded He-style fan-in uniform initialization; biases zero, gamma one.
    static SegModel init(const SegModelDims& dims, uint64_t seed, double dropout_rate = 0.0);
    // Every parameter zero (batchnorm running variance one). Test fixture.
    static SegModel zeros(const SegModelDims& dims);

    std::vector<ParamRef> params();
    void zero_grad();
    // Throws NumericError naming the first parameter group holding a
    // non-finite value; no-op when everything is finite.
    void check_finite(const std::string& context) const;
};

struct ForwardResult {
    LogitGrid logits;   // H x W x K
    BetaGrid beta;      // H x W, in (0,1)
    FeatureGrid hidden; // H x W x hidden (trunk output fed to all heads)
};

// Intermediates kept for the backward pass.
struct ForwardCache {
    FwdOpts opts;
    int h = 0, w = 0;
    FeatureGrid input;
    Grid3 a1;                          // conv1 pre-activation
    Grid3 r1;                          // post ReLU (+dropout)
    std::vector<uint8_t> mask1, mask2; // dropout keep masks (empty if inactive)
    Grid3 a2;                          // conv2 pre-activation
    Grid3 hidden;                      // post ReLU (+dropout)
    Grid3 br1;                         // branch pre-batchnorm, 64 channels
    std::vector<double> bn_mean, bn_var;  // statistics used by this pass
    Grid3 bn_xhat;                     // normalized branch activations
    Grid2 br2;                         // pre-sigmoid
    BetaGrid beta;
    LogitGrid logits;
};

ForwardResult forward(SegModel& model, const FeatureGrid& features, Mode mode,
                      Rng* rng = nullptr, ForwardCache* cache = nullptr);
ForwardResult forward_ex(SegModel& model, const FeatureGrid& features, const FwdOpts& opts,
                         ForwardCache* cache = nullptr);

// Reverse pass for a train-mode cache. Accumulates parameter gradients into
// the model. d_beta and d_hidden_extra may be null; d_hidden_extra lets an
// extra head (e.g. a per-pixel transition branch) inject gradient into the
// trunk output.
void backward(SegModel& model, const ForwardCache& cache, const Grid3& d_logits,
              const Grid2* d_beta, const Grid3* d_hidden_extra);

}  // namespace segcomp
