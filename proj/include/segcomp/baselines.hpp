#pragma once

#include <span>
#include <vector>

#include "segcomp/grids.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

// Trainable label-noise transition head: p_bar = T p with column-stochastic
// T. The s-model shares one T globally; the c-model predicts T per pixel from
// the trunk's hidden features through a two-layer pointwise branch
// (hidden -> 32 -> K^2). Training applies the loss to p_bar; inference drops
// the transition and uses the plain prediction.
struct TransitionHead {
    enum class Kind { s_model, c_model };
    static constexpr int kReduced = 32;

    Kind kind = Kind::s_model;
    int num_classes = 0;
    int feature_dim = 0;  // c-model branch input width

    Param s_raw;                    // K x K raw weights (s-model)
    Param c_w1, c_b1, c_w2, c_b2;   // 32 x F, 32, K^2 x 32, K^2

    // diag_init biases the initial T towards the identity so early training
    // matches the underlying baseline.
    static TransitionHead make_s_model(int num_classes, double diag_init = 4.0);
    static TransitionHead make_c_model(int num_classes, int feature_dim, uint64_t seed,
                                       double diag_init = 4.0);

    std::vector<ParamRef> params();
    void zero_grad();
};

// out[:, j] = softmax(raw[:, j]); every column sums to one.
std::vector<double> column_softmax(std::span<const double> raw, int num_classes);
// draw accumulation for d(column_softmax)/d(raw) given dT.
void column_softmax_backward(std::span<const double> T, std::span<const double> dT,
                             int num_classes, std::span<double> d_raw);

std::vector<double> s_model_matrix(const TransitionHead& head);
std::vector<double> s_model_forward(const TransitionHead& head, std::span<const double> p);

// Per-pixel transition matrix from the branch, and the resulting p_bar.
std::vector<double> c_model_matrix(const TransitionHead& head,
                                   std::span<const double> hidden_x,
                                   std::vector<double>* reduced_out = nullptr);
std::vector<double> c_model_forward(const TransitionHead& head,
                                    std::span<const double> hidden_x,
                                    std::span<const double> p_x);

// p_bar = T p: accumulate dT and return dp = T^T dpbar.
void transition_backward(std::span<const double> T, std::span<const double> p,
                         std::span<const double> dpbar, int num_classes,
                         std::span<double> dT_accum, std::span<double> dp_out);

// Backward through the c-model branch for one pixel: d_raw (K^2) propagates
// into the branch weights and (accumulated) into d_hidden.
void c_branch_backward(TransitionHead& head, std::span<const double> hidden_x,
                       std::span<const double> reduced, std::span<const double> d_raw,
                       std::span<double> d_hidden_accum);

struct DropoutEnsemble {
    double rate = 0.25;
    int num_samples = 20;
    uint64_t seed = 0;
};

struct McDropoutResult {
    ProbGrid mean;   // H x W x K, mean probability over samples
    Grid2 variance;  // per-pixel class-mean of the per-class sample variance
};

// Monte-Carlo dropout: repeated stochastic forwards with active dropout and
// eval-mode batchnorm.
McDropoutResult mc_dropout_predict(SegModel& model, const FeatureGrid& features,
                                   const DropoutEnsemble& ens);

}  // namespace segcomp
