#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "segcomp/baselines.hpp"
#include "segcomp/compensation.hpp"
#include "segcomp/grids.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

enum class LossKind { plain, compensated, s_model, c_model };

struct TrainConfig {
    int steps = 3000;
    int batch_size = 8;
    double lr = 0.05;
    double momentum = 0.9;
    double poly_decay_power = 0.9;  // 0 disables decay
    double alpha = 0.01;
    bool symmetric = false;
    bool compensation_enabled = true;
    uint64_t seed = 0;

    LossKind loss_kind = LossKind::compensated;
    bool unconstrained = false;  // drop zero-diagonal/symmetry (LogComp preset)
    bool beta_one = false;       // beta = 1 everywhere instead of the branch
    int eval_every = 0;          // 0 = no periodic snapshots
    bool check_invariants = false;

    void validate() const;
    CompMode comp_mode() const {
        if (unconstrained) return CompMode::unconstrained;
        return symmetric ? CompMode::symmetric : CompMode::free;
    }
};

struct EvalSnapshot {
    int step = 0;
    double miou = 0.0;
    double acc_a = 0.0;
    double mean_u = 0.0;
};

struct TrainHistory {
    std::vector<LossBreakdown> losses;  // one entry per step
    std::vector<double> lr;             // learning rate used at each step
    std::vector<EvalSnapshot> snapshots;
};

double poly_lr(double base, int step, int steps, double power);

// Determinism protocol: batch indices come from
// Rng(derive_seed(cfg.seed, kBatchStreamTag)) drawing batch_size values per
// step via next_below(N); dropout masks from
// Rng(derive_seed(cfg.seed, kDropoutStreamTag)), consumed image by image in
// batch order.
constexpr uint64_t kBatchStreamTag = 0x62617463;
constexpr uint64_t kDropoutStreamTag = 0x64726f70;

struct LossSpec {
    LossKind kind = LossKind::plain;
    double alpha = 0.0;
    bool beta_one = false;
};

// Zeroes all gradients, then computes the batch loss over every image of
// `batch` (batch-statistics forward, no dropout, running stats untouched) and
// accumulates analytic gradients into model/comp/head. Returns the loss.
LossBreakdown compute_batch_gradients(SegModel& model, CompensationMatrix* comp,
                                      TransitionHead* head, const Dataset& batch,
                                      const LossSpec& spec);

// SGD with momentum against the configured objective. Deterministic given
// cfg.seed: batch order and dropout masks are seeded; the caller seeds the
// parameter init. With compensation disabled the compensated objective
// reduces to the plain cross-entropy path and B is never touched.
TrainHistory train(SegModel& model, CompensationMatrix& comp, TransitionHead* head,
                   const Dataset& train_set, const Dataset* eval_set, const TrainConfig& cfg);

void write_history_csv(const std::filesystem::path& file, const TrainHistory& hist);

// Mean over all pixels of u_x = 1 - max_i P(Y=i|x) from plain probabilities
// (compensation weights unused).
double mean_model_uncertainty(SegModel& model, const Dataset& ds);

// ---------------------------------------------------------------------------

enum class Method { baseline, ours, ours_sym, logcomp, s_model, c_model, bnn };

Method method_from_name(std::string_view name);
const char* method_name(Method m);

struct TrainedMethod {
    Method method = Method::baseline;
    SegModel model;
    CompensationMatrix comp;
    std::optional<TransitionHead> head;
    TrainHistory history;
};

// Builds model/compensation/head for the method preset, trains, returns the
// artifacts. bnn_dropout only affects Method::bnn.
TrainedMethod train_method(Method m, const Dataset& train_set, const Dataset* eval_set,
                           const TrainConfig& base, const SegModelDims& dims,
                           double bnn_dropout = 0.25);

// ---------------------------------------------------------------------------

struct GradCheckConfig {
    LossKind kind = LossKind::compensated;
    double alpha = 0.01;
    bool beta_one = false;
    double tolerance = 1e-4;
};

struct FdOffender {
    std::string param;
    double rel_err = 0.0;
};

struct FdReport {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t params_checked = 0;
    std::vector<FdOffender> offenders;  // everything above tolerance (capped)
};

// Deliberate corruption of one analytic gradient entry; negative-control
// hook for the audit itself.
struct GradTamper {
    std::string group;
    size_t index = 0;
    double add = 0.0;
};

// Central-difference audit of every analytic gradient (h = 1e-4*max(1,|p|),
// relative error denominator guarded at 1e-8). Dropout is disabled during
// the check; batchnorm runs on batch statistics as in training.
FdReport finite_difference_check(SegModel& model, CompensationMatrix* comp,
                                 TransitionHead* head, const Dataset& batch,
                                 const GradCheckConfig& cfg,
                                 const GradTamper* tamper = nullptr);

}  // namespace segcomp
