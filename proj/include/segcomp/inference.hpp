#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "segcomp/grids.hpp"
#include "segcomp/netcore.hpp"

namespace segcomp {

// Manual bias injection for inference. The matrix is applied against the
// model's own relaxed prediction, never against a learned B (which would
// reinforce wrong predictions). The diagonal may be nonzero: raising B[i][i]
// prioritizes class i, lowering B[i][j] suppresses i against confuser j.
struct InductionSpec {
    int num_classes = 0;
    std::vector<double> matrix;  // K x K row-major

    enum class Relaxation { soft, hard };
    enum class BetaSource { branch, one };
    Relaxation relaxation = Relaxation::soft;
    BetaSource beta_source = BetaSource::branch;

    static InductionSpec zero(int num_classes);
    void validate() const;
};

struct Prediction {
    LabelGrid labels;
    ProbGrid probs;
};

// Per-pixel argmax of the plain probabilities; ties take the lowest class
// index. Any compensation or transition machinery is absent here.
Prediction predict(SegModel& model, const FeatureGrid& features);

LabelGrid predict_labels(SegModel& model, const FeatureGrid& features);

// logits' = l + beta * (B_manual q) with q the plain probability vector
// (soft) or its argmax one-hot (hard); beta comes from the branch or is 1.
LabelGrid bias_induced_predict(SegModel& model, const FeatureGrid& features,
                               const InductionSpec& spec);

// labels.bin-format payload plus a manifest (no feature payload).
void write_predictions(const std::filesystem::path& dir,
                       const std::vector<LabelGrid>& preds, int num_classes,
                       const std::vector<std::string>& class_names, uint64_t seed);

}  // namespace segcomp
