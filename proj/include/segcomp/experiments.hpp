#pragma once

#include <filesystem>
#include <vector>

#include "segcomp/grids.hpp"
#include "segcomp/synthgrid.hpp"
#include "segcomp/trainer.hpp"

namespace segcomp {

double eval_miou(SegModel& model, const Dataset& ds);

struct NoiseRobustnessCell {
    Method method = Method::baseline;
    int noise = 0;
    uint64_t seed = 0;
    double miou = 0.0;
};

// Trains every method on pair-dilated labels of the training split (noise
// level n) and evaluates mIoU on the clean held-out split. The corrupted
// labels for a given (seed, n) are shared across methods.
std::vector<NoiseRobustnessCell> run_noise_robustness(
    const Dataset& train_clean, const Dataset& val_clean, const std::vector<ClassPair>& pairs,
    const std::vector<int>& noise_levels, const std::vector<Method>& methods,
    const std::vector<uint64_t>& seeds, const TrainConfig& base, const SegModelDims& dims);

void write_noise_robustness_csv(const std::filesystem::path& file,
                                const std::vector<NoiseRobustnessCell>& cells);

struct MemorizationRow {
    std::string split;  // "train" or "val"
    bool compensation = false;
    uint64_t seed = 0;
    double mean_u = 0.0;
};

// Trains with and without compensation, then measures mean u_x from plain
// probabilities on each split (compensation weights unused at inference).
std::vector<MemorizationRow> run_memorization(const Dataset& train_set, const Dataset& val_set,
                                              const std::vector<uint64_t>& seeds,
                                              const TrainConfig& base,
                                              const SegModelDims& dims);

void write_memorization_csv(const std::filesystem::path& file,
                            const std::vector<MemorizationRow>& rows);

}  // namespace segcomp
