#include "segcomp/experiments.hpp"

#include <cstdio>
#include <fstream>

#include "segcomp/error.hpp"
#include "segcomp/inference.hpp"
#include "segcomp/metrics.hpp"

namespace segcomp {

namespace {
constexpr uint64_t kNoiseSweepStream = 0x6e6f6973;
}

double eval_miou(SegModel& model, const Dataset& ds) {
    if (ds.empty()) throw DataError("evaluation dataset is empty");
    ConfusionMatrix conf(ds.num_classes);
    for (size_t i = 0; i < ds.size(); ++i) {
        const LabelGrid pred = predict_labels(model, ds.features[i]);
        conf.add(ds.labels[i], pred);
    }
    return miou(conf);
}

std::vector<NoiseRobustnessCell> run_noise_robustness(
    const Dataset& train_clean, const Dataset& val_clean, const std::vector<ClassPair>& pairs,
    const std::vector<int>& noise_levels, const std::vector<Method>& methods,
    const std::vector<uint64_t>& seeds, const TrainConfig& base, const SegModelDims& dims) {
    if (methods.empty() || noise_levels.empty() || seeds.empty())
        throw ConfigError("noise robustness sweep needs methods, noise levels and seeds");

    std::vector<NoiseRobustnessCell> cells;
    for (uint64_t seed : seeds) {
        const PairAssignment assignment = sample_pair_assignments(
            pairs, static_cast<int>(train_clean.size()),
            derive_seed(seed, kNoiseSweepStream));
        for (int n : noise_levels) {
            Dataset corrupted = train_clean;
            if (n > 0) {
                for (size_t img = 0; img < corrupted.size(); ++img)
                    corrupted.labels[img] =
                        corrupt_labels(train_clean.labels[img],
                                       assignment.for_image(static_cast<int>(img)), n,
                                       train_clean.num_classes);
            }
            for (Method m : methods) {
                TrainConfig cfg = base;
                cfg.seed = seed;
                TrainedMethod tm = train_method(m, corrupted, nullptr, cfg, dims);
                cells.push_back({m, n, seed, eval_miou(tm.model, val_clean)});
            }
        }
    }
    return cells;
}

void write_noise_robustness_csv(const std::filesystem::path& file,
                                const std::vector<NoiseRobustnessCell>& cells) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "method,n,seed,miou\n";
    char buf[128];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%llu,%.9g\n", method_name(c.method), c.noise,
                      static_cast<unsigned long long>(c.seed), c.miou);
        out << buf;
    }
}

std::vector<MemorizationRow> run_memorization(const Dataset& train_set, const Dataset& val_set,
                                              const std::vector<uint64_t>& seeds,
                                              const TrainConfig& base,
                                              const SegModelDims& dims) {
    if (seeds.empty()) throw ConfigError("memorization experiment needs seeds");
    std::vector<MemorizationRow> rows;
    for (uint64_t seed : seeds) {
        for (bool comp_on : {false, true}) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            TrainedMethod tm = train_method(comp_on ? Method::ours : Method::baseline,
                                            train_set, nullptr, cfg, dims);
            rows.push_back({"train", comp_on, seed, mean_model_uncertainty(tm.model, train_set)});
            if (!val_set.empty())
                rows.push_back({"val", comp_on, seed, mean_model_uncertainty(tm.model, val_set)});
        }
    }
    return rows;
}

void write_memorization_csv(const std::filesystem::path& file,
                            const std::vector<MemorizationRow>& rows) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "split,compensation,seed,mean_u\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%llu,%.9g\n", r.split.c_str(),
                      r.compensation ? 1 : 0, static_cast<unsigned long long>(r.seed),
                      r.mean_u);
        out << buf;
    }
}

}  // namespace segcomp
