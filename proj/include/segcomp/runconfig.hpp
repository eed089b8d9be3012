#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segcomp/baselines.hpp"
#include "segcomp/inference.hpp"
#include "segcomp/synthgrid.hpp"
#include "segcomp/trainer.hpp"

namespace segcomp {

// Sectioned key=value text (a TOML-compatible subset): [section] headers,
// key = value lines, # comments. Values are scalars or comma-separated lists.
struct KvConfig {
    std::map<std::string, std::map<std::string, std::string>> sections;

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key) const;
    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& fallback) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    double get_double(const std::string& section, const std::string& key,
                      double fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key,
                     uint64_t fallback) const;
};

KvConfig parse_config_file(const std::filesystem::path& file);
KvConfig parse_config_text(const std::string& text);

std::vector<std::string> split_list(const std::string& value);

// Fully resolved run configuration for the CLI.
struct RunConfig {
    SceneConfig scene;
    int train_images = 8;
    int val_images = 4;
    std::optional<std::filesystem::path> train_dir, val_dir;  // read instead of generating

    TrainConfig train;
    int hidden = 12;
    Method method = Method::ours;
    double bnn_dropout = 0.25;
    int bnn_samples = 20;

    // experiment section
    std::vector<int> noise_levels{0, 2, 4};
    std::vector<uint64_t> exp_seeds;
    std::vector<ClassPair> noise_pairs;
    std::vector<int> k_list;
    int top_k = 0;  // 0 = min(kDefaultTopK, K)
    double phi = 1.0;
    double r_step = 0.01;
    double r_max = 0.5;
    InductionSpec induction;
    InductionSpec::Relaxation relaxation = InductionSpec::Relaxation::soft;
    InductionSpec::BetaSource beta_source = InductionSpec::BetaSource::branch;

    std::optional<std::filesystem::path> checkpoint;  // reuse instead of training
    std::filesystem::path output_dir = "runs";
    std::string config_hash;

    SegModelDims dims() const { return {scene.feature_dim, hidden, scene.num_classes}; }
};

RunConfig load_run_config(const std::filesystem::path& file);

// FNV-1a over the raw config bytes, 16 hex digits; names run directories.
std::string hash_bytes_hex(const std::string& bytes);

struct SplitDataset {
    Dataset train;
    Dataset val;
};

// Reads the configured dataset directories or synthesizes both splits from
// the scene config (train images first, validation images after them).
SplitDataset resolve_dataset(const RunConfig& cfg);

}  // namespace segcomp
