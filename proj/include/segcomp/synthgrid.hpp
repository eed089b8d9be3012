#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "segcomp/grids.hpp"

namespace segcomp {

struct ClassPair {
    int class_a = 0;
    int class_b = 0;
};

// A class pair whose prototypes are built with a controlled cosine similarity.
struct AmbiguousPair {
    ClassPair classes;
    double similarity = 0.9;  // target prototype cosine, in [0, 1]
};

struct SceneConfig {
    int height = 16;
    int width = 16;
    int feature_dim = 6;
    int num_classes = 4;
    int num_regions = 6;
    std::vector<AmbiguousPair> ambiguous_pairs;
    double noise_std = 0.3;      // per-feature Gaussian noise
    int boundary_mix_width = 1;  // pixels near a region border get mixed features
    uint64_t seed = 0;
    std::vector<std::string> class_names;  // optional; defaults to class0..classK-1

    void validate() const;  // throws ConfigError
    std::vector<std::string> resolved_class_names() const;
};

// Unit-norm class prototypes on the feature sphere. Each designated ambiguous
// pair gets cosine >= its configured similarity; every other pair stays
// <= 0.3. Depends only on cfg, not on the image index. Components are rounded
// through float32 so dataset files round-trip bit-exactly.
std::vector<std::vector<double>> class_prototypes(const SceneConfig& cfg);

// Deterministic synthetic scene: seeded multi-source region growth, per-pixel
// feature = class prototype (+ boundary mixing) + Gaussian noise.
std::pair<FeatureGrid, LabelGrid> generate_scene(const SceneConfig& cfg, int image_index);

Dataset generate_dataset(const SceneConfig& cfg, int image_count, int first_index = 0);

// One sampled superior/inferior orientation of a class pair.
struct OrientedPair {
    int superior = 0;
    int inferior = 0;
};

// Fixed orientation sample per (image, pair); stable for a whole training run.
struct PairAssignment {
    std::vector<ClassPair> pairs;
    int num_images = 0;
    std::vector<OrientedPair> table;  // image-major

    const OrientedPair& at(int image, int pair) const {
        return table[static_cast<size_t>(image) * pairs.size() + pair];
    }
    std::vector<OrientedPair> for_image(int image) const;
};

PairAssignment sample_pair_assignments(const std::vector<ClassPair>& pairs, int num_images,
                                       uint64_t seed);

// Dilates each superior class into its paired inferior class: every pixel
// labeled inferior whose Chebyshev distance to a superior pixel of the
// original grid is <= radius is relabeled superior. Pairs are applied
// independently against the original grid; on overlap the lower pair index
// wins. Other classes are untouched.
LabelGrid corrupt_labels(const LabelGrid& labels, const std::vector<OrientedPair>& pairs,
                         int radius, int num_classes);

// Dataset directory format: manifest.json + features.bin (little-endian
// float32, image-major, row-major, channel fastest) + labels.bin (one byte
// per pixel, same order).
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace segcomp
