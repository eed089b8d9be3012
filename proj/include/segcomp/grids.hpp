#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace segcomp {

// Per-pixel scalar field, row-major.
struct Grid2 {
    int h = 0, w = 0;
    std::vector<double> v;

    Grid2() = default;
    Grid2(int h_, int w_, double fill = 0.0)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * static_cast<size_t>(w_), fill) {}

    double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return v.size(); }
};

// Per-pixel vector field (H x W x C), row-major with the channel fastest.
struct Grid3 {
    int h = 0, w = 0, c = 0;
    std::vector<double> v;

    Grid3() = default;
    Grid3(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_),
          v(static_cast<size_t>(h_) * static_cast<size_t>(w_) * static_cast<size_t>(c_), fill) {}

    double* px(int y, int x) { return v.data() + (static_cast<size_t>(y) * w + x) * c; }
    const double* px(int y, int x) const {
        return v.data() + (static_cast<size_t>(y) * w + x) * c;
    }
    double& at(int y, int x, int ch) { return px(y, x)[ch]; }
    double at(int y, int x, int ch) const { return px(y, x)[ch]; }
    size_t pixels() const { return static_cast<size_t>(h) * static_cast<size_t>(w); }
    size_t size() const { return v.size(); }
};

using FeatureGrid = Grid3;  // c = feature dimension
using LogitGrid = Grid3;    // c = number of classes
using ProbGrid = Grid3;     // c = number of classes
using BetaGrid = Grid2;

// Per-pixel class indices in [0, num_classes).
struct LabelGrid {
    int h = 0, w = 0;
    std::vector<int> v;

    LabelGrid() = default;
    LabelGrid(int h_, int w_, int fill = 0)
        : h(h_), w(w_), v(static_cast<size_t>(h_) * static_cast<size_t>(w_), fill) {}

    int& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    int at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return v.size(); }

    bool operator==(const LabelGrid& o) const { return h == o.h && w == o.w && v == o.v; }
};

// An in-memory image set sharing one class space.
struct Dataset {
    int num_classes = 0;
    uint64_t seed = 0;
    std::vector<std::string> class_names;
    std::vector<FeatureGrid> features;
    std::vector<LabelGrid> labels;

    size_t size() const { return features.size(); }
    bool empty() const { return features.empty(); }
};

enum class MapKind { beta, sigma2, u, e };

const char* map_kind_name(MapKind kind);

// One per-pixel scalar diagnostic map (beta_x, sigma^2_x, u_x or e_x).
struct UncertaintyMap {
    MapKind kind = MapKind::e;
    double phi = 1.0;  // only meaningful for the e map
    Grid2 values;
};

std::vector<std::string> default_class_names(int num_classes);

}  // namespace segcomp
