#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "segcomp/error.hpp"
#include "segcomp/rng.hpp"
#include "segcomp/synthgrid.hpp"

using namespace segcomp;
namespace fs = std::filesystem;

namespace {

SceneConfig ambiguous_cfg() {
    SceneConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.feature_dim = 6;
    cfg.num_classes = 4;
    cfg.num_regions = 6;
    cfg.ambiguous_pairs = {{{0, 1}, 0.95}};
    cfg.noise_std = 0.3;
    cfg.boundary_mix_width = 1;
    cfg.seed = 42;
    return cfg;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    const double ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    const double aa = std::inner_product(a.begin(), a.end(), a.begin(), 0.0);
    const double bb = std::inner_product(b.begin(), b.end(), b.begin(), 0.0);
    return ab / std::sqrt(aa * bb);
}

// brute-force oracle: all-pairs Chebyshev scan
LabelGrid corrupt_brute_force(const LabelGrid& labels, const std::vector<OrientedPair>& pairs,
                              int n) {
    LabelGrid out = labels;
    std::vector<uint8_t> claimed(labels.size(), 0);
    for (const auto& pair : pairs) {
        for (int y = 0; y < labels.h; ++y) {
            for (int x = 0; x < labels.w; ++x) {
                if (labels.at(y, x) != pair.inferior) continue;
                if (claimed[static_cast<size_t>(y) * labels.w + x]) continue;
                bool near = false;
                for (int sy = 0; sy < labels.h && !near; ++sy)
                    for (int sx = 0; sx < labels.w && !near; ++sx)
                        if (labels.at(sy, sx) == pair.superior &&
                            std::max(std::abs(sy - y), std::abs(sx - x)) <= n)
                            near = true;
                if (near) {
                    out.at(y, x) = pair.superior;
                    claimed[static_cast<size_t>(y) * labels.w + x] = 1;
                }
            }
        }
    }
    return out;
}

LabelGrid random_labels(int h, int w, int k, Rng& rng) {
    LabelGrid g(h, w);
    for (int& v : g.v) v = rng.next_int(k);
    return g;
}

fs::path temp_dir(const char* tag) {
    const fs::path dir =
        fs::temp_directory_path() / (std::string("segcomp_test_") + tag);
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("generate_scene is deterministic") {
    const SceneConfig cfg = ambiguous_cfg();
    auto [f1, l1] = generate_scene(cfg, 3);
    auto [f2, l2] = generate_scene(cfg, 3);
    CHECK(f1.v == f2.v);
    CHECK(l1 == l2);

    auto [f3, l3] = generate_scene(cfg, 4);  // different image index
    CHECK(f3.v != f1.v);
}

TEST_CASE("degenerate scene equals prototypes exactly") {
    SceneConfig cfg = ambiguous_cfg();
    cfg.noise_std = 0.0;
    cfg.boundary_mix_width = 0;
    const auto protos = class_prototypes(cfg);
    auto [f, l] = generate_scene(cfg, 0);
    for (int y = 0; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x)
            for (int d = 0; d < f.c; ++d)
                CHECK(f.at(y, x, d) == protos[l.at(y, x)][d]);
}

TEST_CASE("prototype cosine structure") {
    const SceneConfig cfg = ambiguous_cfg();
    const auto protos = class_prototypes(cfg);
    REQUIRE(protos.size() == 4);
    for (const auto& p : protos)
        CHECK(std::abs(1.0 - std::sqrt(std::inner_product(p.begin(), p.end(), p.begin(),
                                                          0.0))) < 1e-6);
    CHECK(cosine(protos[0], protos[1]) >= 0.95);
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b)
            if (!(a == 0 && b == 1)) CHECK(std::abs(cosine(protos[a], protos[b])) <= 0.3);
}

TEST_CASE("scene invariants: labels in range, features finite, contiguous regions") {
    const SceneConfig cfg = ambiguous_cfg();
    auto [f, l] = generate_scene(cfg, 7);
    for (int v : l.v) {
        CHECK(v >= 0);
        CHECK(v < cfg.num_classes);
    }
    for (double x : f.v) CHECK(std::isfinite(x));

    // region growth keeps label patches connected: the number of
    // 4-connected same-label components cannot exceed num_regions
    std::vector<int> comp(l.size(), -1);
    int n_comp = 0;
    for (int start = 0; start < static_cast<int>(l.size()); ++start) {
        if (comp[start] >= 0) continue;
        std::vector<int> stack{start};
        comp[start] = n_comp;
        while (!stack.empty()) {
            const int cell = stack.back();
            stack.pop_back();
            const int y = cell / l.w, x = cell % l.w;
            const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int i = 0; i < 4; ++i) {
                const int ny = y + dy[i], nx = x + dx[i];
                if (ny < 0 || ny >= l.h || nx < 0 || nx >= l.w) continue;
                const int nc = ny * l.w + nx;
                if (comp[nc] < 0 && l.v[nc] == l.v[cell]) {
                    comp[nc] = n_comp;
                    stack.push_back(nc);
                }
            }
        }
        ++n_comp;
    }
    CHECK(n_comp <= cfg.num_regions);
}

TEST_CASE("invalid scene configs are rejected") {
    SceneConfig cfg = ambiguous_cfg();
    cfg.num_classes = 1;
    CHECK_THROWS_AS(generate_scene(cfg, 0), ConfigError);
    cfg = ambiguous_cfg();
    cfg.noise_std = std::nan("");
    CHECK_THROWS_AS(generate_scene(cfg, 0), ConfigError);
    cfg = ambiguous_cfg();
    cfg.ambiguous_pairs[0].similarity = 1.5;
    CHECK_THROWS_AS(class_prototypes(cfg), ConfigError);
    cfg = ambiguous_cfg();
    cfg.feature_dim = 3;  // < num_classes
    CHECK_THROWS_AS(class_prototypes(cfg), ConfigError);
    cfg = ambiguous_cfg();
    cfg.ambiguous_pairs = {{{0, 1}, 0.9}, {{1, 2}, 0.9}};  // overlapping pairs
    CHECK_THROWS_AS(class_prototypes(cfg), ConfigError);
}

TEST_CASE("sample_pair_assignments: determinism and orientation frequency") {
    const std::vector<ClassPair> pairs{{2, 5}};
    const PairAssignment a = sample_pair_assignments(pairs, 10000, 99);
    const PairAssignment b = sample_pair_assignments(pairs, 10000, 99);
    CHECK(a.table.size() == b.table.size());
    int forward = 0;
    for (size_t i = 0; i < a.table.size(); ++i) {
        CHECK(a.table[i].superior == b.table[i].superior);
        const std::set<int> got{a.table[i].superior, a.table[i].inferior};
        CHECK(got == std::set<int>{2, 5});
        if (a.table[i].superior == 2) ++forward;
    }
    const double freq = forward / 10000.0;
    CHECK(freq >= 0.45);
    CHECK(freq <= 0.55);
}

TEST_CASE("sample_pair_assignments rejects degenerate pairs") {
    CHECK_THROWS_AS(sample_pair_assignments({{3, 3}}, 10, 0), ConfigError);
    CHECK_THROWS_AS(sample_pair_assignments({}, 10, 0), ConfigError);
}

TEST_CASE("corrupt_labels: zero radius is the identity") {
    Rng rng(7);
    const LabelGrid l = random_labels(9, 11, 4, rng);
    const LabelGrid out = corrupt_labels(l, {{0, 1}}, 0, 4);
    CHECK(out == l);
}

TEST_CASE("corrupt_labels: 1x4 strip") {
    LabelGrid l(1, 4);
    l.v = {0, 1, 1, 1};  // superior 0, inferior 1
    const LabelGrid out = corrupt_labels(l, {{0, 1}}, 1, 2);
    CHECK(out.v == std::vector<int>{0, 0, 1, 1});
}

TEST_CASE("corrupt_labels: radius covering the grid flips every inferior pixel") {
    Rng rng(13);
    LabelGrid l = random_labels(8, 8, 3, rng);
    l.at(0, 0) = 2;  // ensure a superior pixel exists
    const LabelGrid out = corrupt_labels(l, {{2, 0}}, 64, 3);
    for (size_t i = 0; i < l.size(); ++i) {
        if (l.v[i] == 0)
            CHECK(out.v[i] == 2);
        else
            CHECK(out.v[i] == l.v[i]);
    }
}

TEST_CASE("corrupt_labels matches the brute-force Chebyshev oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 25; ++trial) {
        const LabelGrid l = random_labels(16, 16, 5, rng);
        const std::vector<OrientedPair> pairs{{0, 1}, {2, 3}, {4, 1}};
        for (int n : {0, 1, 2, 5}) {
            const LabelGrid fast = corrupt_labels(l, pairs, n, 5);
            const LabelGrid slow = corrupt_brute_force(l, pairs, n);
            CHECK(fast == slow);
        }
    }
}

TEST_CASE("corrupt_labels is monotone in the radius and only flips inferior pixels") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const LabelGrid l = random_labels(12, 12, 4, rng);
        const std::vector<OrientedPair> pairs{{1, 2}};
        LabelGrid prev = corrupt_labels(l, pairs, 0, 4);
        for (int n = 1; n <= 4; ++n) {
            const LabelGrid cur = corrupt_labels(l, pairs, n, 4);
            for (size_t i = 0; i < l.size(); ++i) {
                if (prev.v[i] != l.v[i]) CHECK(cur.v[i] == prev.v[i]);  // subset property
                if (cur.v[i] != l.v[i]) {
                    CHECK(l.v[i] == 2);
                    CHECK(cur.v[i] == 1);
                }
            }
            prev = cur;
        }
    }
}

TEST_CASE("corrupt_labels overlap: lower pair index wins") {
    LabelGrid l(1, 3);
    l.v = {0, 2, 1};  // pixel 1 is inferior to both pairs
    const LabelGrid a = corrupt_labels(l, {{0, 2}, {1, 2}}, 1, 3);
    CHECK(a.v == std::vector<int>{0, 0, 1});
    const LabelGrid b = corrupt_labels(l, {{1, 2}, {0, 2}}, 1, 3);
    CHECK(b.v == std::vector<int>{0, 1, 1});
}

TEST_CASE("corrupt_labels rejects out-of-range labels") {
    LabelGrid l(1, 2);
    l.v = {0, 5};
    CHECK_THROWS_AS(corrupt_labels(l, {{0, 1}}, 1, 4), DataError);
    l.v = {0, 1};
    CHECK_THROWS_AS(corrupt_labels(l, {{0, 9}}, 1, 4), DataError);
}

TEST_CASE("dataset round trip is bit exact") {
    const SceneConfig cfg = ambiguous_cfg();
    const Dataset ds = generate_dataset(cfg, 3);
    const fs::path dir = temp_dir("roundtrip");
    write_dataset(dir, ds);
    const Dataset back = read_dataset(dir);
    REQUIRE(back.size() == ds.size());
    CHECK(back.num_classes == ds.num_classes);
    CHECK(back.seed == ds.seed);
    CHECK(back.class_names == ds.class_names);
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(back.features[i].v == ds.features[i].v);
        CHECK(back.labels[i] == ds.labels[i]);
    }
    fs::remove_all(dir);
}

TEST_CASE("read_dataset rejects corrupted payloads") {
    const SceneConfig cfg = ambiguous_cfg();
    const Dataset ds = generate_dataset(cfg, 2);
    const fs::path dir = temp_dir("corrupt");
    write_dataset(dir, ds);

    SUBCASE("truncated features.bin") {
        fs::resize_file(dir / "features.bin", 10);
        CHECK_THROWS_AS(read_dataset(dir), DataError);
    }
    SUBCASE("label byte out of range") {
        std::fstream f(dir / "labels.bin",
                       std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        const char big = 17;
        f.write(&big, 1);
        f.close();
        CHECK_THROWS_AS(read_dataset(dir), DataError);
    }
    SUBCASE("malformed manifest") {
        std::ofstream(dir / "manifest.json") << "{not json";
        CHECK_THROWS_AS(read_dataset(dir), DataError);
    }
    fs::remove_all(dir);
}
