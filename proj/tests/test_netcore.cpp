#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "segcomp/checkpoint.hpp"
#include "segcomp/error.hpp"
#include "segcomp/netcore.hpp"
#include "segcomp/synthgrid.hpp"

using namespace segcomp;

namespace {

FeatureGrid random_features(int h, int w, int d, uint64_t seed) {
    Rng rng(seed);
    FeatureGrid f(h, w, d);
    for (double& x : f.v) x = rng.next_gaussian();
    return f;
}

}  // namespace

TEST_CASE("zero model: logits zero, beta = sigmoid(0) = 0.5") {
    SegModel m = SegModel::zeros({4, 6, 3});
    const FeatureGrid f = random_features(5, 7, 4, 1);
    const ForwardResult r = forward(m, f, Mode::eval);
    for (double l : r.logits.v) CHECK(l == 0.0);
    for (double b : r.beta.v) CHECK(b == doctest::Approx(0.5).epsilon(1e-12));
    // train mode: batch statistics of a constant zero input are zero too
    const ForwardResult rt = forward(m, f, Mode::train);
    for (double b : rt.beta.v) CHECK(b == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("eval mode is deterministic") {
    SegModel m = SegModel::init({5, 8, 4}, 11);
    const FeatureGrid f = random_features(6, 6, 5, 2);
    const ForwardResult a = forward(m, f, Mode::eval);
    const ForwardResult b = forward(m, f, Mode::eval);
    CHECK(a.logits.v == b.logits.v);
    CHECK(a.beta.v == b.beta.v);
    CHECK(a.hidden.v == b.hidden.v);
}

TEST_CASE("init is seeded and reproducible") {
    SegModel a = SegModel::init({5, 8, 4}, 11);
    SegModel b = SegModel::init({5, 8, 4}, 11);
    SegModel c = SegModel::init({5, 8, 4}, 12);
    CHECK(a.conv2_w.v == b.conv2_w.v);
    CHECK(a.conv2_w.v != c.conv2_w.v);
    for (auto& [name, p] : a.params())
        for (double x : p->v) CHECK(std::isfinite(x));
}

TEST_CASE("dropout 0 in train mode matches eval trunk; beta matches with frozen stats") {
    SegModel m = SegModel::init({5, 8, 4}, 21);
    m.bn_momentum = 1.0;  // one train pass copies batch stats into running stats
    const FeatureGrid f = random_features(7, 5, 5, 3);
    const ForwardResult tr = forward(m, f, Mode::train);
    const ForwardResult ev = forward(m, f, Mode::eval);
    CHECK(tr.logits.v == ev.logits.v);
    CHECK(tr.hidden.v == ev.hidden.v);
    CHECK(tr.beta.v == ev.beta.v);  // running stats == batch stats bit-for-bit
}

TEST_CASE("train-mode dropout needs an rng and masks activations") {
    SegModel m = SegModel::init({4, 6, 3}, 5, 0.5);
    const FeatureGrid f = random_features(6, 6, 4, 4);
    CHECK_THROWS_AS(forward(m, f, Mode::train, nullptr), ConfigError);
    Rng r1(9), r2(9), r3(10);
    const ForwardResult a = forward(m, f, Mode::train, &r1);
    const ForwardResult b = forward(m, f, Mode::train, &r2);
    const ForwardResult c = forward(m, f, Mode::train, &r3);
    CHECK(a.logits.v == b.logits.v);   // same mask stream
    CHECK(a.logits.v != c.logits.v);   // different masks
    const ForwardResult ev = forward(m, f, Mode::eval);
    CHECK(a.logits.v != ev.logits.v);
}

TEST_CASE("batchnorm normalizes with batch statistics in train mode") {
    SegModel m = SegModel::init({5, 8, 4}, 31);
    const FeatureGrid f = random_features(9, 9, 5, 6);
    ForwardCache cache;
    FwdOpts opts;
    opts.batch_stats = true;
    forward_ex(m, f, opts, &cache);
    const size_t n = cache.bn_xhat.pixels();
    for (int ch = 0; ch < kBranchWidth; ++ch) {
        double mean = 0.0, var = 0.0;
        for (size_t p = 0; p < n; ++p) mean += cache.bn_xhat.v[p * kBranchWidth + ch];
        mean /= static_cast<double>(n);
        for (size_t p = 0; p < n; ++p) {
            const double d = cache.bn_xhat.v[p * kBranchWidth + ch] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        CHECK(std::abs(mean) < 1e-5);
        // with eps accounted, Var(xhat) = v / (v + eps)
        const double expected = cache.bn_var[ch] / (cache.bn_var[ch] + m.bn_eps);
        CHECK(std::abs(var - expected) < 1e-9);
    }
}

TEST_CASE("beta stays strictly inside (0,1)") {
    SegModel m = SegModel::init({5, 8, 4}, 41);
    const FeatureGrid f = random_features(8, 8, 5, 7);
    const ForwardResult r = forward(m, f, Mode::eval);
    for (double b : r.beta.v) {
        CHECK(b > 0.0);
        CHECK(b < 1.0);
    }
}

TEST_CASE("forward rejects mismatched feature dimensions") {
    SegModel m = SegModel::init({5, 8, 4}, 51);
    const FeatureGrid f = random_features(4, 4, 3, 8);
    CHECK_THROWS_AS(forward(m, f, Mode::eval), DataError);
}

TEST_CASE("check_finite names the offending group") {
    SegModel m = SegModel::init({4, 6, 3}, 61);
    m.conv2_w.v[5] = std::nan("");
    try {
        m.check_finite("test");
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("conv2.w") != std::string::npos);
    }
}

TEST_CASE("checkpoint round trip") {
    SegModel m = SegModel::init({5, 8, 4}, 71, 0.25);
    m.bn_rmean[3] = 0.75;  // make buffers non-trivial
    CompensationMatrix comp = CompensationMatrix::zeros(4, CompMode::symmetric);
    comp.p.v[0] = -1.5;
    comp.p.v[4] = 2.25;

    const std::filesystem::path file =
        std::filesystem::temp_directory_path() / "segcomp_test_ckpt.bin";
    save_checkpoint(file, m, &comp);
    const Checkpoint back = load_checkpoint(file);
    CHECK(back.model.dims.in_dim == 5);
    CHECK(back.model.dims.hidden == 8);
    CHECK(back.model.dims.num_classes == 4);
    CHECK(back.model.dropout_rate == 0.25);
    CHECK(back.model.conv1_w.v == m.conv1_w.v);
    CHECK(back.model.conv2_w.v == m.conv2_w.v);
    CHECK(back.model.bn_rmean == m.bn_rmean);
    REQUIRE(back.comp.has_value());
    CHECK(back.comp->mode == CompMode::symmetric);
    CHECK(back.comp->p.v == comp.p.v);

    SUBCASE("model-only checkpoint") {
        save_checkpoint(file, m, nullptr);
        const Checkpoint solo = load_checkpoint(file);
        CHECK_FALSE(solo.comp.has_value());
        CHECK(solo.model.head_w.v == m.head_w.v);
    }
    SUBCASE("bad magic") {
        std::ofstream(file, std::ios::binary) << "NOPE\n{}\n";
        CHECK_THROWS_AS(load_checkpoint(file), DataError);
    }
    SUBCASE("truncation") {
        save_checkpoint(file, m, &comp);
        std::filesystem::resize_file(file, std::filesystem::file_size(file) - 16);
        CHECK_THROWS_AS(load_checkpoint(file), DataError);
    }
    std::filesystem::remove(file);
}
