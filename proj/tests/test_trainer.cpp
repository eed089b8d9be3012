#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "segcomp/error.hpp"
#include "segcomp/synthgrid.hpp"
#include "segcomp/trainer.hpp"

using namespace segcomp;

namespace {

Dataset tiny_dataset(int images, int h, int w, int d, int k, uint64_t seed,
                     double noise = 0.4) {
    SceneConfig cfg;
    cfg.height = h;
    cfg.width = w;
    cfg.feature_dim = d;
    cfg.num_classes = k;
    cfg.num_regions = k + 1;
    cfg.noise_std = noise;
    cfg.boundary_mix_width = 1;
    cfg.seed = seed;
    if (k >= 2) cfg.ambiguous_pairs = {{{0, 1}, 0.9}};
    return generate_dataset(cfg, images);
}

Dataset separable_dataset(int images, uint64_t seed) {
    SceneConfig cfg;
    cfg.height = 12;
    cfg.width = 12;
    cfg.feature_dim = 4;
    cfg.num_classes = 2;
    cfg.num_regions = 4;
    cfg.noise_std = 0.05;  // orthogonal prototypes, little noise
    cfg.boundary_mix_width = 0;
    cfg.seed = seed;
    return generate_dataset(cfg, images);
}

TrainConfig quick_cfg(int steps, uint64_t seed) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg.lr = 0.05;
    cfg.momentum = 0.9;
    cfg.poly_decay_power = 0.9;
    cfg.alpha = 0.01;
    cfg.seed = seed;
    return cfg;
}

// test-side logistic regression on raw pixel features; independent oracle
// for the separable-dataset threshold
double logistic_regression_ce(const Dataset& ds, int steps, double lr) {
    const int d = ds.features[0].c;
    std::vector<double> w(d, 0.0);
    double b = 0.0;
    auto ce_and_grad = [&](std::vector<double>* gw, double* gb) {
        double ce = 0.0;
        size_t n = 0;
        if (gw) std::fill(gw->begin(), gw->end(), 0.0);
        if (gb) *gb = 0.0;
        for (size_t img = 0; img < ds.size(); ++img) {
            const auto& f = ds.features[img];
            for (size_t p = 0; p < f.pixels(); ++p) {
                const double* x = f.v.data() + p * d;
                double z = b;
                for (int i = 0; i < d; ++i) z += w[i] * x[i];
                const double prob = 1.0 / (1.0 + std::exp(-z));
                const int y = ds.labels[img].v[p];
                ce += y == 1 ? -std::log(std::max(prob, 1e-300))
                             : -std::log(std::max(1.0 - prob, 1e-300));
                if (gw) {
                    const double dz = prob - y;
                    for (int i = 0; i < d; ++i) (*gw)[i] += dz * x[i];
                    *gb += dz;
                }
                ++n;
            }
        }
        if (gw)
            for (int i = 0; i < d; ++i) (*gw)[i] /= static_cast<double>(n);
        if (gb) *gb /= static_cast<double>(n);
        return ce / static_cast<double>(n);
    };
    std::vector<double> gw(d);
    double gb;
    for (int s = 0; s < steps; ++s) {
        ce_and_grad(&gw, &gb);
        for (int i = 0; i < d; ++i) w[i] -= lr * gw[i];
        b -= lr * gb;
    }
    return ce_and_grad(nullptr, nullptr);
}

}  // namespace

TEST_CASE("poly learning-rate schedule") {
    CHECK(poly_lr(0.05, 0, 100, 0.9) == doctest::Approx(0.05));
    CHECK(poly_lr(0.05, 50, 100, 0.9) ==
          doctest::Approx(0.05 * std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(poly_lr(0.05, 50, 100, 0.0) == 0.05);  // decay disabled
    CHECK(poly_lr(0.1, 99, 100, 1.0) == doctest::Approx(0.001).epsilon(1e-9));
}

TEST_CASE("finite-difference audit passes for every loss kind") {
    const Dataset ds = tiny_dataset(1, 6, 6, 4, 4, 1001);
    GradCheckConfig gc;
    gc.tolerance = 1e-4;

    SUBCASE("plain cross-entropy") {
        SegModel model = SegModel::init({4, 6, 4}, 7);
        gc.kind = LossKind::plain;
        const FdReport r = finite_difference_check(model, nullptr, nullptr, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
    SUBCASE("compensated, free B with lasso") {
        SegModel model = SegModel::init({4, 6, 4}, 8);
        CompensationMatrix comp = CompensationMatrix::zeros(4, CompMode::free);
        Rng rng(5);
        for (double& x : comp.p.v) x = 0.5 * rng.next_gaussian() + 0.2;
        gc.kind = LossKind::compensated;
        gc.alpha = 0.05;
        const FdReport r = finite_difference_check(model, &comp, nullptr, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
    SUBCASE("compensated, symmetric B") {
        SegModel model = SegModel::init({4, 6, 4}, 9);
        CompensationMatrix comp = CompensationMatrix::zeros(4, CompMode::symmetric);
        Rng rng(6);
        for (double& x : comp.p.v) x = 0.5 * rng.next_gaussian() - 0.3;
        gc.kind = LossKind::compensated;
        gc.alpha = 0.02;
        const FdReport r = finite_difference_check(model, &comp, nullptr, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
    SUBCASE("alpha = 0 with zero B reduces to plain gradients and still passes") {
        SegModel model = SegModel::init({4, 6, 4}, 10);
        CompensationMatrix comp = CompensationMatrix::zeros(4, CompMode::free);
        gc.kind = LossKind::compensated;
        gc.alpha = 0.0;
        const FdReport r = finite_difference_check(model, &comp, nullptr, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
    SUBCASE("s-model head") {
        SegModel model = SegModel::init({4, 6, 4}, 11);
        TransitionHead head = TransitionHead::make_s_model(4);
        gc.kind = LossKind::s_model;
        const FdReport r = finite_difference_check(model, nullptr, &head, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
    SUBCASE("c-model head") {
        SegModel model = SegModel::init({4, 6, 4}, 12);
        TransitionHead head = TransitionHead::make_c_model(4, 6, 13);
        gc.kind = LossKind::c_model;
        const FdReport r = finite_difference_check(model, nullptr, &head, ds, gc);
        CAPTURE(r.worst_param);
        CHECK(r.pass);
    }
}

TEST_CASE("finite-difference audit: corrupted gradient fails and is named") {
    const Dataset ds = tiny_dataset(1, 6, 6, 4, 4, 1002);
    SegModel model = SegModel::init({4, 6, 4}, 14);
    GradCheckConfig gc;
    gc.kind = LossKind::plain;
    const GradTamper tamper{"conv2.w", 17, 0.5};
    const FdReport r = finite_difference_check(model, nullptr, nullptr, ds, gc, &tamper);
    CHECK_FALSE(r.pass);
    CHECK(r.worst_param == "conv2.w[17]");
    REQUIRE_FALSE(r.offenders.empty());
    CHECK(r.offenders[0].param == "conv2.w[17]");
}

TEST_CASE("gradient identities") {
    const Dataset ds = tiny_dataset(1, 5, 5, 4, 3, 1003);

    SUBCASE("plain CE head-bias gradient equals mean(p - onehot)") {
        // head bias adds straight onto the logits, so its gradient is the
        // pixel mean of (p - onehot)
        SegModel model = SegModel::init({4, 6, 3}, 15);
        LossSpec spec;
        spec.kind = LossKind::plain;
        compute_batch_gradients(model, nullptr, nullptr, ds, spec);

        ForwardResult fr = forward(model, ds.features[0], Mode::train);
        const int k = 3;
        std::vector<double> expected(k, 0.0);
        const size_t n = fr.logits.pixels();
        for (size_t p = 0; p < n; ++p) {
            const auto probs = plain_probabilities(
                std::span<const double>(fr.logits.v.data() + p * k, k));
            for (int i = 0; i < k; ++i)
                expected[i] += probs[i] - (ds.labels[0].v[p] == i ? 1.0 : 0.0);
        }
        for (int i = 0; i < k; ++i)
            CHECK(model.head_b.g[i] ==
                  doctest::Approx(expected[i] / static_cast<double>(n)).epsilon(1e-10));
    }
    SUBCASE("parameters without influence get exactly zero gradient") {
        SegModel model = SegModel::init({4, 6, 3}, 16);
        CompensationMatrix comp = CompensationMatrix::zeros(3, CompMode::free);
        LossSpec spec;
        spec.kind = LossKind::plain;  // branch and B take no part
        compute_batch_gradients(model, &comp, nullptr, ds, spec);
        for (double g : comp.p.g) CHECK(g == 0.0);
        for (double g : model.br1_w.g) CHECK(g == 0.0);
        for (double g : model.bn_gamma.g) CHECK(g == 0.0);
        for (double g : model.br2_w.g) CHECK(g == 0.0);
    }
    SUBCASE("compensated loss with zero B sends zero gradient to beta branch") {
        SegModel model = SegModel::init({4, 6, 3}, 17);
        CompensationMatrix comp = CompensationMatrix::zeros(3, CompMode::free);
        LossSpec spec;
        spec.kind = LossKind::compensated;
        spec.alpha = 0.01;
        compute_batch_gradients(model, &comp, nullptr, ds, spec);
        for (double g : model.br2_w.g) CHECK(g == 0.0);
        // trunk gradients match the plain loss bit for bit
        std::vector<double> comp_grad = model.conv1_w.g;
        LossSpec plain;
        plain.kind = LossKind::plain;
        compute_batch_gradients(model, nullptr, nullptr, ds, plain);
        CHECK(comp_grad == model.conv1_w.g);
    }
}

TEST_CASE("training is deterministic given the config seed") {
    const Dataset ds = tiny_dataset(4, 8, 8, 4, 3, 1004);
    const TrainConfig cfg = quick_cfg(60, 5);
    const SegModelDims dims{4, 6, 3};

    TrainedMethod a = train_method(Method::ours, ds, nullptr, cfg, dims);
    TrainedMethod b = train_method(Method::ours, ds, nullptr, cfg, dims);
    CHECK(a.model.conv1_w.v == b.model.conv1_w.v);
    CHECK(a.model.conv2_w.v == b.model.conv2_w.v);
    CHECK(a.model.br2_w.v == b.model.br2_w.v);
    CHECK(a.comp.p.v == b.comp.p.v);
    REQUIRE(a.history.losses.size() == b.history.losses.size());
    for (size_t i = 0; i < a.history.losses.size(); ++i)
        CHECK(a.history.losses[i].total == b.history.losses[i].total);

    TrainedMethod c = train_method(Method::ours, ds, nullptr, quick_cfg(60, 6), dims);
    CHECK(a.comp.p.v != c.comp.p.v);
}

TEST_CASE("disabled compensation: B stays zero, trajectory matches a B-free loop") {
    const Dataset ds = tiny_dataset(4, 8, 8, 4, 3, 1005);
    TrainConfig cfg = quick_cfg(50, 6);
    cfg.batch_size = 2;
    cfg.compensation_enabled = false;
    cfg.loss_kind = LossKind::compensated;
    const SegModelDims dims{4, 6, 3};

    SegModel model = SegModel::init(dims, cfg.seed);
    CompensationMatrix comp = CompensationMatrix::zeros(3, cfg.comp_mode());
    const TrainHistory hist = train(model, comp, nullptr, ds, nullptr, cfg);
    for (double x : comp.p.v) CHECK(x == 0.0);

    // independent reference loop, no compensation matrix anywhere: replays
    // the documented batch protocol with its own SGD bookkeeping
    SegModel ref = SegModel::init(dims, cfg.seed);
    Rng batch_rng(derive_seed(cfg.seed, kBatchStreamTag));
    std::vector<ParamRef> refs = ref.params();
    std::vector<std::vector<double>> vel(refs.size());
    for (size_t i = 0; i < refs.size(); ++i) vel[i].assign(refs[i].second->size(), 0.0);
    std::vector<double> totals;
    for (int step = 0; step < cfg.steps; ++step) {
        Dataset batch;
        batch.num_classes = ds.num_classes;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const size_t idx = batch_rng.next_below(ds.size());
            batch.features.push_back(ds.features[idx]);
            batch.labels.push_back(ds.labels[idx]);
        }
        LossSpec spec;
        spec.kind = LossKind::plain;
        const LossBreakdown lb = compute_batch_gradients(ref, nullptr, nullptr, batch, spec);
        totals.push_back(lb.total);
        const double lr_t = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_decay_power);
        for (size_t i = 0; i < refs.size(); ++i) {
            Param& p = *refs[i].second;
            for (size_t j = 0; j < p.v.size(); ++j) {
                vel[i][j] = cfg.momentum * vel[i][j] + p.g[j];
                p.v[j] -= lr_t * vel[i][j];
            }
        }
    }
    REQUIRE(hist.losses.size() == totals.size());
    for (size_t i = 0; i < totals.size(); ++i) CHECK(hist.losses[i].total == totals[i]);
    CHECK(model.conv2_w.v == ref.conv2_w.v);
    CHECK(model.head_w.v == ref.head_w.v);
}

TEST_CASE("loss at step 0 with zero-initialized B equals the uncompensated loss exactly") {
    const Dataset ds = tiny_dataset(3, 8, 8, 4, 3, 1006);
    TrainConfig cfg = quick_cfg(1, 7);
    const SegModelDims dims{4, 6, 3};
    const TrainedMethod ours = train_method(Method::ours, ds, nullptr, cfg, dims);
    const TrainedMethod base = train_method(Method::baseline, ds, nullptr, cfg, dims);
    CHECK(ours.history.losses[0].lasso == 0.0);
    CHECK(ours.history.losses[0].total == base.history.losses[0].total);
}

TEST_CASE("constraints hold after every step in debug mode, snapshots recorded") {
    const Dataset ds = tiny_dataset(4, 8, 8, 4, 4, 1007);
    TrainConfig cfg = quick_cfg(40, 8);
    cfg.check_invariants = true;
    cfg.eval_every = 20;
    const SegModelDims dims{4, 6, 4};

    const TrainedMethod sym = train_method(Method::ours_sym, ds, &ds, cfg, dims);
    const auto m = sym.comp.materialize();
    bool any_nonzero = false;
    for (int i = 0; i < 4; ++i) {
        CHECK(m[i * 4 + i] == 0.0);
        for (int j = 0; j < 4; ++j) {
            CHECK(m[i * 4 + j] == m[j * 4 + i]);
            any_nonzero = any_nonzero || m[i * 4 + j] != 0.0;
        }
    }
    CHECK(any_nonzero);  // training actually moved B
    REQUIRE(sym.history.snapshots.size() == 2);
    CHECK(sym.history.snapshots[0].step == 20);
    CHECK(sym.history.snapshots[1].step == 40);
    CHECK(sym.history.snapshots[1].miou >= 0.0);
    CHECK(sym.history.snapshots[1].mean_u >= 0.0);
}

TEST_CASE("separable two-class dataset trains below the oracle-validated threshold") {
    const Dataset ds = separable_dataset(4, 1008);
    // independent oracle: logistic regression on the same features clears 0.1
    const double oracle_ce = logistic_regression_ce(ds, 400, 2.0);
    CAPTURE(oracle_ce);
    CHECK(oracle_ce < 0.1);

    TrainConfig cfg = quick_cfg(500, 9);
    cfg.batch_size = 4;
    const TrainedMethod tm =
        train_method(Method::ours, ds, nullptr, cfg, SegModelDims{4, 8, 2});
    CHECK(tm.history.losses.back().cross_entropy < 0.1);
}

TEST_CASE("non-finite loss aborts with the step index") {
    const Dataset ds = tiny_dataset(2, 6, 6, 4, 3, 1009);
    TrainConfig cfg = quick_cfg(5, 10);
    const SegModelDims dims{4, 6, 3};
    SegModel model = SegModel::init(dims, cfg.seed);
    for (double& x : model.conv1_w.v) x = 1e200;  // overflow the forward pass
    CompensationMatrix comp = CompensationMatrix::zeros(3, CompMode::free);
    cfg.loss_kind = LossKind::plain;
    try {
        train(model, comp, nullptr, ds, nullptr, cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = TrainConfig{};
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.steps == 3000);
    CHECK(cfg.batch_size == 8);
    CHECK(cfg.lr == 0.05);
    CHECK(cfg.momentum == 0.9);
    CHECK(cfg.poly_decay_power == 0.9);
    CHECK(cfg.alpha == 0.01);
}

TEST_CASE("history CSV layout") {
    const Dataset ds = tiny_dataset(2, 6, 6, 4, 3, 1010);
    TrainConfig cfg = quick_cfg(3, 11);
    const TrainedMethod tm =
        train_method(Method::ours, ds, nullptr, cfg, SegModelDims{4, 6, 3});
    const std::filesystem::path file =
        std::filesystem::temp_directory_path() / "segcomp_test_hist.csv";
    write_history_csv(file, tm.history);
    std::ifstream in(file);
    std::string header;
    std::getline(in, header);
    CHECK(header == "step,total,ce,lasso,lr");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
    std::filesystem::remove(file);
}
