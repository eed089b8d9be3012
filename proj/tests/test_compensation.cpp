#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "segcomp/compensation.hpp"
#include "segcomp/error.hpp"
#include "segcomp/rng.hpp"

using namespace segcomp;

namespace {

std::vector<double> mat(const CompensationMatrix& c) { return c.materialize(); }

}  // namespace

TEST_CASE("materialize: zero parameters give the zero matrix") {
    for (CompMode mode : {CompMode::free, CompMode::symmetric, CompMode::unconstrained}) {
        const CompensationMatrix c = CompensationMatrix::zeros(4, mode);
        for (double x : mat(c)) CHECK(x == 0.0);
    }
}

TEST_CASE("materialize: symmetric mode mirrors the upper triangle") {
    CompensationMatrix c = CompensationMatrix::zeros(2, CompMode::symmetric);
    c.p.v[c.tri_index(0, 1)] = -2.0;
    const auto m = mat(c);
    CHECK(m[0 * 2 + 1] == -2.0);
    CHECK(m[1 * 2 + 0] == -2.0);
    CHECK(m[0 * 2 + 0] == 0.0);
    CHECK(m[1 * 2 + 1] == 0.0);

    CompensationMatrix big = CompensationMatrix::zeros(5, CompMode::symmetric);
    Rng rng(3);
    for (double& x : big.p.v) x = rng.next_gaussian();
    const auto bm = mat(big);
    for (int i = 0; i < 5; ++i) {
        CHECK(bm[i * 5 + i] == 0.0);
        for (int j = 0; j < 5; ++j) CHECK(bm[i * 5 + j] == bm[j * 5 + i]);
    }
}

TEST_CASE("materialize: free mode masks the diagonal, unconstrained keeps it") {
    CompensationMatrix c = CompensationMatrix::zeros(3, CompMode::free);
    for (size_t i = 0; i < c.p.v.size(); ++i) c.p.v[i] = static_cast<double>(i + 1);
    const auto m = mat(c);
    for (int i = 0; i < 3; ++i) CHECK(m[i * 3 + i] == 0.0);
    CHECK(m[0 * 3 + 1] == 2.0);

    CompensationMatrix u = CompensationMatrix::zeros(3, CompMode::unconstrained);
    for (size_t i = 0; i < u.p.v.size(); ++i) u.p.v[i] = static_cast<double>(i + 1);
    const auto um = mat(u);
    CHECK(um[0] == 1.0);
    CHECK(um[4] == 5.0);
}

TEST_CASE("symmetric gradient accumulation sums both mirrored positions") {
    CompensationMatrix c = CompensationMatrix::zeros(3, CompMode::symmetric);
    std::vector<double> d(9, 0.0);
    d[0 * 3 + 1] = 0.25;
    d[1 * 3 + 0] = 0.5;
    d[1 * 3 + 1] = 99.0;  // diagonal gradient must be dropped
    c.accumulate_grad(d);
    CHECK(c.p.g[c.tri_index(0, 1)] == doctest::Approx(0.75));
    for (size_t i = 0; i < c.p.g.size(); ++i)
        if (i != c.tri_index(0, 1)) CHECK(c.p.g[i] == 0.0);
}

TEST_CASE("plain probabilities: worked values") {
    const auto symmetric = plain_probabilities(std::vector<double>{0.0, 0.0});
    CHECK(symmetric[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(symmetric[1] == doctest::Approx(0.5).epsilon(1e-12));

    const auto large = plain_probabilities(std::vector<double>{1000.0, 0.0});
    CHECK(std::isfinite(large[0]));
    CHECK(large[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(large[1] == doctest::Approx(0.0).epsilon(1e-12));

    // frozen from a 30-digit evaluation of e^1/(e^1+e^-1)
    const auto p = plain_probabilities(std::vector<double>{1.0, -1.0});
    CHECK(p[0] == doctest::Approx(0.88079707797788244).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.11920292202211756).epsilon(1e-14));
}

TEST_CASE("plain probabilities: sums to one, rejects non-finite input") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> l(5);
        for (double& x : l) x = 40.0 * rng.next_gaussian();
        const auto p = plain_probabilities(l);
        double sum = 0.0;
        for (double x : p) {
            CHECK(x > 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    CHECK_THROWS_AS(
        plain_probabilities(std::vector<double>{1.0, std::nan("")}), NumericError);
    CHECK_THROWS_AS(
        plain_probabilities(std::vector<double>{
            1.0, std::numeric_limits<double>::infinity()}),
        NumericError);
}

TEST_CASE("compensated probabilities reduce bit-exactly to plain") {
    Rng rng(23);
    std::vector<double> l{0.3, -1.2, 0.8};
    const std::vector<double> zero(9, 0.0);
    std::vector<double> b(9);
    for (double& x : b) x = rng.next_gaussian();

    const auto plain = plain_probabilities(l);
    for (int gt = 0; gt < 3; ++gt) {
        const auto with_zero_b = compensated_probabilities(l, zero, 3, 0.7, gt);
        CHECK(with_zero_b == plain);  // bitwise
        const auto with_zero_beta = compensated_probabilities(l, b, 3, 0.0, gt);
        CHECK(with_zero_beta == plain);
    }
}

TEST_CASE("compensated probabilities: worked K=2 example") {
    // gt = 1, column (-1, 0): z = (-1, 0)
    const std::vector<double> b{0.0, -1.0, 0.0, 0.0};  // B[0][1] = -1
    const auto p = compensated_probabilities(std::vector<double>{0.0, 0.0}, b, 2, 1.0, 1);
    CHECK(p[0] == doctest::Approx(0.26894142136999512).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(0.73105857863000488).epsilon(1e-14));
    CHECK_THROWS_AS(
        compensated_probabilities(std::vector<double>{0.0, 0.0}, b, 2, 1.0, 2), DataError);
}

TEST_CASE("compensated probabilities: shift invariance and monotone compensation") {
    Rng rng(29);
    std::vector<double> b(16);
    for (double& x : b) x = rng.next_gaussian();
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> l(4);
        for (double& x : l) x = 3.0 * rng.next_gaussian();
        const double beta = rng.next_double();
        const int gt = rng.next_int(4);
        const auto base = compensated_probabilities(l, b, 4, beta, gt);

        std::vector<double> shifted = l;
        const double c = 5.0 * rng.next_gaussian();
        for (double& x : shifted) x += c;
        const auto sp = compensated_probabilities(shifted, b, 4, beta, gt);
        for (int i = 0; i < 4; ++i) CHECK(std::abs(sp[i] - base[i]) <= 1e-9);

        // lowering B[i][gt] strictly lowers class i's probability (beta > 0)
        const int i = rng.next_int(4);
        std::vector<double> lowered = b;
        lowered[i * 4 + gt] -= 1.0;
        const auto lp = compensated_probabilities(l, lowered, 4, std::max(beta, 0.1), gt);
        const auto bp = compensated_probabilities(l, b, 4, std::max(beta, 0.1), gt);
        CHECK(lp[i] < bp[i]);
    }
}

TEST_CASE("argmax under zero compensation equals plain argmax exactly") {
    Rng rng(31);
    const std::vector<double> zero(25, 0.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> l(5);
        for (double& x : l) x = 10.0 * rng.next_gaussian();
        const auto a = plain_probabilities(l);
        const auto b = compensated_probabilities(l, zero, 5, rng.next_double(), trial % 5);
        CHECK(std::distance(a.begin(), std::max_element(a.begin(), a.end())) ==
              std::distance(b.begin(), std::max_element(b.begin(), b.end())));
    }
}

TEST_CASE("training loss: single-pixel worked examples") {
    LogitGrid logits(1, 1, 2);
    BetaGrid betas(1, 1, 0.5);
    LabelGrid labels(1, 1, 0);

    SUBCASE("B = 0: total is -log 0.5, lasso 0") {
        const CompensationMatrix c = CompensationMatrix::zeros(2, CompMode::free);
        const LossBreakdown lb = training_loss(logits, betas, labels, c, 0.01);
        CHECK(lb.total == doctest::Approx(0.69314718055994531).epsilon(1e-14));
        CHECK(lb.lasso == 0.0);
        CHECK(lb.cross_entropy == lb.total);
    }
    SUBCASE("alpha = 0 disables the penalty") {
        CompensationMatrix c = CompensationMatrix::zeros(2, CompMode::free);
        c.p.v[1] = -2.0;
        const LossBreakdown lb = training_loss(logits, betas, labels, c, 0.0);
        CHECK(lb.lasso == 0.0);
        CHECK(lb.total == lb.cross_entropy);
    }
    SUBCASE("lasso: gt column |B| sum 3, beta 0.5, alpha 0.01, K 2 -> 0.0075") {
        CompensationMatrix c = CompensationMatrix::zeros(2, CompMode::unconstrained);
        c.p.v[0 * 2 + 0] = 1.0;   // column 0 entries
        c.p.v[1 * 2 + 0] = -2.0;  // |1| + |-2| = 3
        const LossBreakdown lb = training_loss(logits, betas, labels, c, 0.01);
        CHECK(lb.lasso == doctest::Approx(0.01 / 2.0 * 0.5 * 3.0).epsilon(1e-12));
        CHECK(lb.total == doctest::Approx(lb.cross_entropy + lb.lasso).epsilon(1e-12));
    }
}

TEST_CASE("training loss: error paths") {
    LogitGrid logits(1, 2, 3);
    BetaGrid betas(1, 2, 0.5);
    LabelGrid labels(1, 2, 0);
    const CompensationMatrix c = CompensationMatrix::zeros(3, CompMode::free);

    labels.v[1] = 3;  // out of range
    CHECK_THROWS_AS(training_loss(logits, betas, labels, c, 0.01), DataError);
    labels.v[1] = 0;
    logits.v[2] = std::nan("");
    CHECK_THROWS_AS(training_loss(logits, betas, labels, c, 0.01), NumericError);
    logits.v[2] = 0.0;
    CHECK_THROWS_AS(training_loss(logits, betas, labels, c, -1.0), ConfigError);
}

TEST_CASE("training loss total decomposes exactly") {
    Rng rng(37);
    LogitGrid logits(4, 4, 3);
    for (double& x : logits.v) x = rng.next_gaussian();
    BetaGrid betas(4, 4);
    for (double& x : betas.v) x = rng.next_double();
    LabelGrid labels(4, 4);
    for (int& v : labels.v) v = rng.next_int(3);
    CompensationMatrix c = CompensationMatrix::zeros(3, CompMode::free);
    for (double& x : c.p.v) x = rng.next_gaussian();

    const LossBreakdown lb = training_loss(logits, betas, labels, c, 0.05);
    CHECK(lb.total ==
          doctest::Approx(lb.cross_entropy + lb.lasso).epsilon(1e-12));
    CHECK(lb.alpha == 0.05);
}

TEST_CASE("training_loss_backward matches finite differences on B parameters") {
    // direct check on the loss head alone (the full-model audit lives in the
    // trainer tests); away from |B| = 0 kinks
    Rng rng(41);
    LogitGrid logits(3, 3, 3);
    for (double& x : logits.v) x = rng.next_gaussian();
    BetaGrid betas(3, 3);
    for (double& x : betas.v) x = 0.2 + 0.6 * rng.next_double();
    LabelGrid labels(3, 3);
    for (int& v : labels.v) v = rng.next_int(3);

    for (CompMode mode : {CompMode::free, CompMode::symmetric}) {
        CAPTURE(comp_mode_name(mode));
        CompensationMatrix c = CompensationMatrix::zeros(3, mode);
        for (double& x : c.p.v) x = rng.next_gaussian() + 0.3;

        const double alpha = 0.02;
        auto loss_at = [&]() {
            return training_loss(logits, betas, labels, c.materialize(), 3, alpha).total;
        };
        c.zero_grad();
        Grid3 dl(3, 3, 3);
        Grid2 db(3, 3);
        std::vector<double> d_mat(9, 0.0);
        training_loss_backward(logits, betas, labels, c.materialize(), 3, alpha, 1.0, dl, db,
                               d_mat);
        c.accumulate_grad(d_mat);

        for (size_t i = 0; i < c.p.v.size(); ++i) {
            const double orig = c.p.v[i];
            const double h = 1e-5 * std::max(1.0, std::abs(orig));
            c.p.v[i] = orig + h;
            const double lp = loss_at();
            c.p.v[i] = orig - h;
            const double lm = loss_at();
            c.p.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            CHECK(c.p.g[i] == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("compensation CSV export: class-name layout and 6 significant digits") {
    CompensationMatrix c = CompensationMatrix::zeros(2, CompMode::free);
    c.p.v[0 * 2 + 1] = -1.23456789;
    c.p.v[1 * 2 + 0] = 0.5;
    const std::filesystem::path file =
        std::filesystem::temp_directory_path() / "segcomp_test_comp.csv";
    write_compensation_csv(file, c, {"road", "sidewalk"});
    std::ifstream in(file);
    std::string l0, l1, l2;
    std::getline(in, l0);
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(l0 == "B_ij,road,sidewalk");
    CHECK(l1 == "road,0,-1.23457");
    CHECK(l2 == "sidewalk,0.5,0");
    std::filesystem::remove(file);
}
