#include "caspian/metrics.hpp"

#include <cmath>

#include "caspian/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace caspian;

namespace {

Mask3D empty_mask(int64_t h, int64_t w, int64_t d) {
    Mask3D m;
    m.h = h;
    m.w = w;
    m.d = d;
    m.v.assign(h * w * d, 0);
    return m;
}

Mask3D random_mask(int64_t h, int64_t w, int64_t d, double fill, Rng& rng) {
    Mask3D m = empty_mask(h, w, d);
    for (auto& x : m.v) x = rng.uniform() < fill ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("dice_score") {
    Rng rng(41);
    auto a = random_mask(8, 8, 8, 0.2, rng);
    CHECK(dice_score(a, a) == 1.0);

    auto b = empty_mask(8, 8, 8);
    auto c = empty_mask(8, 8, 8);
    b.v[0] = 1;
    c.v[511] = 1;
    CHECK(dice_score(b, c) == 0.0);           // disjoint nonempty
    CHECK(dice_score(b, empty_mask(8, 8, 8)) == 0.0);  // one empty
    CHECK(dice_score(empty_mask(8, 8, 8), empty_mask(8, 8, 8)) == 1.0);

    // |a| = 4, |b| = 4, overlap 2 on the 8^3 grid.
    auto x = empty_mask(8, 8, 8);
    auto y = empty_mask(8, 8, 8);
    for (int i : {10, 11, 12, 13}) x.v[i] = 1;
    for (int i : {12, 13, 14, 15}) y.v[i] = 1;
    CHECK(dice_score(x, y) == 0.5);
    CHECK(dice_score(x, y) == dice_score(y, x));

    CHECK_THROWS(dice_score(x, empty_mask(4, 4, 4)));
}

TEST_CASE("hd95 basics") {
    Rng rng(43);
    auto a = random_mask(8, 8, 8, 0.3, rng);
    CHECK(hd95(a, a) == 0.0);

    // Two single voxels: singleton surfaces at the exact Euclidean distance.
    auto p = empty_mask(9, 9, 9);
    auto q = empty_mask(9, 9, 9);
    p.v[(4 * 9 + 4) * 9 + 1] = 1;
    q.v[(4 * 9 + 4) * 9 + 6] = 1;
    CHECK(hd95(p, q) == doctest::Approx(5.0).epsilon(1e-12));

    // Anisotropic spacing scales the axis.
    CHECK(hd95(p, q, {1.0, 1.0, 2.0}) == doctest::Approx(10.0).epsilon(1e-12));

    // Empty-vs-nonempty: the volume diagonal sentinel.
    const double diag = std::sqrt(3.0 * 8.0 * 8.0);
    CHECK(hd95(p, empty_mask(9, 9, 9)) == doctest::Approx(diag).epsilon(1e-12));
    CHECK(hd95(empty_mask(9, 9, 9), empty_mask(9, 9, 9)) == 0.0);
}

TEST_CASE("hd95 matches the all-pairs brute-force oracle on random pairs") {
    Rng rng(47);
    for (int trial = 0; trial < 12; ++trial) {
        auto a = random_mask(8, 8, 8, 0.1 + 0.05 * (trial % 4), rng);
        auto b = random_mask(8, 8, 8, 0.15, rng);
        const std::array<double, 3> spacing = trial % 2 ? std::array<double, 3>{1.0, 1.0, 1.0}
                                                        : std::array<double, 3>{0.5, 1.0, 1.5};
        const double got = hd95(a, b, spacing);
        const double want =
            oracle::hd95(a.v, b.v, 8, 8, 8, spacing[0], spacing[1], spacing[2]);
        CHECK(std::abs(got - want) < 1e-9);
        CHECK(hd95(b, a, spacing) == got);  // symmetry
    }
}

TEST_CASE("hd95 is translation invariant") {
    auto blob_at = [](int64_t h0, int64_t w0, int64_t d0) {
        auto m = empty_mask(12, 12, 12);
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t w = 0; w < 3; ++w)
                for (int64_t d = 0; d < 2; ++d) m.v[((h0 + h) * 12 + w0 + w) * 12 + d0 + d] = 1;
        return m;
    };
    const double base = hd95(blob_at(2, 2, 2), blob_at(4, 5, 3));
    const double shifted = hd95(blob_at(5, 4, 6), blob_at(7, 7, 7));
    CHECK(base == doctest::Approx(shifted).epsilon(1e-12));
}

TEST_CASE("sensitivity and specificity") {
    Rng rng(53);
    auto g = random_mask(4, 4, 4, 0.4, rng);
    auto [sens, spec] = sensitivity_specificity(g, g);
    CHECK(sens == 1.0);
    CHECK(spec == 1.0);

    auto none = empty_mask(4, 4, 4);
    auto [s2, sp2] = sensitivity_specificity(g, none);
    CHECK(s2 == 0.0);
    CHECK(sp2 == 1.0);

    // Hand-tallied 4^3 case: predictions shifted by one voxel along d.
    auto truth = empty_mask(4, 4, 4);
    auto pred = empty_mask(4, 4, 4);
    for (int i : {0, 1, 2, 21, 22}) truth.v[i] = 1;
    for (int i : {1, 2, 3, 22, 40}) pred.v[i] = 1;
    // TP = {1,2,22} -> 3; FN = {0,21} -> 2; FP = {3,40} -> 2; TN = 64-3-2-2 = 57.
    auto [s3, sp3] = sensitivity_specificity(truth, pred);
    CHECK(s3 == doctest::Approx(3.0 / 5.0).epsilon(1e-15));
    CHECK(sp3 == doctest::Approx(57.0 / 59.0).epsilon(1e-15));
}

TEST_CASE("wilcoxon signed-rank") {
    SUBCASE("uniform positive shift on 20 pairs is decisively significant") {
        std::vector<double> x(20), y(20);
        Rng rng(59);
        for (int i = 0; i < 20; ++i) {
            x[i] = rng.uniform(0, 1);
            y[i] = x[i] + 0.25;
        }
        auto r = wilcoxon_signed_rank(x, y);
        CHECK(r.n == 20);
        CHECK(r.statistic == 20.0 * 21.0 / 2.0);  // all ranks positive
        CHECK(r.p_value < 0.001);
    }

    SUBCASE("identical samples leave no nonzero pairs") {
        std::vector<double> x{1, 2, 3, 4, 5, 6, 7};
        CHECK_THROWS(wilcoxon_signed_rank(x, x));
    }

    SUBCASE("statistic agrees with the exact-enumeration oracle on a 10-pair set") {
        // Paired readings with ties in |difference| and one zero difference.
        const std::vector<double> x{125, 115, 130, 140, 140, 115, 140, 125, 140, 135};
        const std::vector<double> y{110, 122, 125, 120, 140, 124, 123, 137, 135, 145};
        auto r = wilcoxon_signed_rank(x, y);
        auto [w_oracle, p_exact] = oracle::wilcoxon_exact(x, y);
        CHECK(r.n == 9);
        CHECK(std::abs(r.statistic - w_oracle) < 1e-6);
        // The normal approximation should sit close to the exact distribution.
        CHECK(std::abs(r.p_value - p_exact) < 0.05);
    }

    SUBCASE("fewer than 6 nonzero pairs is an error") {
        std::vector<double> x{1, 2, 3, 4, 5};
        std::vector<double> y{2, 3, 4, 5, 6};
        CHECK_THROWS(wilcoxon_signed_rank(x, y));
    }
}

TEST_CASE("eval record formatting") {
    RegionMetrics m;
    m.dice = 0.5;
    m.hd95 = 1.25;
    m.sensitivity = 1.0;
    m.specificity = 0.987654321;
    CHECK(format_eval_line("case-007", "WT", m) ==
          "case-007,WT,0.500000,1.250000,1.000000,0.987654");
}
