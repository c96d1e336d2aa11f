#include "caspian/losses.hpp"

#include <cmath>

#include "doctest.h"

using namespace caspian;

namespace {

LabelMap labels_from(std::vector<uint8_t> v, int64_t h, int64_t w, int64_t d) {
    LabelMap l;
    l.h = h;
    l.w = w;
    l.d = d;
    l.values = std::move(v);
    return l;
}

}  // namespace

TEST_CASE("to_regions maps each label to its region triple") {
    auto l = labels_from({0, 1, 2, 4}, 1, 1, 4);
    auto r = to_regions(l);
    CHECK(r.wt.data() == std::vector<double>{0, 1, 1, 1});
    CHECK(r.tc.data() == std::vector<double>{0, 1, 0, 1});
    CHECK(r.et.data() == std::vector<double>{0, 0, 0, 1});
    CHECK(r.wt.shape() == Shape{1, 1, 1, 1, 4});

    CHECK_THROWS(to_regions(labels_from({3}, 1, 1, 1)));
}

TEST_CASE("region nesting holds for random label maps") {
    Rng rng(31);
    const uint8_t palette[4] = {0, 1, 2, 4};
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<uint8_t> v(64);
        for (auto& x : v) x = palette[rng.below(4)];
        auto r = to_regions(labels_from(std::move(v), 4, 4, 4));
        for (int64_t i = 0; i < 64; ++i) {
            CHECK(r.et.data()[i] <= r.tc.data()[i]);
            CHECK(r.tc.data()[i] <= r.wt.data()[i]);
        }
    }
}

TEST_CASE("bce") {
    auto one = Tensor::from_data({1, 1, 1, 1, 1}, {1.0});

    CHECK(bce(one, Tensor::from_data({1, 1, 1, 1, 1}, {50.0})).item() < 1e-20);
    CHECK(bce(one, Tensor::from_data({1, 1, 1, 1, 1}, {0.0})).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // Direct-formula reference on a random small case.
    Rng rng(33);
    auto g = Tensor::uniform({1, 1, 2, 2, 2}, 0, 1, rng);
    for (auto& x : g.mutable_data()) x = x > 0.5 ? 1.0 : 0.0;
    auto z = Tensor::uniform({1, 1, 2, 2, 2}, -3, 3, rng);
    double want = 0.0;
    for (int64_t i = 0; i < 8; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z.data()[i]));
        want += -(g.data()[i] * std::log(p) + (1.0 - g.data()[i]) * std::log(1.0 - p));
    }
    want /= 8.0;
    CHECK(std::abs(bce(g, z).item() - want) < 1e-10);

    CHECK_THROWS(bce(g, Tensor::zeros({1, 1, 2, 2, 1})));

    auto zg = Tensor::uniform({1, 1, 2, 2, 2}, -2, 2, rng, true);
    CHECK(grad_check([&](const Tensor& t) { return bce(g, t); }, zg) < 1e-6);
}

TEST_CASE("dice_loss") {
    Rng rng(35);

    SUBCASE("saturated perfect prediction is near zero") {
        std::vector<double> gv(27, 0.0);
        for (int i : {3, 4, 5, 13}) gv[i] = 1.0;
        auto g = Tensor::from_data({1, 1, 3, 3, 3}, gv);
        std::vector<double> zv(27);
        for (int i = 0; i < 27; ++i) zv[i] = gv[i] > 0.5 ? 50.0 : -50.0;
        auto z = Tensor::from_data({1, 1, 3, 3, 3}, zv);
        CHECK(dice_loss(g, z).item() < 1e-3);
    }

    SUBCASE("empty against empty resolves to zero by the smoothing convention") {
        auto g = Tensor::zeros({1, 1, 2, 2, 2});
        auto z = Tensor::full({1, 1, 2, 2, 2}, -60.0);
        CHECK(dice_loss(g, z).item() < 1e-9);
    }

    SUBCASE("half-set target against an all-ones prediction") {
        const int64_t volume = 64;
        std::vector<double> gv(volume, 0.0);
        for (int64_t i = 0; i < volume / 2; ++i) gv[i] = 1.0;
        auto g = Tensor::from_data({1, 1, 4, 4, 4}, gv);
        auto z = Tensor::full({1, 1, 4, 4, 4}, 60.0);  // p == 1 everywhere
        const double cardinality = static_cast<double>(volume) / 2.0;
        const double want =
            1.0 - (2.0 * cardinality + 1.0) / (cardinality + static_cast<double>(volume) + 1.0);
        CHECK(dice_loss(g, z).item() == doctest::Approx(want).epsilon(1e-9));
    }

    SUBCASE("invariant under a voxel permutation applied to both inputs") {
        auto g = Tensor::uniform({1, 1, 2, 2, 2}, 0, 1, rng);
        for (auto& x : g.mutable_data()) x = x > 0.6 ? 1.0 : 0.0;
        auto z = Tensor::uniform({1, 1, 2, 2, 2}, -2, 2, rng);
        const double base = dice_loss(g, z).item();

        std::vector<size_t> perm{5, 2, 7, 0, 3, 6, 1, 4};
        std::vector<double> gp(8), zp(8);
        for (size_t i = 0; i < 8; ++i) {
            gp[i] = g.data()[perm[i]];
            zp[i] = z.data()[perm[i]];
        }
        const double permuted = dice_loss(Tensor::from_data({1, 1, 2, 2, 2}, gp),
                                          Tensor::from_data({1, 1, 2, 2, 2}, zp))
                                    .item();
        CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
    }

    SUBCASE("gradient") {
        auto g = Tensor::uniform({1, 1, 3, 3, 3}, 0, 1, rng);
        for (auto& x : g.mutable_data()) x = x > 0.5 ? 1.0 : 0.0;
        auto z = Tensor::uniform({1, 1, 3, 3, 3}, -2, 2, rng, true);
        CHECK(grad_check([&](const Tensor& t) { return dice_loss(g, t); }, z) < 1e-5);
    }
}

TEST_CASE("total_loss") {
    Rng rng(37);
    const uint8_t palette[4] = {0, 1, 2, 4};
    std::vector<uint8_t> lv(64);
    for (auto& x : lv) x = palette[rng.below(4)];
    LabelMap labels;
    labels.h = labels.w = labels.d = 4;
    labels.values = lv;
    auto targets = to_regions(labels);

    SUBCASE("decomposes into the six summands in order") {
        auto logits = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng);
        auto total = total_loss(targets, logits);
        const Tensor* regions[3] = {&targets.wt, &targets.tc, &targets.et};
        Tensor manual;
        for (int64_t r = 0; r < 3; ++r) {
            auto z = slice(logits, 1, r, 1);
            manual = manual.defined() ? add(manual, bce(*regions[r], z)) : bce(*regions[r], z);
            manual = add(manual, dice_loss(*regions[r], z));
        }
        CHECK(total.item() == manual.item());
    }

    SUBCASE("nonnegative on random inputs, near zero when saturated-perfect") {
        for (int trial = 0; trial < 50; ++trial) {
            auto logits = Tensor::uniform({1, 3, 4, 4, 4}, -4, 4, rng);
            CHECK(total_loss(targets, logits).item() >= 0.0);
        }
        std::vector<double> zv(3 * 64);
        const Tensor* regions[3] = {&targets.wt, &targets.tc, &targets.et};
        for (int64_t r = 0; r < 3; ++r)
            for (int64_t i = 0; i < 64; ++i)
                zv[r * 64 + i] = regions[r]->data()[i] > 0.5 ? 60.0 : -60.0;
        CHECK(total_loss(targets, Tensor::from_data({1, 3, 4, 4, 4}, zv)).item() < 3e-2);
    }

    SUBCASE("gradient against finite differences") {
        auto logits = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng, true);
        CHECK(grad_check([&](const Tensor& t) { return total_loss(targets, t); }, logits) < 1e-5);
    }

    SUBCASE("rejects a logit tensor without exactly three channels") {
        CHECK_THROWS(total_loss(targets, Tensor::zeros({1, 2, 4, 4, 4})));
    }
}
