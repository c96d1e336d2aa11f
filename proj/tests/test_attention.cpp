#include "caspian/attention.hpp"

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

using namespace caspian;

namespace {

// Mirror-symmetric volume along the given spatial axis (0=H,1=W,2=D).
Tensor symmetric_volume(int64_t N, int64_t C, int64_t H, int64_t W, int64_t D, Rng& rng,
                        int axis = 0) {
    auto t = Tensor::uniform({N, C, H, W, D}, -2, 2, rng);
    auto& v = t.mutable_data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w)
                    for (int64_t d = 0; d < D; ++d) {
                        const int64_t fh = axis == 0 ? H - 1 - h : h;
                        const int64_t fw = axis == 1 ? W - 1 - w : w;
                        const int64_t fd = axis == 2 ? D - 1 - d : d;
                        v[(((n * C + c) * H + fh) * W + fw) * D + fd] =
                            v[(((n * C + c) * H + h) * W + w) * D + d];
                    }
    return t;
}

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

TEST_CASE("saam null, inverted and orthogonal cases") {
    Rng rng(1);
    auto sym = symmetric_volume(1, 3, 4, 3, 3, rng);
    CHECK(max_abs(saam(sym).values.data()) < 1e-9);

    // u with mirrored counterpart equal to -u: theta == 1 everywhere.
    auto anti = Tensor::uniform({1, 2, 4, 3, 3}, -2, 2, rng);
    {
        auto& v = anti.mutable_data();
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t h = 0; h < 2; ++h)
                for (int64_t i = 0; i < 9; ++i)
                    v[(c * 4 + (3 - h)) * 9 + i] = -v[(c * 4 + h) * 9 + i];
    }
    auto anti_mask = saam(anti);
    for (double theta : anti_mask.values.data())
        CHECK(theta == doctest::Approx(1.0).epsilon(1e-9));

    // Channel vector (1,0) against its mirror (0,1): cosine 0, theta 0.5.
    auto ortho = Tensor::zeros({1, 2, 2, 1, 1});
    ortho.mutable_data() = {1, 0, 0, 1};  // channel 0: [1,0]; channel 1: [0,1] along H
    auto theta = saam(ortho).values;
    CHECK(theta.data()[0] == doctest::Approx(0.5));
    CHECK(theta.data()[1] == doctest::Approx(0.5));
}

TEST_CASE("saam matches the naive cosine oracle and is exactly flip-symmetric") {
    Rng rng(2);
    for (PlaneId plane : {PlaneId::sagittal, PlaneId::coronal, PlaneId::axial}) {
        auto u = Tensor::uniform({2, 3, 4, 5, 6}, -2, 2, rng);
        auto got = saam(u, plane);
        auto want = oracle::saam_theta(u.data(), 2, 3, 4, 5, 6,
                                       static_cast<int>(plane) - 1, kAsymmetryEps);
        REQUIRE(got.values.numel() == static_cast<int64_t>(want.size()));
        for (size_t i = 0; i < want.size(); ++i)
            CHECK(std::abs(got.values.data()[i] - want[i]) < 1e-12);

        // Cosine symmetry: the mask mirrors onto itself bit-exactly.
        CHECK(flip(got.values, plane_axis(plane)).data() == got.values.data());

        for (double t : got.values.data()) {
            CHECK(t >= -1e-12);
            CHECK(t <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("saam and caam are invariant under positive rescaling") {
    Rng rng(3);
    auto u = Tensor::uniform({1, 4, 4, 4, 4}, -2, 2, rng);
    auto scaled = mul(u, Tensor::scalar(37.5));
    auto a = saam(u).values;
    auto b = saam(scaled).values;
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-9);
    auto ca = caam(u).values;
    auto cb = caam(scaled).values;
    for (int64_t i = 0; i < ca.numel(); ++i) CHECK(std::abs(ca.data()[i] - cb.data()[i]) < 1e-9);
}

TEST_CASE("caam null, inverted, oracle and permutation equivariance") {
    Rng rng(4);
    auto sym = symmetric_volume(1, 3, 4, 4, 4, rng);
    CHECK(max_abs(caam(sym).values.data()) < 1e-12);

    auto anti = Tensor::uniform({1, 1, 4, 3, 3}, -2, 2, rng);
    {
        auto& v = anti.mutable_data();
        for (int64_t h = 0; h < 2; ++h)
            for (int64_t i = 0; i < 9; ++i) v[(3 - h) * 9 + i] = -v[h * 9 + i];
    }
    CHECK(caam(anti).values.data()[0] == doctest::Approx(1.0).epsilon(1e-12));

    auto m = Tensor::uniform({1, 2, 4, 4, 4}, -2, 2, rng);
    auto got = caam(m).values;
    auto want = oracle::caam_theta(m.data(), 1, 2, 4, 4, 4, 0, kAsymmetryEps);
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-12);

    // Swapping input channels swaps the per-channel outputs identically.
    auto swapped = concat(slice(m, 1, 1, 1), slice(m, 1, 0, 1), 1);
    auto got_swapped = caam(swapped).values;
    CHECK(got_swapped.data()[0] == got.data()[1]);
    CHECK(got_swapped.data()[1] == got.data()[0]);
}

TEST_CASE("excite") {
    Rng rng(5);
    auto u = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng);
    auto sp_mask = saam(u);
    auto ch_mask = caam(u);

    SUBCASE("zero params produce the constant 0.5") {
        auto sp = excite(sp_mask, ExcitationParams::spatial_zero());
        for (double v : sp.data()) CHECK(v == 0.5);
        auto ch = excite(ch_mask, ExcitationParams::channel_zero(3));
        for (double v : ch.data()) CHECK(v == 0.5);
    }

    SUBCASE("identity-like params reduce to sigmoid(relu(theta))") {
        ExcitationParams sp = ExcitationParams::spatial_zero();
        sp.w1.mutable_data()[0] = 1.0;  // route through the first hidden unit
        sp.w2.mutable_data()[0] = 1.0;
        auto out = excite(sp_mask, sp);
        for (int64_t i = 0; i < out.numel(); ++i) {
            const double theta = sp_mask.values.data()[i];
            const double want = 1.0 / (1.0 + std::exp(-std::max(theta, 0.0)));
            CHECK(out.data()[i] == doctest::Approx(want).epsilon(1e-12));
        }

        ExcitationParams ch = ExcitationParams::channel_zero(3);
        for (int64_t i = 0; i < 3; ++i) {
            ch.w1.mutable_data()[i * 3 + i] = 1.0;
            ch.w2.mutable_data()[i * 3 + i] = 1.0;
        }
        auto out_ch = excite(ch_mask, ch);
        for (int64_t i = 0; i < out_ch.numel(); ++i) {
            const double theta = ch_mask.values.data()[i];
            const double want = 1.0 / (1.0 + std::exp(-std::max(theta, 0.0)));
            CHECK(out_ch.data()[i] == doctest::Approx(want).epsilon(1e-12));
        }
    }

    SUBCASE("kind mismatch is rejected") {
        CHECK_THROWS(excite(sp_mask, ExcitationParams::channel_zero(3)));
        CHECK_THROWS(excite(ch_mask, ExcitationParams::spatial_zero()));
    }

    SUBCASE("gradients against finite differences, mask and params") {
        auto params = CaspianParams::init(3, rng);
        // Random biases keep the ReLU kinks away from the mask value atoms
        // (mid-plane voxels have theta == 0, exactly on the kink at b == 0).
        for (auto* b : {&params.sp.b1, &params.ch.b1})
            for (auto& v : b->mutable_data()) v = rng.uniform(0.05, 0.4);
        auto x = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng, true);
        auto objective = [&](const Tensor& t) {
            return reduce_sum_all(mul(excite(saam(t), params.sp), t));
        };
        CHECK(grad_check(objective, x) < 1e-5);

        auto xf = x.detach();
        auto wrt_param = [&](const Tensor&) {
            return reduce_sum_all(mul(excite(saam(xf), params.sp), xf));
        };
        CHECK(grad_check(wrt_param, params.sp.w1) < 1e-5);
        CHECK(grad_check(wrt_param, params.sp.b1) < 1e-5);
        CHECK(grad_check(wrt_param, params.sp.w2) < 1e-5);
        CHECK(grad_check(wrt_param, params.sp.b2) < 1e-5);

        auto wrt_ch = [&](const Tensor&) { return reduce_sum_all(excite(caam(xf), params.ch)); };
        CHECK(grad_check(wrt_ch, params.ch.w1) < 1e-5);
        CHECK(grad_check(wrt_ch, params.ch.b2) < 1e-5);
    }
}

TEST_CASE("caspian") {
    Rng rng(6);

    SUBCASE("identity at symmetry with zero excitation") {
        auto sym = symmetric_volume(1, 2, 4, 3, 3, rng);
        auto out = caspian::caspian(sym, CaspianParams::zero(2));
        CHECK(out.data() == sym.data());  // 0.5*i + 0.5*i, exactly
    }

    SUBCASE("zero input maps to zero output") {
        auto zero = Tensor::zeros({1, 2, 4, 4, 4});
        CHECK(max_abs(caspian::caspian(zero, CaspianParams::zero(2)).data()) == 0.0);
    }

    SUBCASE("equals the step-by-step composition bitwise") {
        auto params = CaspianParams::init(3, rng);
        auto x = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng);
        auto got = caspian::caspian(x, params);
        auto q_sp = mul(excite(saam(x), params.sp), x);
        auto q_ch = mul(reshape(excite(caam(x), params.ch), {1, 3, 1, 1, 1}), x);
        auto want = add(q_sp, q_ch);
        CHECK(got.data() == want.data());
    }

    SUBCASE("gradient") {
        auto params = CaspianParams::init(2, rng);
        auto x = Tensor::uniform({1, 2, 3, 3, 3}, -2, 2, rng, true);
        CHECK(grad_check(
                  [&](const Tensor& t) { return reduce_sum_all(caspian::caspian(t, params)); }, x) < 1e-5);
    }
}

TEST_CASE("multiplanar") {
    Rng rng(7);

    SUBCASE("triple-symmetric input with zero params gives 1.5x input") {
        auto s = Tensor::uniform({1, 2, 4, 4, 4}, -2, 2, rng);
        // Symmetrize along all three axes.
        for (int axis = 0; axis < 3; ++axis) s = mul(add(s, flip(s, 2 + axis)), Tensor::scalar(0.5));
        MultiplanarParams zero{{ExcitationParams::spatial_zero(), ExcitationParams::spatial_zero(),
                                ExcitationParams::spatial_zero()}};
        auto out = multiplanar(s, zero);
        for (int64_t i = 0; i < s.numel(); ++i)
            CHECK(out.data()[i] == doctest::Approx(1.5 * s.data()[i]).epsilon(1e-12));
    }

    SUBCASE("zero input gives zero") {
        auto params = MultiplanarParams::init(rng);
        CHECK(max_abs(multiplanar(Tensor::zeros({1, 2, 4, 4, 4}), params).data()) == 0.0);
    }

    SUBCASE("equals three independent single-plane terms summed") {
        auto params = MultiplanarParams::init(rng);
        auto x = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng);
        auto got = multiplanar(x, params);
        Tensor want;
        for (int p = 0; p < 3; ++p) {
            auto term = mul(excite(saam(x, static_cast<PlaneId>(p + 1)), params.sp[p]), x);
            want = want.defined() ? add(want, term) : term;
        }
        CHECK(got.data() == want.data());
    }
}

TEST_CASE("multiscale") {
    Rng rng(8);
    auto i_s1 = Tensor::uniform({1, 2, 3, 3, 3}, -2, 2, rng);
    auto i_s0 = Tensor::uniform({1, 2, 6, 6, 6}, -2, 2, rng);

    SUBCASE("saturated gates return the fine input") {
        auto params = MultiscaleParams::init(2, 2, rng);
        params.sp_coarse = ExcitationParams::spatial_zero();
        // Fine mask driven to 1: the coarse term vanishes.
        auto high = ExcitationParams::spatial_zero();
        high.b2.mutable_data()[0] = 60.0;
        params.sp_fine = high;
        auto out = multiscale(i_s1, i_s0, params);
        for (int64_t i = 0; i < out.numel(); ++i)
            CHECK(std::abs(out.data()[i] - i_s1.data()[i]) < 1e-12);

        // Fine mask driven to 0, coarse mask driven to 1: gate fully open.
        auto low = ExcitationParams::spatial_zero();
        low.b2.mutable_data()[0] = -60.0;
        params.sp_fine = low;
        auto coarse_high = ExcitationParams::spatial_zero();
        coarse_high.b2.mutable_data()[0] = 60.0;
        params.sp_coarse = coarse_high;
        auto out2 = multiscale(i_s1, i_s0, params);
        for (int64_t i = 0; i < out2.numel(); ++i)
            CHECK(std::abs(out2.data()[i] - i_s1.data()[i]) < 1e-12);
    }

    SUBCASE("matches an independent scalar-loop evaluation") {
        auto params = MultiscaleParams::init(2, 2, rng);
        auto got = multiscale(i_s1, i_s0, params);

        auto pooled = oracle::maxpool3d(i_s0.data(), 1, 2, 6, 6, 6, 2, 2);
        auto theta1 = oracle::saam_theta(i_s1.data(), 1, 2, 3, 3, 3, 0, kAsymmetryEps);
        auto theta0 = oracle::saam_theta(pooled, 1, 2, 3, 3, 3, 0, kAsymmetryEps);
        auto mlp = [](const ExcitationParams& p, double theta) {
            double acc = 0.0;
            const int64_t h = p.w1.shape()[0];
            for (int64_t j = 0; j < h; ++j) {
                const double hidden = std::max(p.w1.data()[j] * theta + p.b1.data()[j], 0.0);
                acc += p.w2.data()[j] * hidden;
            }
            return 1.0 / (1.0 + std::exp(-(acc + p.b2.data()[0])));
        };
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t v = 0; v < 27; ++v) {
                const double s1 = mlp(params.sp_fine, theta1[v]);
                const double s0 = mlp(params.sp_coarse, theta0[v]);
                const double x = i_s1.data()[c * 27 + v];
                const double want = s1 * x + (1.0 - s1) * s0 * x;
                CHECK(std::abs(got.data()[c * 27 + v] - want) < 1e-12);
            }
    }

    SUBCASE("misaligned scales are rejected") {
        auto params = MultiscaleParams::init(2, 2, rng);
        CHECK_THROWS(multiscale(i_s1, Tensor::zeros({1, 2, 5, 6, 6}), params));
    }

    SUBCASE("channel mismatch goes through the learned projection") {
        auto params = MultiscaleParams::init(2, 4, rng);
        auto wide = Tensor::uniform({1, 4, 6, 6, 6}, -2, 2, rng);
        auto out = multiscale(i_s1, wide, params);
        CHECK(out.shape() == i_s1.shape());
    }
}

TEST_CASE("caspian_pp") {
    Rng rng(9);
    auto params = CaspianPPParams::init(2, 2, rng);

    SUBCASE("zero input pair gives zero") {
        auto out = caspian_pp(Tensor::zeros({1, 2, 3, 3, 3}), Tensor::zeros({1, 2, 6, 6, 6}), params);
        CHECK(max_abs(out.data()) == 0.0);
    }

    SUBCASE("decomposes into channel + multiscale + multiplanar") {
        auto i_s1 = Tensor::uniform({1, 2, 3, 3, 3}, -2, 2, rng);
        auto i_s0 = Tensor::uniform({1, 2, 6, 6, 6}, -2, 2, rng);
        auto got = caspian_pp(i_s1, i_s0, params);
        auto q_ch = mul(reshape(excite(caam(i_s1), params.ch), {1, 2, 1, 1, 1}), i_s1);
        auto q_ms = multiscale(i_s1, i_s0, params.ms);
        auto q_mp = multiplanar(i_s1, params.mp);
        auto want = add(add(q_ch, q_ms), q_mp);
        CHECK(got.data() == want.data());
    }

    SUBCASE("gradient w.r.t. both inputs") {
        auto i_s1 = Tensor::uniform({1, 2, 2, 2, 2}, -2, 2, rng, true);
        auto i_s0 = Tensor::uniform({1, 2, 4, 4, 4}, -2, 2, rng, true);
        CHECK(grad_check(
                  [&](const Tensor& t) {
                      return reduce_sum_all(caspian_pp(t, i_s0.detach(), params));
                  },
                  i_s1) < 1e-5);
        CHECK(grad_check(
                  [&](const Tensor& t) {
                      return reduce_sum_all(caspian_pp(i_s1.detach(), t, params));
                  },
                  i_s0) < 1e-5);
    }
}

TEST_CASE("se_baseline") {
    Rng rng(10);

    SUBCASE("zero params halve the input") {
        auto x = Tensor::uniform({1, 3, 4, 4, 4}, -2, 2, rng);
        auto out = se_baseline(x, SeParams{ExcitationParams::channel_zero(3)});
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(out.data()[i] == doctest::Approx(0.5 * x.data()[i]).epsilon(1e-12));
    }

    SUBCASE("matches the naive per-channel mean loop") {
        auto x = Tensor::uniform({2, 3, 4, 4, 4}, -2, 2, rng);
        auto means = oracle::channel_means(x.data(), 2, 3, 64);
        auto params = SeParams::init(3, rng);

        auto got = se_baseline(x, params);
        // Independent route: per-channel MLP on the means, then reweighting.
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t c = 0; c < 3; ++c) {
                std::vector<double> hidden(3);
                for (int64_t j = 0; j < 3; ++j) {
                    double acc = params.ch.b1.data()[j];
                    for (int64_t i = 0; i < 3; ++i)
                        acc += params.ch.w1.data()[j * 3 + i] * means[n * 3 + i];
                    hidden[j] = std::max(acc, 0.0);
                }
                double acc = params.ch.b2.data()[c];
                for (int64_t j = 0; j < 3; ++j) acc += params.ch.w2.data()[c * 3 + j] * hidden[j];
                const double weight = 1.0 / (1.0 + std::exp(-acc));
                for (int64_t v = 0; v < 64; ++v) {
                    const double want = weight * x.data()[(n * 3 + c) * 64 + v];
                    CHECK(std::abs(got.data()[(n * 3 + c) * 64 + v] - want) < 1e-12);
                }
            }
    }

    SUBCASE("constant input pools to the constant") {
        auto x = Tensor::full({1, 2, 4, 4, 4}, 1.75);
        auto means = oracle::channel_means(x.data(), 1, 2, 64);
        CHECK(means[0] == doctest::Approx(1.75).epsilon(1e-15));
        CHECK(means[1] == doctest::Approx(1.75).epsilon(1e-15));
    }
}

TEST_CASE("mask-only ablation attentions") {
    Rng rng(11);
    auto x = Tensor::uniform({1, 2, 4, 4, 4}, -2, 2, rng);
    auto q1 = saam_only(x);
    auto want1 = mul(saam(x).values, x);
    CHECK(q1.data() == want1.data());

    auto q2 = saam_caam(x);
    CHECK(q2.shape() == x.shape());

    auto x_grad = Tensor::uniform({1, 2, 3, 3, 3}, -2, 2, rng, true);
    CHECK(grad_check([](const Tensor& t) { return reduce_sum_all(saam_caam(t)); }, x_grad) < 1e-5);
}
