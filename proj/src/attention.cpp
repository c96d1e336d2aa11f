#include "caspian/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace caspian {

namespace {

void check_volume(const Tensor& t, const char* who) {
    if (t.rank() != 5)
        throw std::invalid_argument(std::string(who) + ": expects [N,C,H,W,D] input");
}

Tensor uniform_fan_in(Shape shape, int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

// Broadcastable [N,C,1,1,1] view of a per-channel map.
Tensor as_channel_weights(const Tensor& per_channel) {
    return reshape(per_channel, {per_channel.shape()[0], per_channel.shape()[1], 1, 1, 1});
}

}  // namespace

ExcitationParams ExcitationParams::spatial(Rng& rng, int64_t hidden) {
    ExcitationParams p;
    p.kind = ExcitationKind::spatial;
    p.w1 = uniform_fan_in({hidden, 1}, 1, rng);
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = uniform_fan_in({1, hidden}, hidden, rng);
    p.b2 = Tensor::zeros({1}, true);
    return p;
}

ExcitationParams ExcitationParams::channel(int64_t channels, Rng& rng) {
    ExcitationParams p;
    p.kind = ExcitationKind::channel;
    p.w1 = uniform_fan_in({channels, channels}, channels, rng);
    p.b1 = Tensor::zeros({channels}, true);
    p.w2 = uniform_fan_in({channels, channels}, channels, rng);
    p.b2 = Tensor::zeros({channels}, true);
    return p;
}

ExcitationParams ExcitationParams::spatial_zero(int64_t hidden) {
    ExcitationParams p;
    p.kind = ExcitationKind::spatial;
    p.w1 = Tensor::zeros({hidden, 1}, true);
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = Tensor::zeros({1, hidden}, true);
    p.b2 = Tensor::zeros({1}, true);
    return p;
}

ExcitationParams ExcitationParams::channel_zero(int64_t channels) {
    ExcitationParams p;
    p.kind = ExcitationKind::channel;
    p.w1 = Tensor::zeros({channels, channels}, true);
    p.b1 = Tensor::zeros({channels}, true);
    p.w2 = Tensor::zeros({channels, channels}, true);
    p.b2 = Tensor::zeros({channels}, true);
    return p;
}

void ExcitationParams::collect(std::vector<Tensor>& out) const {
    out.push_back(w1);
    out.push_back(b1);
    out.push_back(w2);
    out.push_back(b2);
}

SpatialMask saam(const Tensor& u, PlaneId plane, double eps) {
    check_volume(u, "saam");
    if (eps <= 0.0) throw std::invalid_argument("saam: eps must be positive");
    const int64_t axis = plane_axis(plane);
    const Tensor mirrored = flip(u, axis);
    const Tensor dot = reduce_sum(mul(u, mirrored), {1}, true);
    const Tensor norm = sqrt(reduce_sum(square(u), {1}, true));
    // The mirrored vector's norm is the mirrored norm, bit-exactly.
    const Tensor denom = mul(clamp_min(norm, eps), clamp_min(flip(norm, axis), eps));
    const Tensor alpha = div(dot, denom);
    return SpatialMask{mul(sub(Tensor::scalar(1.0), alpha), Tensor::scalar(0.5))};
}

ChannelMask caam(const Tensor& m, PlaneId plane, double eps) {
    check_volume(m, "caam");
    if (eps <= 0.0) throw std::invalid_argument("caam: eps must be positive");
    const int64_t axis = plane_axis(plane);
    const std::vector<int64_t> spatial_axes{2, 3, 4};
    const Tensor mirrored = flip(m, axis);
    const Tensor dot = reduce_sum(mul(m, mirrored), spatial_axes, false);
    const Tensor norm = clamp_min(sqrt(reduce_sum(square(m), spatial_axes, false)), eps);
    const Tensor norm_mirrored =
        clamp_min(sqrt(reduce_sum(square(mirrored), spatial_axes, false)), eps);
    const Tensor alpha = div(dot, mul(norm, norm_mirrored));
    return ChannelMask{mul(sub(Tensor::scalar(1.0), alpha), Tensor::scalar(0.5))};
}

Tensor excite(const SpatialMask& mask, const ExcitationParams& params) {
    if (params.kind != ExcitationKind::spatial)
        throw std::invalid_argument("excite: spatial mask requires spatial params");
    const Shape shape = mask.values.shape();
    // Shared pointwise perceptron on each mask scalar.
    Tensor flat = reshape(mask.values, {mask.values.numel(), 1});
    flat = linear(flat, params.w1, params.b1);
    flat = relu(flat);
    flat = linear(flat, params.w2, params.b2);
    return reshape(sigmoid(flat), shape);
}

Tensor excite(const ChannelMask& mask, const ExcitationParams& params) {
    if (params.kind != ExcitationKind::channel)
        throw std::invalid_argument("excite: channel mask requires channel params");
    if (params.w1.shape()[1] != mask.values.shape()[1])
        throw std::invalid_argument("excite: params sized for " +
                                    std::to_string(params.w1.shape()[1]) + " channels, mask has " +
                                    std::to_string(mask.values.shape()[1]));
    Tensor h = relu(linear(mask.values, params.w1, params.b1));
    return sigmoid(linear(h, params.w2, params.b2));
}

CaspianParams CaspianParams::init(int64_t channels, Rng& rng) {
    return CaspianParams{ExcitationParams::spatial(rng), ExcitationParams::channel(channels, rng)};
}

CaspianParams CaspianParams::zero(int64_t channels) {
    return CaspianParams{ExcitationParams::spatial_zero(), ExcitationParams::channel_zero(channels)};
}

void CaspianParams::collect(std::vector<Tensor>& out) const {
    sp.collect(out);
    ch.collect(out);
}

Tensor caspian(const Tensor& input, const CaspianParams& params, PlaneId plane) {
    check_volume(input, "caspian");
    const Tensor q_spatial = mul(excite(saam(input, plane), params.sp), input);
    const Tensor q_channel =
        mul(as_channel_weights(excite(caam(input, plane), params.ch)), input);
    return add(q_spatial, q_channel);
}

MultiplanarParams MultiplanarParams::init(Rng& rng) {
    return MultiplanarParams{{ExcitationParams::spatial(rng), ExcitationParams::spatial(rng),
                              ExcitationParams::spatial(rng)}};
}

void MultiplanarParams::collect(std::vector<Tensor>& out) const {
    for (const auto& p : sp) p.collect(out);
}

Tensor multiplanar(const Tensor& input, const MultiplanarParams& params) {
    check_volume(input, "multiplanar");
    Tensor acc;
    for (PlaneId plane : {PlaneId::sagittal, PlaneId::coronal, PlaneId::axial}) {
        const auto& p = params.sp[static_cast<size_t>(plane) - 1];
        Tensor term = mul(excite(saam(input, plane), p), input);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
}

MultiscaleParams MultiscaleParams::init(int64_t fine_channels, int64_t coarse_channels, Rng& rng) {
    MultiscaleParams p;
    p.sp_fine = ExcitationParams::spatial(rng);
    p.sp_coarse = ExcitationParams::spatial(rng);
    if (fine_channels != coarse_channels) {
        p.proj_w = uniform_fan_in({fine_channels, coarse_channels, 1, 1, 1}, coarse_channels, rng);
        p.proj_b = Tensor::zeros({fine_channels}, true);
    }
    return p;
}

void MultiscaleParams::collect(std::vector<Tensor>& out) const {
    sp_fine.collect(out);
    sp_coarse.collect(out);
    if (proj_w.defined()) {
        out.push_back(proj_w);
        out.push_back(proj_b);
    }
}

Tensor multiscale(const Tensor& i_s1, const Tensor& i_s0, const MultiscaleParams& params,
                  PlaneId plane) {
    check_volume(i_s1, "multiscale");
    check_volume(i_s0, "multiscale");
    for (int64_t d = 2; d < 5; ++d)
        if (i_s0.shape()[d] != 2 * i_s1.shape()[d])
            throw std::invalid_argument("multiscale: coarse input must be exactly 2x the fine scale");
    if (i_s0.shape()[0] != i_s1.shape()[0])
        throw std::invalid_argument("multiscale: batch mismatch");

    Tensor pooled = maxpool3d(i_s0, 2, 2);
    if (pooled.shape()[1] != i_s1.shape()[1]) {
        if (!params.proj_w.defined())
            throw std::invalid_argument("multiscale: channel mismatch without projection params");
        pooled = conv3d(pooled, params.proj_w, params.proj_b, 1, 0);
    }
    const Tensor fine_mask = excite(saam(i_s1, plane), params.sp_fine);
    const Tensor coarse_mask = excite(saam(pooled, plane), params.sp_coarse);
    const Tensor gated =
        mul(mul(sub(Tensor::scalar(1.0), fine_mask), coarse_mask), i_s1);
    return add(mul(fine_mask, i_s1), gated);
}

CaspianPPParams CaspianPPParams::init(int64_t fine_channels, int64_t coarse_channels, Rng& rng) {
    CaspianPPParams p;
    p.ch = ExcitationParams::channel(fine_channels, rng);
    p.ms = MultiscaleParams::init(fine_channels, coarse_channels, rng);
    p.mp = MultiplanarParams::init(rng);
    return p;
}

void CaspianPPParams::collect(std::vector<Tensor>& out) const {
    ch.collect(out);
    ms.collect(out);
    mp.collect(out);
}

Tensor caspian_pp(const Tensor& i_s1, const Tensor& i_s0, const CaspianPPParams& params,
                  PlaneId plane) {
    const Tensor q_channel = mul(as_channel_weights(excite(caam(i_s1, plane), params.ch)), i_s1);
    const Tensor q_multiscale = multiscale(i_s1, i_s0, params.ms, plane);
    const Tensor q_multiplanar = multiplanar(i_s1, params.mp);
    return add(add(q_channel, q_multiscale), q_multiplanar);
}

SeParams SeParams::init(int64_t channels, Rng& rng) {
    return SeParams{ExcitationParams::channel(channels, rng)};
}

void SeParams::collect(std::vector<Tensor>& out) const { ch.collect(out); }

Tensor se_baseline(const Tensor& input, const SeParams& params) {
    check_volume(input, "se_baseline");
    const Shape& s = input.shape();
    const double inv_voxels = 1.0 / static_cast<double>(s[2] * s[3] * s[4]);
    const Tensor pooled =
        mul(reduce_sum(input, {2, 3, 4}, false), Tensor::scalar(inv_voxels));  // [N,C]
    Tensor h = relu(linear(pooled, params.ch.w1, params.ch.b1));
    const Tensor weights = sigmoid(linear(h, params.ch.w2, params.ch.b2));
    return mul(as_channel_weights(weights), input);
}

Tensor saam_only(const Tensor& input, PlaneId plane) {
    return mul(saam(input, plane).values, input);
}

Tensor saam_caam(const Tensor& input, PlaneId plane) {
    const Tensor q_sp = mul(saam(input, plane).values, input);
    const Tensor q_ch = mul(as_channel_weights(caam(input, plane).values), input);
    return add(q_sp, q_ch);
}

}  // namespace caspian
