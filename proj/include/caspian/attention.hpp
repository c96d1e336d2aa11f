#pragma once

#include <array>

#include "caspian/tensor.hpp"

namespace caspian {

// The three anatomical planes, mapped onto the spatial axes of [N,C,H,W,D]:
// flipping across a plane mirrors the corresponding axis.
enum class PlaneId { sagittal = 1, coronal = 2, axial = 3 };

inline int64_t plane_axis(PlaneId plane) { return 1 + static_cast<int64_t>(plane); }

// Guard added to each norm denominator so zero feature vectors map to the
// neutral similarity 0 instead of NaN.
inline constexpr double kAsymmetryEps = 1e-8;

// Per-voxel asymmetry weights theta in [0,1], shape [N,1,H,W,D].
struct SpatialMask {
    Tensor values;
};

// Per-channel asymmetry weights theta in [0,1], shape [N,C].
struct ChannelMask {
    Tensor values;
};

enum class ExcitationKind { spatial, channel };

// FC -> ReLU -> FC -> sigmoid amplifier applied to an asymmetry mask. No
// bottleneck: the channel variant maps C->C->C, the spatial variant is a
// shared pointwise perceptron 1->hidden->1 over each mask scalar.
struct ExcitationParams {
    ExcitationKind kind;
    Tensor w1, b1, w2, b2;

    static ExcitationParams spatial(Rng& rng, int64_t hidden = 4);
    static ExcitationParams channel(int64_t channels, Rng& rng);
    static ExcitationParams spatial_zero(int64_t hidden = 4);
    static ExcitationParams channel_zero(int64_t channels);

    void collect(std::vector<Tensor>& out) const;
};

// theta_sp: per-voxel (1 - cos)/2 between the channel vectors of u and its
// mirror along the plane. Mirror-symmetric input yields theta == 0.
SpatialMask saam(const Tensor& u, PlaneId plane = PlaneId::sagittal, double eps = kAsymmetryEps);

// theta_ch: per-channel (1 - cos)/2 between a channel and its mirrored copy.
ChannelMask caam(const Tensor& m, PlaneId plane = PlaneId::sagittal, double eps = kAsymmetryEps);

Tensor excite(const SpatialMask& mask, const ExcitationParams& params);
Tensor excite(const ChannelMask& mask, const ExcitationParams& params);

struct CaspianParams {
    ExcitationParams sp, ch;

    static CaspianParams init(int64_t channels, Rng& rng);
    static CaspianParams zero(int64_t channels);
    void collect(std::vector<Tensor>& out) const;
};

// Spatially-attended plus channel-attended copies of the input:
// excite(saam(i)) * i + excite(caam(i)) * i.
Tensor caspian(const Tensor& input, const CaspianParams& params,
               PlaneId plane = PlaneId::sagittal);

struct MultiplanarParams {
    std::array<ExcitationParams, 3> sp;  // indexed by plane - 1

    static MultiplanarParams init(Rng& rng);
    void collect(std::vector<Tensor>& out) const;
};

// Sum over the three planes of excite(saam(i, plane)) * i.
Tensor multiplanar(const Tensor& input, const MultiplanarParams& params);

struct MultiscaleParams {
    ExcitationParams sp_fine, sp_coarse;
    // 1x1x1 projection applied to the pooled coarse map when channel counts
    // differ; undefined tensors otherwise.
    Tensor proj_w, proj_b;

    static MultiscaleParams init(int64_t fine_channels, int64_t coarse_channels, Rng& rng);
    void collect(std::vector<Tensor>& out) const;
};

// Gated fusion of fine- and coarse-scale spatial masks:
// S1 * i_s1 + (1 - S1) * S0 * i_s1 where S0 comes from the pooled coarse map.
// i_s0 spatial extents must be exactly twice those of i_s1.
Tensor multiscale(const Tensor& i_s1, const Tensor& i_s0, const MultiscaleParams& params,
                  PlaneId plane = PlaneId::sagittal);

struct CaspianPPParams {
    ExcitationParams ch;
    MultiscaleParams ms;
    MultiplanarParams mp;

    static CaspianPPParams init(int64_t fine_channels, int64_t coarse_channels, Rng& rng);
    void collect(std::vector<Tensor>& out) const;
};

// Channel attention + multiscale + multiplanar, all on the fine-scale input.
Tensor caspian_pp(const Tensor& i_s1, const Tensor& i_s0, const CaspianPPParams& params,
                  PlaneId plane = PlaneId::sagittal);

struct SeParams {
    ExcitationParams ch;

    static SeParams init(int64_t channels, Rng& rng);
    void collect(std::vector<Tensor>& out) const;
};

// Classic squeeze-and-excitation: global average pool per channel, the same
// no-bottleneck MLP, channel reweighting of the input.
Tensor se_baseline(const Tensor& input, const SeParams& params);

// Mask-only attention used by the ablation variants that predate excitation.
Tensor saam_only(const Tensor& input, PlaneId plane = PlaneId::sagittal);
Tensor saam_caam(const Tensor& input, PlaneId plane = PlaneId::sagittal);

}  // namespace caspian
