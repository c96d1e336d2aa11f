#pragma once

#include <array>

#include "caspian/losses.hpp"
#include "caspian/rng.hpp"
#include "caspian/volume.hpp"

namespace caspian {

// Synthetic case recipe: an exactly mirror-symmetric smooth background with
// asymmetric nested ellipsoid lesions (edema label 2, core label 1, enhancing
// label 4) planted off the mid-sagittal plane on one side.
struct PhantomSpec {
    int64_t extent = 32;
    int64_t lesion_count = 1;
    // Radius ranges per nested shell; the ranges must be strictly ordered so
    // every draw satisfies enhancing < core < edema.
    double enhancing_radius_lo = 1.2, enhancing_radius_hi = 2.0;
    double core_radius_lo = 2.4, core_radius_hi = 3.5;
    double edema_radius_lo = 4.0, edema_radius_hi = 6.0;
    // Additive intensity per shell and channel; shells stack inward.
    std::array<double, 4> edema_offsets{1.0, 1.2, 2.6, 3.0};
    std::array<double, 4> core_offsets{2.2, 2.6, 1.0, 1.4};
    std::array<double, 4> enhancing_offsets{3.6, 1.6, 1.0, 2.2};
    int64_t background_blobs = 24;
    uint64_t seed = 0;
};

std::pair<Volume, LabelMap> gen_phantom(const PhantomSpec& spec);

// Per-channel standardization over all voxels; constant channels are only
// centered.
Volume zscore(const Volume& v);

// Window of the given cubic size centred on the WT centroid plus jitter up to
// size/4 per axis, clamped inside bounds; uniform window when WT is empty.
std::pair<Volume, LabelMap> centroid_crop(const Volume& v, const LabelMap& l, int64_t size,
                                          Rng& rng);

struct AugmentConfig {
    int64_t crop = 32;
    bool enable_flips = true;
    double flip_prob = 0.5;  // per spatial axis
    bool enable_rotation = true;
    double rotate_prob = 0.5;  // one 90-degree-multiple rotation in a random plane
    bool enable_intensity = true;
    double scale_lo = 0.9, scale_hi = 1.1;
    double shift_lo = -0.1, shift_hi = 0.1;
    double mixup_alpha = 0.2;
    double copy_paste_prob = 0.5;
};

// Flips, a 90-degree-multiple rotation and per-channel intensity scale/shift,
// in that order. Geometry is applied identically to the labels.
std::pair<Volume, LabelMap> basic_augment(const Volume& v, const LabelMap& l,
                                          const AugmentConfig& cfg, Rng& rng);

// Convex blend of two cases with lambda ~ Beta(alpha, alpha); region targets
// become soft values in [0,1].
std::pair<Volume, RegionTargets> mixup(const Volume& va, const RegionTargets& ta, const Volume& vb,
                                       const RegionTargets& tb, double alpha, Rng& rng);

// Blend with an explicit mixing coefficient.
std::pair<Volume, RegionTargets> mixup_fixed(const Volume& va, const RegionTargets& ta,
                                             const Volume& vb, const RegionTargets& tb,
                                             double lambda);

// Hard paste of the donor's labelled voxels (intensities and labels) onto the
// recipient, translated by a random offset that keeps the pasted WT inside
// bounds; falls back to the untranslated paste after 8 failed draws.
std::pair<Volume, LabelMap> copy_paste(const Volume& donor_v, const LabelMap& donor_l,
                                       const Volume& recipient_v, const LabelMap& recipient_l,
                                       Rng& rng);

// [1,C,H,W,D] tensor view of a volume (copies the data).
Tensor to_tensor(const Volume& v);

}  // namespace caspian
