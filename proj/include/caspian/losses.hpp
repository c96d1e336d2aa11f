#pragma once

#include "caspian/tensor.hpp"
#include "caspian/volume.hpp"

namespace caspian {

// The three binary training regions. Nested voxelwise: et within tc within
// wt. Targets may be soft (fractional) after mixing augmentations.
struct RegionTargets {
    Tensor wt, tc, et;  // [N,1,S,S,S] each
};

// wt = labels {1,2,4}, tc = {1,4}, et = {4}. Rejects any other label value.
RegionTargets to_regions(const LabelMap& labels);

// Batch two or more target sets along the leading axis.
RegionTargets stack_regions(const std::vector<RegionTargets>& batch);

// Mean over voxels of -[g log p + (1-g) log(1-p)], p = sigmoid(p_logit),
// computed in logit form.
Tensor bce(const Tensor& g, const Tensor& p_logit);

// Soft overlap loss 1 - (2 sum(g p) + eps) / (sum g + sum p + eps).
Tensor dice_loss(const Tensor& g, const Tensor& p_logit, double smooth = 1.0);

// Sum over WT, TC, ET (logit channels 0,1,2) of bce + dice_loss.
Tensor total_loss(const RegionTargets& targets, const Tensor& logits, double smooth = 1.0);

}  // namespace caspian
