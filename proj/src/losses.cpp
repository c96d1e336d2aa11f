#include "caspian/losses.hpp"

#include <stdexcept>

namespace caspian {

RegionTargets to_regions(const LabelMap& labels) {
    const int64_t n = labels.numel();
    std::vector<double> wt(n), tc(n), et(n);
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t v = labels.values[i];
        switch (v) {
            case 0: wt[i] = 0; tc[i] = 0; et[i] = 0; break;
            case 2: wt[i] = 1; tc[i] = 0; et[i] = 0; break;
            case 1: wt[i] = 1; tc[i] = 1; et[i] = 0; break;
            case 4: wt[i] = 1; tc[i] = 1; et[i] = 1; break;
            default:
                throw std::invalid_argument("to_regions: label value " + std::to_string(v) +
                                            " outside {0,1,2,4}");
        }
    }
    const Shape shape{1, 1, labels.h, labels.w, labels.d};
    return RegionTargets{Tensor::from_data(shape, std::move(wt)),
                         Tensor::from_data(shape, std::move(tc)),
                         Tensor::from_data(shape, std::move(et))};
}

RegionTargets stack_regions(const std::vector<RegionTargets>& batch) {
    if (batch.empty()) throw std::invalid_argument("stack_regions: empty batch");
    RegionTargets out = batch.front();
    for (size_t i = 1; i < batch.size(); ++i) {
        out.wt = concat(out.wt, batch[i].wt, 0);
        out.tc = concat(out.tc, batch[i].tc, 0);
        out.et = concat(out.et, batch[i].et, 0);
    }
    return out;
}

Tensor bce(const Tensor& g, const Tensor& p_logit) { return bce_with_logits(g, p_logit); }

Tensor dice_loss(const Tensor& g, const Tensor& p_logit, double smooth) {
    if (g.shape() != p_logit.shape())
        throw std::invalid_argument("dice_loss: target and logit shapes differ");
    if (smooth <= 0.0) throw std::invalid_argument("dice_loss: smooth must be positive");
    const Tensor p = sigmoid(p_logit);
    const Tensor overlap = reduce_sum_all(mul(g, p));
    const Tensor num = add(mul(overlap, Tensor::scalar(2.0)), Tensor::scalar(smooth));
    const Tensor den = add(add(reduce_sum_all(g), reduce_sum_all(p)), Tensor::scalar(smooth));
    return sub(Tensor::scalar(1.0), div(num, den));
}

Tensor total_loss(const RegionTargets& targets, const Tensor& logits, double smooth) {
    if (logits.rank() != 5 || logits.shape()[1] != 3)
        throw std::invalid_argument("total_loss: logits must be [N,3,S,S,S]");
    const Tensor* regions[3] = {&targets.wt, &targets.tc, &targets.et};
    Tensor loss;
    for (int64_t r = 0; r < 3; ++r) {
        const Tensor z = slice(logits, 1, r, 1);
        const Tensor term_bce = bce(*regions[r], z);
        loss = loss.defined() ? add(loss, term_bce) : term_bce;
        loss = add(loss, dice_loss(*regions[r], z, smooth));
    }
    return loss;
}

}  // namespace caspian
