#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace caspian {

// Binary evaluation mask on a 3D grid.
struct Mask3D {
    int64_t h = 0, w = 0, d = 0;
    std::vector<uint8_t> v;

    int64_t numel() const { return h * w * d; }
    int64_t count() const {
        int64_t c = 0;
        for (uint8_t x : v) c += x != 0;
        return c;
    }
};

// 2|a n b| / (|a| + |b|); both masks empty -> 1, exactly one empty -> 0.
double dice_score(const Mask3D& a, const Mask3D& b);

// Symmetric 95th-percentile surface distance. Surfaces are set voxels with a
// 6-connected background neighbour or on the volume border; the percentile is
// nearest-rank. Both surfaces empty -> 0; one empty -> the volume diagonal.
double hd95(const Mask3D& a, const Mask3D& b, std::array<double, 3> spacing = {1.0, 1.0, 1.0});

// (TP/(TP+FN), TN/(TN+FP)); zero denominators -> 1.
std::pair<double, double> sensitivity_specificity(const Mask3D& g, const Mask3D& p);

struct WilcoxonResult {
    double statistic;  // W+, the rank sum of positive differences y - x
    double p_value;    // two-sided, normal approximation with tie and continuity corrections
    int64_t n;         // pairs remaining after discarding zero differences
};

// Paired signed-rank test; requires at least 6 nonzero differences.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y);

struct RegionMetrics {
    double dice = 0, hd95 = 0, sensitivity = 0, specificity = 0;
};

struct EvalReport {
    std::string case_id;
    RegionMetrics wt, tc, et;
};

RegionMetrics evaluate_masks(const Mask3D& truth, const Mask3D& predicted,
                             std::array<double, 3> spacing = {1.0, 1.0, 1.0});

// "case-id,region,dice,hd95,sensitivity,specificity" with 6 decimal places.
std::string format_eval_line(const std::string& case_id, const std::string& region,
                             const RegionMetrics& m);

}  // namespace caspian
