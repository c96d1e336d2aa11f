#include "caspian/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace caspian {

namespace {

void check_same_grid(const Mask3D& a, const Mask3D& b, const char* who) {
    if (a.h != b.h || a.w != b.w || a.d != b.d)
        throw std::invalid_argument(std::string(who) + ": mask grids differ");
}

// Set voxels with a 6-connected background neighbour or on the border.
std::vector<uint8_t> surface_of(const Mask3D& m) {
    std::vector<uint8_t> s(m.numel(), 0);
    for (int64_t h = 0; h < m.h; ++h)
        for (int64_t w = 0; w < m.w; ++w)
            for (int64_t d = 0; d < m.d; ++d) {
                const int64_t i = (h * m.w + w) * m.d + d;
                if (!m.v[i]) continue;
                if (h == 0 || h == m.h - 1 || w == 0 || w == m.w - 1 || d == 0 || d == m.d - 1 ||
                    !m.v[i - m.w * m.d] || !m.v[i + m.w * m.d] || !m.v[i - m.d] || !m.v[i + m.d] ||
                    !m.v[i - 1] || !m.v[i + 1])
                    s[i] = 1;
            }
    return s;
}

// 1D squared Euclidean distance transform (lower envelope of parabolas) with
// grid spacing `step`; f holds squared distances and is updated in place
// through the scratch buffers.
void edt_1d(std::vector<double>& f, int64_t n, int64_t stride, int64_t offset, double step,
            std::vector<double>& z, std::vector<int64_t>& v, std::vector<double>& out) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    int64_t k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    auto at = [&](int64_t i) -> double& { return f[offset + i * stride]; };
    for (int64_t q = 1; q < n; ++q) {
        if (at(q) == kInf) continue;
        if (at(v[0]) == kInf && k == 0) {
            v[0] = q;
            continue;
        }
        while (true) {
            const int64_t p = v[k];
            const double s = ((at(q) + q * q * step * step) - (at(p) + p * p * step * step)) /
                             (2.0 * step * step * (q - p));
            if (s <= z[k] && k > 0) {
                --k;
            } else {
                ++k;
                v[k] = q;
                z[k] = s;
                z[k + 1] = kInf;
                break;
            }
        }
    }
    if (at(v[0]) == kInf) {
        // whole line empty: distances stay infinite
        for (int64_t q = 0; q < n; ++q) out[q] = kInf;
    } else {
        k = 0;
        for (int64_t q = 0; q < n; ++q) {
            while (z[k + 1] < q) ++k;
            const double dx = step * static_cast<double>(q - v[k]);
            out[q] = dx * dx + at(v[k]);
        }
    }
    for (int64_t q = 0; q < n; ++q) at(q) = out[q];
}

// Squared distance from every voxel to the nearest seed voxel.
std::vector<double> distance_field(const std::vector<uint8_t>& seeds, int64_t H, int64_t W,
                                   int64_t D, std::array<double, 3> spacing) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> f(H * W * D);
    for (size_t i = 0; i < f.size(); ++i) f[i] = seeds[i] ? 0.0 : kInf;

    const int64_t n_max = std::max({H, W, D});
    std::vector<double> z(n_max + 1), out(n_max);
    std::vector<int64_t> v(n_max);

    for (int64_t h = 0; h < H; ++h)  // along D
        for (int64_t w = 0; w < W; ++w) edt_1d(f, D, 1, (h * W + w) * D, spacing[2], z, v, out);
    for (int64_t h = 0; h < H; ++h)  // along W
        for (int64_t d = 0; d < D; ++d) edt_1d(f, W, D, h * W * D + d, spacing[1], z, v, out);
    for (int64_t w = 0; w < W; ++w)  // along H
        for (int64_t d = 0; d < D; ++d) edt_1d(f, H, W * D, w * D + d, spacing[0], z, v, out);
    return f;
}

double nearest_rank_p95(std::vector<double>& values) {
    std::sort(values.begin(), values.end());
    const size_t rank =
        static_cast<size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
    return values[rank == 0 ? 0 : rank - 1];
}

}  // namespace

double dice_score(const Mask3D& a, const Mask3D& b) {
    check_same_grid(a, b, "dice_score");
    int64_t inter = 0, ca = 0, cb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const bool xa = a.v[i] != 0, xb = b.v[i] != 0;
        inter += xa && xb;
        ca += xa;
        cb += xb;
    }
    if (ca + cb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(ca + cb);
}

double hd95(const Mask3D& a, const Mask3D& b, std::array<double, 3> spacing) {
    check_same_grid(a, b, "hd95");
    const auto sa = surface_of(a);
    const auto sb = surface_of(b);
    const bool ea = std::none_of(sa.begin(), sa.end(), [](uint8_t x) { return x != 0; });
    const bool eb = std::none_of(sb.begin(), sb.end(), [](uint8_t x) { return x != 0; });
    if (ea && eb) return 0.0;
    if (ea || eb) {
        const double dh = spacing[0] * static_cast<double>(a.h - 1);
        const double dw = spacing[1] * static_cast<double>(a.w - 1);
        const double dd = spacing[2] * static_cast<double>(a.d - 1);
        return std::sqrt(dh * dh + dw * dw + dd * dd);
    }

    const auto dist_to_b = distance_field(sb, a.h, a.w, a.d, spacing);
    const auto dist_to_a = distance_field(sa, a.h, a.w, a.d, spacing);
    std::vector<double> ab, ba;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (sa[i]) ab.push_back(std::sqrt(dist_to_b[i]));
        if (sb[i]) ba.push_back(std::sqrt(dist_to_a[i]));
    }
    return std::max(nearest_rank_p95(ab), nearest_rank_p95(ba));
}

std::pair<double, double> sensitivity_specificity(const Mask3D& g, const Mask3D& p) {
    check_same_grid(g, p, "sensitivity_specificity");
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (int64_t i = 0; i < g.numel(); ++i) {
        const bool truth = g.v[i] != 0, pred = p.v[i] != 0;
        tp += truth && pred;
        tn += !truth && !pred;
        fp += !truth && pred;
        fn += truth && !pred;
    }
    const double sens = tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double spec = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
    return {sens, spec};
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw std::invalid_argument("wilcoxon_signed_rank: sample length mismatch");
    std::vector<double> diffs;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = y[i] - x[i];
        if (d != 0.0) diffs.push_back(d);  // zero differences discarded
    }
    const int64_t n = static_cast<int64_t>(diffs.size());
    if (n < 6)
        throw std::invalid_argument("wilcoxon_signed_rank: fewer than 6 nonzero pairs (" +
                                    std::to_string(n) + ")");

    std::vector<size_t> order(diffs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t i, size_t j) {
        return std::abs(diffs[i]) < std::abs(diffs[j]);
    });

    std::vector<double> rank(diffs.size());
    double tie_term = 0.0;
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        while (j < order.size() && std::abs(diffs[order[j]]) == std::abs(diffs[order[i]])) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k) rank[order[k]] = avg;
        const double t = static_cast<double>(j - i);
        tie_term += (t * t * t - t);
        i = j;
    }

    double w_plus = 0.0;
    for (size_t i = 0; i < diffs.size(); ++i)
        if (diffs[i] > 0.0) w_plus += rank[i];

    const double dn = static_cast<double>(n);
    const double mean = dn * (dn + 1.0) / 4.0;
    const double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) throw std::invalid_argument("wilcoxon_signed_rank: degenerate variance (all ties)");
    const double dev = w_plus - mean;
    const double correction = dev > 0.0 ? -0.5 : dev < 0.0 ? 0.5 : 0.0;
    const double z = (dev + correction) / std::sqrt(var);
    const double p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
    return {w_plus, p, n};
}

RegionMetrics evaluate_masks(const Mask3D& truth, const Mask3D& predicted,
                             std::array<double, 3> spacing) {
    RegionMetrics m;
    m.dice = dice_score(truth, predicted);
    m.hd95 = hd95(truth, predicted, spacing);
    const auto [sens, spec] = sensitivity_specificity(truth, predicted);
    m.sensitivity = sens;
    m.specificity = spec;
    return m;
}

std::string format_eval_line(const std::string& case_id, const std::string& region,
                             const RegionMetrics& m) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << case_id << "," << region << "," << m.dice << "," << m.hd95 << "," << m.sensitivity << ","
       << m.specificity;
    return os.str();
}

}  // namespace caspian
