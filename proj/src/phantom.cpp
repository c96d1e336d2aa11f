#include "caspian/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace caspian {

namespace {

struct Blob {
    double ch, cw, cd, sigma, amplitude;
};

// Precedence when lesions overlap: enhancing > core > edema > background.
int label_rank(uint8_t label) {
    switch (label) {
        case 4: return 3;
        case 1: return 2;
        case 2: return 1;
        default: return 0;
    }
}

void validate_spec(const PhantomSpec& spec) {
    if (spec.extent < 8) throw std::invalid_argument("gen_phantom: extent must be at least 8");
    if (spec.lesion_count < 0) throw std::invalid_argument("gen_phantom: negative lesion count");
    const bool ordered = 0.0 < spec.enhancing_radius_lo &&
                         spec.enhancing_radius_lo <= spec.enhancing_radius_hi &&
                         spec.enhancing_radius_hi < spec.core_radius_lo &&
                         spec.core_radius_lo <= spec.core_radius_hi &&
                         spec.core_radius_hi < spec.edema_radius_lo &&
                         spec.edema_radius_lo <= spec.edema_radius_hi;
    if (!ordered)
        throw std::invalid_argument(
            "gen_phantom: shell radius ranges must satisfy enhancing < core < edema");
}

// Applies f(h,w,d, flat_index) over the grid.
template <typename F>
void for_each_voxel(int64_t H, int64_t W, int64_t D, F&& f) {
    int64_t i = 0;
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
            for (int64_t d = 0; d < D; ++d, ++i) f(h, w, d, i);
}

void flip_spatial(std::vector<double>& data, int64_t channels, int64_t H, int64_t W, int64_t D,
                  int axis) {
    const int64_t dims[3] = {H, W, D};
    const int64_t strides[3] = {W * D, D, 1};
    const int64_t n = H * W * D;
    const int64_t extent = dims[axis];
    const int64_t stride = strides[axis];
    for (int64_t c = 0; c < channels; ++c) {
        double* base = data.data() + c * n;
        for (int64_t i = 0; i < n; ++i) {
            const int64_t pos = (i / stride) % extent;
            if (pos >= extent - 1 - pos) continue;
            std::swap(base[i], base[i + (extent - 1 - 2 * pos) * stride]);
        }
    }
}

void flip_labels(LabelMap& l, int axis) {
    std::vector<double> tmp(l.values.begin(), l.values.end());
    flip_spatial(tmp, 1, l.h, l.w, l.d, axis);
    for (size_t i = 0; i < tmp.size(); ++i) l.values[i] = static_cast<uint8_t>(tmp[i]);
}

// One 90-degree rotation in the plane spanned by spatial axes a < b; the two
// extents must match. Returns false (no-op) otherwise.
template <typename T>
bool rotate90_once(std::vector<T>& data, int64_t channels, std::array<int64_t, 3> dims, int a,
                   int b) {
    if (dims[a] != dims[b]) return false;
    const int64_t S = dims[a];
    const int64_t n = dims[0] * dims[1] * dims[2];
    std::vector<T> out(data.size());
    for (int64_t c = 0; c < channels; ++c) {
        const T* src = data.data() + c * n;
        T* dst = out.data() + c * n;
        int64_t coord[3];
        int64_t i = 0;
        for (coord[0] = 0; coord[0] < dims[0]; ++coord[0])
            for (coord[1] = 0; coord[1] < dims[1]; ++coord[1])
                for (coord[2] = 0; coord[2] < dims[2]; ++coord[2], ++i) {
                    int64_t rotated[3] = {coord[0], coord[1], coord[2]};
                    rotated[a] = coord[b];
                    rotated[b] = S - 1 - coord[a];
                    dst[(rotated[0] * dims[1] + rotated[1]) * dims[2] + rotated[2]] = src[i];
                }
    }
    data = std::move(out);
    return true;
}

}  // namespace

std::pair<Volume, LabelMap> gen_phantom(const PhantomSpec& spec) {
    validate_spec(spec);
    Rng rng(spec.seed);
    const int64_t E = spec.extent;

    Volume v;
    v.channels = 4;
    v.h = v.w = v.d = E;
    v.data.assign(v.numel(), 0.0);
    LabelMap labels;
    labels.h = labels.w = labels.d = E;
    labels.values.assign(E * E * E, 0);

    // Smooth blob background, evaluated on the low half and mirrored across
    // the mid-sagittal plane so the null case is exactly symmetric.
    const int64_t half = (E + 1) / 2;
    for (int64_t c = 0; c < 4; ++c) {
        std::vector<Blob> blobs(static_cast<size_t>(spec.background_blobs));
        for (auto& b : blobs) {
            b.ch = rng.uniform(0, static_cast<double>(E - 1));
            b.cw = rng.uniform(0, static_cast<double>(E - 1));
            b.cd = rng.uniform(0, static_cast<double>(E - 1));
            b.sigma = rng.uniform(2.0, static_cast<double>(E) / 4.0);
            b.amplitude = rng.uniform(-1.0, 1.0);
        }
        for (int64_t h = 0; h < half; ++h)
            for (int64_t w = 0; w < E; ++w)
                for (int64_t d = 0; d < E; ++d) {
                    double acc = 0.0;
                    for (const auto& b : blobs) {
                        const double dh = static_cast<double>(h) - b.ch;
                        const double dw = static_cast<double>(w) - b.cw;
                        const double dd = static_cast<double>(d) - b.cd;
                        acc += b.amplitude *
                               std::exp(-(dh * dh + dw * dw + dd * dd) / (2.0 * b.sigma * b.sigma));
                    }
                    v.at(c, h, w, d) = acc;
                    v.at(c, E - 1 - h, w, d) = acc;
                }
    }

    // Nested ellipsoid lesions on one randomly chosen side.
    struct Shell {
        double radius;
        uint8_t label;
        const std::array<double, 4>* offsets;
    };
    for (int64_t lesion = 0; lesion < spec.lesion_count; ++lesion) {
        const double r_ed = rng.uniform(spec.edema_radius_lo, spec.edema_radius_hi);
        const double r_co = rng.uniform(spec.core_radius_lo, spec.core_radius_hi);
        const double r_en = rng.uniform(spec.enhancing_radius_lo, spec.enhancing_radius_hi);
        const double sh = rng.uniform(0.8, 1.2);
        const double sw = rng.uniform(0.8, 1.2);
        const double sd = rng.uniform(0.8, 1.2);
        const bool low_side = rng.below(2) == 0;

        // Keep the whole edema ellipsoid strictly on one side and in bounds.
        const double rh = r_ed * sh, rw = r_ed * sw, rd = r_ed * sd;
        const double half_extent = static_cast<double>(E) / 2.0;
        const double h_lo = rh + 0.5;
        const double h_hi = half_extent - 1.0 - rh;
        const double w_margin = rw + 0.5, d_margin = rd + 0.5;
        if (h_hi < h_lo || 2.0 * w_margin >= static_cast<double>(E - 1) ||
            2.0 * d_margin >= static_cast<double>(E - 1))
            throw std::invalid_argument("gen_phantom: lesion does not fit extent");
        double hc = rng.uniform(h_lo, h_hi);
        if (!low_side) hc = static_cast<double>(E - 1) - hc;
        const double wc = rng.uniform(w_margin, static_cast<double>(E - 1) - w_margin);
        const double dc = rng.uniform(d_margin, static_cast<double>(E - 1) - d_margin);

        const Shell shells[3] = {{r_ed, 2, &spec.edema_offsets},
                                 {r_co, 1, &spec.core_offsets},
                                 {r_en, 4, &spec.enhancing_offsets}};
        for_each_voxel(E, E, E, [&](int64_t h, int64_t w, int64_t d, int64_t i) {
            const double nh = (static_cast<double>(h) - hc) / sh;
            const double nw = (static_cast<double>(w) - wc) / sw;
            const double nd = (static_cast<double>(d) - dc) / sd;
            const double rr = nh * nh + nw * nw + nd * nd;
            for (const Shell& s : shells) {
                if (rr > s.radius * s.radius) continue;
                for (int64_t c = 0; c < 4; ++c) v.data[c * E * E * E + i] += (*s.offsets)[c];
                if (label_rank(s.label) > label_rank(labels.values[i]))
                    labels.values[i] = s.label;
            }
        });
    }
    return {std::move(v), std::move(labels)};
}

Volume zscore(const Volume& v) {
    Volume out = v;
    const int64_t n = v.spatial();
    for (int64_t c = 0; c < v.channels; ++c) {
        double* ch = out.data.data() + c * n;
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) mean += ch[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) var += (ch[i] - mean) * (ch[i] - mean);
        var /= static_cast<double>(n);
        const double sd = std::sqrt(var);
        if (sd > 0.0) {
            for (int64_t i = 0; i < n; ++i) ch[i] = (ch[i] - mean) / sd;
        } else {
            for (int64_t i = 0; i < n; ++i) ch[i] -= mean;
        }
    }
    return out;
}

std::pair<Volume, LabelMap> centroid_crop(const Volume& v, const LabelMap& l, int64_t size,
                                          Rng& rng) {
    if (size > v.h || size > v.w || size > v.d)
        throw std::invalid_argument("centroid_crop: size exceeds volume extent");

    int64_t start[3];
    int64_t wt_count = 0;
    double centroid[3] = {0, 0, 0};
    for_each_voxel(l.h, l.w, l.d, [&](int64_t h, int64_t w, int64_t d, int64_t i) {
        if (l.values[i] == 0) return;
        ++wt_count;
        centroid[0] += static_cast<double>(h);
        centroid[1] += static_cast<double>(w);
        centroid[2] += static_cast<double>(d);
    });
    const int64_t dims[3] = {v.h, v.w, v.d};
    for (int axis = 0; axis < 3; ++axis) {
        if (wt_count > 0) {
            const int64_t center =
                static_cast<int64_t>(std::floor(centroid[axis] / static_cast<double>(wt_count) + 0.5));
            const int64_t jitter_span = size / 4;
            const int64_t jitter =
                jitter_span > 0
                    ? static_cast<int64_t>(rng.below(static_cast<uint64_t>(2 * jitter_span + 1))) -
                          jitter_span
                    : 0;
            start[axis] = std::clamp(center - size / 2 + jitter, int64_t{0}, dims[axis] - size);
        } else {
            start[axis] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(dims[axis] - size + 1)));
        }
    }

    Volume cv;
    cv.case_id = v.case_id;
    cv.channels = v.channels;
    cv.h = cv.w = cv.d = size;
    cv.data.resize(cv.numel());
    LabelMap cl;
    cl.h = cl.w = cl.d = size;
    cl.values.resize(size * size * size);
    for (int64_t c = 0; c < v.channels; ++c)
        for (int64_t h = 0; h < size; ++h)
            for (int64_t w = 0; w < size; ++w)
                for (int64_t d = 0; d < size; ++d)
                    cv.at(c, h, w, d) = v.at(c, start[0] + h, start[1] + w, start[2] + d);
    for (int64_t h = 0; h < size; ++h)
        for (int64_t w = 0; w < size; ++w)
            for (int64_t d = 0; d < size; ++d)
                cl.at(h, w, d) = l.at(start[0] + h, start[1] + w, start[2] + d);
    return {std::move(cv), std::move(cl)};
}

std::pair<Volume, LabelMap> basic_augment(const Volume& v, const LabelMap& l,
                                          const AugmentConfig& cfg, Rng& rng) {
    Volume av = v;
    LabelMap al = l;

    if (cfg.enable_flips)
        for (int axis = 0; axis < 3; ++axis)
            if (rng.uniform() < cfg.flip_prob) {
                flip_spatial(av.data, av.channels, av.h, av.w, av.d, axis);
                flip_labels(al, axis);
            }

    if (cfg.enable_rotation && rng.uniform() < cfg.rotate_prob) {
        const int planes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
        const int* plane = planes[rng.below(3)];
        const int64_t quarter_turns = 1 + static_cast<int64_t>(rng.below(3));
        const std::array<int64_t, 3> dims{av.h, av.w, av.d};
        for (int64_t t = 0; t < quarter_turns; ++t) {
            rotate90_once(av.data, av.channels, dims, plane[0], plane[1]);
            rotate90_once(al.values, 1, dims, plane[0], plane[1]);
        }
    }

    if (cfg.enable_intensity) {
        const int64_t n = av.spatial();
        for (int64_t c = 0; c < av.channels; ++c) {
            const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
            const double shift = rng.uniform(cfg.shift_lo, cfg.shift_hi);
            double* ch = av.data.data() + c * n;
            for (int64_t i = 0; i < n; ++i) ch[i] = ch[i] * scale + shift;
        }
    }
    return {std::move(av), std::move(al)};
}

std::pair<Volume, RegionTargets> mixup(const Volume& va, const RegionTargets& ta, const Volume& vb,
                                       const RegionTargets& tb, double alpha, Rng& rng) {
    if (alpha <= 0.0) throw std::invalid_argument("mixup: alpha must be positive");
    return mixup_fixed(va, ta, vb, tb, rng.beta(alpha, alpha));
}

std::pair<Volume, RegionTargets> mixup_fixed(const Volume& va, const RegionTargets& ta,
                                             const Volume& vb, const RegionTargets& tb,
                                             double lambda) {
    if (va.numel() != vb.numel() || va.h != vb.h || va.w != vb.w || va.d != vb.d)
        throw std::invalid_argument("mixup: volume shapes differ");

    Volume out = va;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = lambda * va.data[i] + (1.0 - lambda) * vb.data[i];

    auto blend = [lambda](const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) throw std::invalid_argument("mixup: target shapes differ");
        std::vector<double> mixed(a.numel());
        for (int64_t i = 0; i < a.numel(); ++i)
            mixed[i] = lambda * a.data()[i] + (1.0 - lambda) * b.data()[i];
        return Tensor::from_data(a.shape(), std::move(mixed));
    };
    return {std::move(out),
            RegionTargets{blend(ta.wt, tb.wt), blend(ta.tc, tb.tc), blend(ta.et, tb.et)}};
}

std::pair<Volume, LabelMap> copy_paste(const Volume& donor_v, const LabelMap& donor_l,
                                       const Volume& recipient_v, const LabelMap& recipient_l,
                                       Rng& rng) {
    if (donor_v.h != recipient_v.h || donor_v.w != recipient_v.w || donor_v.d != recipient_v.d ||
        donor_v.channels != recipient_v.channels)
        throw std::invalid_argument("copy_paste: shapes differ");

    Volume out_v = recipient_v;
    LabelMap out_l = recipient_l;

    // Bounding box of the donor's labelled voxels.
    int64_t lo[3] = {donor_l.h, donor_l.w, donor_l.d};
    int64_t hi[3] = {-1, -1, -1};
    for_each_voxel(donor_l.h, donor_l.w, donor_l.d, [&](int64_t h, int64_t w, int64_t d, int64_t i) {
        if (donor_l.values[i] == 0) return;
        const int64_t p[3] = {h, w, d};
        for (int axis = 0; axis < 3; ++axis) {
            lo[axis] = std::min(lo[axis], p[axis]);
            hi[axis] = std::max(hi[axis], p[axis]);
        }
    });
    if (hi[0] < 0) return {std::move(out_v), std::move(out_l)};  // nothing to paste

    const int64_t dims[3] = {donor_l.h, donor_l.w, donor_l.d};
    int64_t offset[3] = {0, 0, 0};
    for (int attempt = 0; attempt < 8; ++attempt) {
        int64_t candidate[3];
        bool fits = true;
        for (int axis = 0; axis < 3; ++axis) {
            const int64_t span = dims[axis] / 4;
            candidate[axis] =
                static_cast<int64_t>(rng.below(static_cast<uint64_t>(2 * span + 1))) - span;
            if (lo[axis] + candidate[axis] < 0 || hi[axis] + candidate[axis] >= dims[axis])
                fits = false;
        }
        if (fits) {
            for (int axis = 0; axis < 3; ++axis) offset[axis] = candidate[axis];
            break;
        }
    }

    const int64_t n = donor_l.numel();
    for_each_voxel(dims[0], dims[1], dims[2], [&](int64_t h, int64_t w, int64_t d, int64_t i) {
        if (donor_l.values[i] == 0) return;
        const int64_t th = h + offset[0], tw = w + offset[1], td = d + offset[2];
        const int64_t j = (th * dims[1] + tw) * dims[2] + td;
        out_l.values[j] = donor_l.values[i];
        for (int64_t c = 0; c < donor_v.channels; ++c) out_v.data[c * n + j] = donor_v.data[c * n + i];
    });
    return {std::move(out_v), std::move(out_l)};
}

Tensor to_tensor(const Volume& v) {
    return Tensor::from_data({1, v.channels, v.h, v.w, v.d}, v.data);
}

}  // namespace caspian
