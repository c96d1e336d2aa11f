#include "caspian/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace caspian {

namespace {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * shape[i + 1];
    return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) +
                                        " and " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` aligned to a broadcast output shape; stretched dims get stride 0.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    const auto natural = row_major_strides(in);
    const size_t offset = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i)
        strides[offset + i] = in[i] == 1 ? 0 : natural[i];
    return strides;
}

// Walks an output index space while tracking linear offsets into two
// broadcast-aligned operands. Carry-based increments, no div/mod per element.
struct PairwiseWalker {
    Shape dims;
    std::vector<int64_t> sa, sb;
    std::vector<int64_t> coord;
    int64_t ia = 0, ib = 0;

    PairwiseWalker(const Shape& out, std::vector<int64_t> stride_a, std::vector<int64_t> stride_b)
        : dims(out), sa(std::move(stride_a)), sb(std::move(stride_b)), coord(out.size(), 0) {}

    void advance() {
        for (int64_t d = static_cast<int64_t>(dims.size()) - 1; d >= 0; --d) {
            ++coord[d];
            ia += sa[d];
            ib += sb[d];
            if (coord[d] < dims[d]) return;
            coord[d] = 0;
            ia -= sa[d] * dims[d];
            ib -= sb[d] * dims[d];
        }
    }
};

void check_axis(const Shape& shape, int64_t axis, const char* who) {
    if (axis < 0 || axis >= static_cast<int64_t>(shape.size()))
        throw std::invalid_argument(std::string(who) + ": axis " + std::to_string(axis) +
                                    " invalid for shape " + shape_str(shape));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw std::invalid_argument("shape extents must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backprop, const char* op) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs_grad = false;
    for (const auto& p : parents) needs_grad = needs_grad || p.node()->requires_grad;
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->backprop = std::move(backprop);
        for (const auto& p : parents) node->parents.push_back(p.node());
    }
    return Tensor(node);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("from_data: " + std::to_string(values.size()) +
                                    " values do not fill shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(node);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
    return from_data(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data(Shape{}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from_data(std::move(shape), std::move(v), requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
    const auto& s = node_->shape;
    if (index.size() != s.size()) throw std::invalid_argument("at: rank mismatch");
    const auto strides = row_major_strides(s);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : index) {
        if (i < 0 || i >= s[d]) throw std::invalid_argument("at: index out of range");
        off += i * strides[d++];
    }
    return node_->data[off];
}

Tensor Tensor::detach() const {
    return from_data(node_->shape, node_->data, false);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

struct UnaryKind {
    const char* name;
    double (*f)(double);
    double (*df)(double, double);  // (x, y) -> dy/dx
};

const UnaryKind& unary_kind(OpKind kind) {
    static const UnaryKind k_relu{"relu", [](double x) { return x > 0.0 ? x : 0.0; },
                                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }};
    static const UnaryKind k_sigmoid{"sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                                     [](double, double y) { return y * (1.0 - y); }};
    static const UnaryKind k_log{"log", [](double x) { return std::log(x); },
                                 [](double x, double) { return 1.0 / x; }};
    static const UnaryKind k_sqrt{"sqrt", [](double x) { return std::sqrt(x); },
                                  [](double, double y) { return 0.5 / y; }};
    static const UnaryKind k_square{"square", [](double x) { return x * x; },
                                    [](double x, double) { return 2.0 * x; }};
    static const UnaryKind k_negate{"negate", [](double x) { return -x; },
                                    [](double, double) { return -1.0; }};
    switch (kind) {
        case OpKind::relu: return k_relu;
        case OpKind::sigmoid: return k_sigmoid;
        case OpKind::log: return k_log;
        case OpKind::sqrt: return k_sqrt;
        case OpKind::square: return k_square;
        case OpKind::negate: return k_negate;
        default: throw std::invalid_argument("elementwise: kind is not unary");
    }
}

Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                 double (*f)(double, double), double (*dfa)(double, double),
                 double (*dfb)(double, double)) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    const int64_t n = shape_numel(out_shape);
    std::vector<double> out(static_cast<size_t>(n));

    const auto& av = a.data();
    const auto& bv = b.data();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    } else if (b.numel() == 1) {
        const double s = bv[0];
        for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], s);
    } else if (a.numel() == 1) {
        const double s = av[0];
        for (int64_t i = 0; i < n; ++i) out[i] = f(s, bv[i]);
    } else {
        PairwiseWalker w(out_shape, broadcast_strides(a.shape(), out_shape),
                         broadcast_strides(b.shape(), out_shape));
        for (int64_t i = 0; i < n; ++i, w.advance()) out[i] = f(av[w.ia], bv[w.ib]);
    }

    auto backprop = [a, b, out_shape, dfa, dfb](TensorNode& node) {
        auto an = a.node();
        auto bn = b.node();
        const auto& av = an->data;
        const auto& bv = bn->data;
        const int64_t n = node.numel();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        PairwiseWalker w(out_shape, broadcast_strides(an->shape, out_shape),
                         broadcast_strides(bn->shape, out_shape));
        for (int64_t i = 0; i < n; ++i, w.advance()) {
            const double g = node.grad[i];
            if (an->requires_grad) an->grad[w.ia] += g * dfa(av[w.ia], bv[w.ib]);
            if (bn->requires_grad) bn->grad[w.ib] += g * dfb(av[w.ia], bv[w.ib]);
        }
    };
    return make_op(out_shape, std::move(out), {a, b}, std::move(backprop), name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double y : b.data())
        if (y == 0.0) throw std::domain_error("div: division by exact zero");
    return binary_op(a, b, "div", [](double x, double y) { return x / y; },
                     [](double, double y) { return 1.0 / y; },
                     [](double x, double y) { return -x / (y * y); });
}

Tensor elementwise(OpKind kind, const Tensor& a) {
    if (kind == OpKind::negate) return negate(a);
    const UnaryKind& u = unary_kind(kind);
    const int64_t n = a.numel();
    if (kind == OpKind::log)
        for (double x : a.data())
            if (x <= 0.0) throw std::domain_error("log: input must be positive");
    if (kind == OpKind::sqrt)
        for (double x : a.data())
            if (x < 0.0) throw std::domain_error("sqrt: input must be non-negative");

    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[i] = u.f(a.data()[i]);
    auto backprop = [a, &u](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        for (int64_t i = 0; i < node.numel(); ++i)
            an->grad[i] += node.grad[i] * u.df(an->data[i], node.data[i]);
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(backprop), u.name);
}

Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b) {
    switch (kind) {
        case OpKind::add: return add(a, b);
        case OpKind::sub: return sub(a, b);
        case OpKind::mul: return mul(a, b);
        case OpKind::div: return div(a, b);
        default: throw std::invalid_argument("elementwise: kind is not binary");
    }
}

Tensor relu(const Tensor& a) { return elementwise(OpKind::relu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(OpKind::sigmoid, a); }
Tensor log(const Tensor& a) { return elementwise(OpKind::log, a); }
Tensor sqrt(const Tensor& a) { return elementwise(OpKind::sqrt, a); }
Tensor square(const Tensor& a) { return elementwise(OpKind::square, a); }
Tensor negate(const Tensor& a) { return elementwise(OpKind::negate, a); }

Tensor clamp_min(const Tensor& a, double floor) {
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[i] = std::max(a.data()[i], floor);
    auto backprop = [a, floor](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        for (int64_t i = 0; i < node.numel(); ++i)
            if (an->data[i] > floor) an->grad[i] += node.grad[i];
    };
    return make_op(a.shape(), std::move(out), {a}, std::move(backprop), "clamp_min");
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

Tensor reduce_sum(const Tensor& a, const std::vector<int64_t>& axes, bool keep_dims) {
    const Shape& in = a.shape();
    std::vector<bool> reduced(in.size(), false);
    for (int64_t ax : axes) {
        check_axis(in, ax, "reduce_sum");
        reduced[ax] = true;
    }
    Shape out_shape;
    Shape kept_shape(in.size());  // reduced extents collapse to 1
    for (size_t d = 0; d < in.size(); ++d) {
        kept_shape[d] = reduced[d] ? 1 : in[d];
        if (!reduced[d])
            out_shape.push_back(in[d]);
        else if (keep_dims)
            out_shape.push_back(1);
    }

    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(shape_numel(kept_shape)), 0.0);
    {
        PairwiseWalker w(in, row_major_strides(in), broadcast_strides(kept_shape, in));
        for (int64_t i = 0; i < n; ++i, w.advance()) out[w.ib] += a.data()[w.ia];
    }

    auto backprop = [a, kept_shape](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        const Shape& in = an->shape;
        PairwiseWalker w(in, row_major_strides(in), broadcast_strides(kept_shape, in));
        for (int64_t i = 0; i < an->numel(); ++i, w.advance()) an->grad[w.ia] += node.grad[w.ib];
    };
    return make_op(out_shape, std::move(out), {a}, std::move(backprop), "reduce_sum");
}

Tensor reduce_sum_all(const Tensor& a) {
    std::vector<int64_t> axes(a.rank());
    for (int64_t d = 0; d < a.rank(); ++d) axes[d] = d;
    return reduce_sum(a, axes, false);
}

Tensor flip(const Tensor& a, int64_t axis) {
    check_axis(a.shape(), axis, "flip");
    const Shape& s = a.shape();
    const auto strides = row_major_strides(s);
    const int64_t n = a.numel();
    const int64_t stride = strides[axis];
    const int64_t extent = s[axis];

    auto mirror = [stride, extent](int64_t i) {
        const int64_t pos = (i / stride) % extent;
        return i + (extent - 1 - 2 * pos) * stride;
    };

    std::vector<double> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[i] = a.data()[mirror(i)];
    auto backprop = [a, mirror](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        for (int64_t i = 0; i < node.numel(); ++i) an->grad[mirror(i)] += node.grad[i];
    };
    return make_op(s, std::move(out), {a}, std::move(backprop), "flip");
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    auto backprop = [a](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        for (int64_t i = 0; i < node.numel(); ++i) an->grad[i] += node.grad[i];
    };
    return make_op(std::move(shape), a.data(), {a}, std::move(backprop), "reshape");
}

Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length) {
    check_axis(a.shape(), axis, "slice");
    const Shape& s = a.shape();
    if (start < 0 || length <= 0 || start + length > s[axis])
        throw std::invalid_argument("slice: window out of range");
    Shape out_shape = s;
    out_shape[axis] = length;

    const auto in_strides = row_major_strides(s);
    const int64_t inner = in_strides[axis];
    const int64_t outer = a.numel() / (inner * s[axis]);
    const int64_t n = shape_numel(out_shape);

    std::vector<double> out(static_cast<size_t>(n));
    int64_t j = 0;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t x = start; x < start + length; ++x)
            for (int64_t i = 0; i < inner; ++i) out[j++] = a.data()[(o * s[axis] + x) * inner + i];

    auto backprop = [a, axis, start, length, inner, outer](TensorNode& node) {
        auto an = a.node();
        an->ensure_grad();
        const int64_t extent = an->shape[axis];
        int64_t j = 0;
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t x = start; x < start + length; ++x)
                for (int64_t i = 0; i < inner; ++i)
                    an->grad[(o * extent + x) * inner + i] += node.grad[j++];
    };
    return make_op(out_shape, std::move(out), {a}, std::move(backprop), "slice");
}

Tensor concat(const Tensor& a, const Tensor& b, int64_t axis) {
    check_axis(a.shape(), axis, "concat");
    if (a.rank() != b.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int64_t d = 0; d < a.rank(); ++d)
        if (d != axis && a.shape()[d] != b.shape()[d])
            throw std::invalid_argument("concat: shapes differ off the concat axis");

    Shape out_shape = a.shape();
    out_shape[axis] += b.shape()[axis];
    const auto strides = row_major_strides(a.shape());
    const int64_t inner = strides[axis];
    const int64_t ea = a.shape()[axis], eb = b.shape()[axis];
    const int64_t outer = a.numel() / (inner * ea);

    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    int64_t j = 0;
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(&out[j], &a.data()[o * ea * inner], sizeof(double) * ea * inner);
        j += ea * inner;
        std::memcpy(&out[j], &b.data()[o * eb * inner], sizeof(double) * eb * inner);
        j += eb * inner;
    }

    auto backprop = [a, b, inner, ea, eb, outer](TensorNode& node) {
        auto an = a.node();
        auto bn = b.node();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        int64_t j = 0;
        for (int64_t o = 0; o < outer; ++o) {
            if (an->requires_grad)
                for (int64_t i = 0; i < ea * inner; ++i) an->grad[o * ea * inner + i] += node.grad[j + i];
            j += ea * inner;
            if (bn->requires_grad)
                for (int64_t i = 0; i < eb * inner; ++i) bn->grad[o * eb * inner + i] += node.grad[j + i];
            j += eb * inner;
        }
    };
    return make_op(out_shape, std::move(out), {a, b}, std::move(backprop), "concat");
}

// ---------------------------------------------------------------------------
// network primitives
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int64_t N, C, H, W, D, O, K, OH, OW, OD;
    int64_t stride, padding;
    int64_t patch() const { return C * K * K * K; }
    int64_t ospatial() const { return OH * OW * OD; }
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, int64_t stride, int64_t padding) {
    if (xs.size() != 5 || ws.size() != 5) throw std::invalid_argument("conv3d: x must be rank 5 and w rank 5");
    ConvDims d{};
    d.N = xs[0]; d.C = xs[1]; d.H = xs[2]; d.W = xs[3]; d.D = xs[4];
    d.O = ws[0]; d.K = ws[2];
    d.stride = stride;
    d.padding = padding;
    if (ws[1] != d.C)
        throw std::invalid_argument("conv3d: weight expects " + std::to_string(ws[1]) +
                                    " input channels, got " + std::to_string(d.C));
    if (ws[3] != d.K || ws[4] != d.K || d.K % 2 == 0)
        throw std::invalid_argument("conv3d: kernel must be cubic with odd extent");
    if (stride <= 0 || padding < 0) throw std::invalid_argument("conv3d: bad stride/padding");
    auto out_extent = [&](int64_t s) { return (s + 2 * padding - d.K) / stride + 1; };
    d.OH = out_extent(d.H); d.OW = out_extent(d.W); d.OD = out_extent(d.D);
    if (d.OH <= 0 || d.OW <= 0 || d.OD <= 0)
        throw std::invalid_argument("conv3d: non-positive output extent");
    return d;
}

// Gathers the receptive-field columns of sample n: col[patch][ospatial].
void im2col(const double* x, const ConvDims& d, std::vector<double>& col) {
    const int64_t os = d.ospatial();
    col.assign(static_cast<size_t>(d.patch() * os), 0.0);
    int64_t r = 0;
    for (int64_t c = 0; c < d.C; ++c) {
        const double* xc = x + c * d.H * d.W * d.D;
        for (int64_t kh = 0; kh < d.K; ++kh)
            for (int64_t kw = 0; kw < d.K; ++kw)
                for (int64_t kd = 0; kd < d.K; ++kd, ++r) {
                    double* row = &col[r * os];
                    int64_t j = 0;
                    for (int64_t oh = 0; oh < d.OH; ++oh) {
                        const int64_t ih = oh * d.stride - d.padding + kh;
                        for (int64_t ow = 0; ow < d.OW; ++ow) {
                            const int64_t iw = ow * d.stride - d.padding + kw;
                            const bool hw_ok = ih >= 0 && ih < d.H && iw >= 0 && iw < d.W;
                            const double* base = xc + (ih * d.W + iw) * d.D;
                            for (int64_t od = 0; od < d.OD; ++od, ++j) {
                                const int64_t id = od * d.stride - d.padding + kd;
                                if (hw_ok && id >= 0 && id < d.D) row[j] = base[id];
                            }
                        }
                    }
                }
    }
}

// Scatters column gradients of sample n back onto the input gradient.
void col2im_accumulate(const std::vector<double>& dcol, const ConvDims& d, double* dx) {
    const int64_t os = d.ospatial();
    int64_t r = 0;
    for (int64_t c = 0; c < d.C; ++c) {
        double* xc = dx + c * d.H * d.W * d.D;
        for (int64_t kh = 0; kh < d.K; ++kh)
            for (int64_t kw = 0; kw < d.K; ++kw)
                for (int64_t kd = 0; kd < d.K; ++kd, ++r) {
                    const double* row = &dcol[r * os];
                    int64_t j = 0;
                    for (int64_t oh = 0; oh < d.OH; ++oh) {
                        const int64_t ih = oh * d.stride - d.padding + kh;
                        for (int64_t ow = 0; ow < d.OW; ++ow) {
                            const int64_t iw = ow * d.stride - d.padding + kw;
                            const bool hw_ok = ih >= 0 && ih < d.H && iw >= 0 && iw < d.W;
                            double* base = xc + (ih * d.W + iw) * d.D;
                            for (int64_t od = 0; od < d.OD; ++od, ++j) {
                                const int64_t id = od * d.stride - d.padding + kd;
                                if (hw_ok && id >= 0 && id < d.D) base[id] += row[j];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t padding) {
    const ConvDims d = conv_dims(x.shape(), w.shape(), stride, padding);
    if (b.shape() != Shape{d.O}) throw std::invalid_argument("conv3d: bias must be [O]");
    const int64_t os = d.ospatial();
    const int64_t patch = d.patch();

    std::vector<double> out(static_cast<size_t>(d.N * d.O * os));
    std::vector<double> col;
    for (int64_t n = 0; n < d.N; ++n) {
        im2col(&x.data()[n * d.C * d.H * d.W * d.D], d, col);
        for (int64_t o = 0; o < d.O; ++o) {
            double* dst = &out[(n * d.O + o) * os];
            std::fill(dst, dst + os, b.data()[o]);
            const double* wrow = &w.data()[o * patch];
            for (int64_t r = 0; r < patch; ++r) {
                const double wv = wrow[r];
                if (wv == 0.0) continue;
                const double* src = &col[r * os];
                for (int64_t j = 0; j < os; ++j) dst[j] += wv * src[j];
            }
        }
    }

    auto backprop = [x, w, b, d](TensorNode& node) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.node();
        const int64_t os = d.ospatial();
        const int64_t patch = d.patch();
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        std::vector<double> col, dcol;
        for (int64_t n = 0; n < d.N; ++n) {
            const double* dy = &node.grad[n * d.O * os];
            if (bn->requires_grad)
                for (int64_t o = 0; o < d.O; ++o) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < os; ++j) acc += dy[o * os + j];
                    bn->grad[o] += acc;
                }
            if (wn->requires_grad) {
                im2col(&xn->data[n * d.C * d.H * d.W * d.D], d, col);
                for (int64_t o = 0; o < d.O; ++o)
                    for (int64_t r = 0; r < patch; ++r) {
                        const double* src = &col[r * os];
                        const double* g = &dy[o * os];
                        double acc = 0.0;
                        for (int64_t j = 0; j < os; ++j) acc += g[j] * src[j];
                        wn->grad[o * patch + r] += acc;
                    }
            }
            if (xn->requires_grad) {
                dcol.assign(static_cast<size_t>(patch * os), 0.0);
                for (int64_t o = 0; o < d.O; ++o) {
                    const double* g = &dy[o * os];
                    const double* wrow = &wn->data[o * patch];
                    for (int64_t r = 0; r < patch; ++r) {
                        const double wv = wrow[r];
                        if (wv == 0.0) continue;
                        double* dst = &dcol[r * os];
                        for (int64_t j = 0; j < os; ++j) dst[j] += wv * g[j];
                    }
                }
                col2im_accumulate(dcol, d, &xn->grad[n * d.C * d.H * d.W * d.D]);
            }
        }
    };
    return make_op({d.N, d.O, d.OH, d.OW, d.OD}, std::move(out), {x, w, b}, std::move(backprop),
                   "conv3d");
}

Tensor maxpool3d(const Tensor& x, int64_t k, int64_t stride) {
    const Shape& s = x.shape();
    if (s.size() != 5) throw std::invalid_argument("maxpool3d: x must be rank 5");
    if (k <= 0 || stride <= 0) throw std::invalid_argument("maxpool3d: bad window");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    if (k > H || k > W || k > D) throw std::invalid_argument("maxpool3d: window larger than input");
    const int64_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1, OD = (D - k) / stride + 1;

    const int64_t n_out = N * C * OH * OW * OD;
    std::vector<double> out(static_cast<size_t>(n_out));
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n_out));
    int64_t j = 0;
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* base = &x.data()[nc * H * W * D];
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
                for (int64_t od = 0; od < OD; ++od, ++j) {
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_i = -1;
                    for (int64_t kh = 0; kh < k; ++kh)
                        for (int64_t kw = 0; kw < k; ++kw)
                            for (int64_t kd = 0; kd < k; ++kd) {
                                const int64_t i =
                                    ((oh * stride + kh) * W + ow * stride + kw) * D + od * stride + kd;
                                if (base[i] > best) {  // strict: first argmax wins ties
                                    best = base[i];
                                    best_i = i;
                                }
                            }
                    out[j] = best;
                    (*argmax)[j] = nc * H * W * D + best_i;
                }
    }

    auto backprop = [x, argmax](TensorNode& node) {
        auto xn = x.node();
        xn->ensure_grad();
        for (int64_t j = 0; j < node.numel(); ++j) xn->grad[(*argmax)[j]] += node.grad[j];
    };
    return make_op({N, C, OH, OW, OD}, std::move(out), {x}, std::move(backprop), "maxpool3d");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1)
        throw std::invalid_argument("linear: expects x [..,F_in], w [F_out,F_in], b [F_out]");
    const int64_t f_in = x.shape().back();
    const int64_t f_out = w.shape()[0];
    if (w.shape()[1] != f_in)
        throw std::invalid_argument("linear: w expects " + std::to_string(w.shape()[1]) +
                                    " input features, x has " + std::to_string(f_in));
    if (b.shape()[0] != f_out) throw std::invalid_argument("linear: bias size mismatch");
    const int64_t rows = x.numel() / f_in;

    Shape out_shape = x.shape();
    out_shape.back() = f_out;
    std::vector<double> out(static_cast<size_t>(rows * f_out));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = &x.data()[r * f_in];
        for (int64_t o = 0; o < f_out; ++o) {
            const double* wr = &w.data()[o * f_in];
            double acc = b.data()[o];
            for (int64_t i = 0; i < f_in; ++i) acc += xr[i] * wr[i];
            out[r * f_out + o] = acc;
        }
    }

    auto backprop = [x, w, b, rows, f_in, f_out](TensorNode& node) {
        auto xn = x.node();
        auto wn = w.node();
        auto bn = b.node();
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double* g = &node.grad[r * f_out];
            for (int64_t o = 0; o < f_out; ++o) {
                const double go = g[o];
                if (go == 0.0) continue;
                if (bn->requires_grad) bn->grad[o] += go;
                const double* wr = &wn->data[o * f_in];
                const double* xr = &xn->data[r * f_in];
                if (xn->requires_grad) {
                    double* dx = &xn->grad[r * f_in];
                    for (int64_t i = 0; i < f_in; ++i) dx[i] += go * wr[i];
                }
                if (wn->requires_grad) {
                    double* dw = &wn->grad[o * f_in];
                    for (int64_t i = 0; i < f_in; ++i) dw[i] += go * xr[i];
                }
            }
        }
    };
    return make_op(out_shape, std::move(out), {x, w, b}, std::move(backprop), "linear");
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    if (x.rank() < 2) throw std::invalid_argument("dropout: expects [N,C,..]");
    const int64_t channels = x.shape()[0] * x.shape()[1];
    const int64_t inner = x.numel() / channels;
    const double keep_scale = 1.0 / (1.0 - rate);

    auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(channels));
    for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : keep_scale;

    std::vector<double> out(static_cast<size_t>(x.numel()));
    for (int64_t c = 0; c < channels; ++c) {
        const double m = (*mask)[c];
        const double* src = &x.data()[c * inner];
        double* dst = &out[c * inner];
        for (int64_t i = 0; i < inner; ++i) dst[i] = src[i] * m;
    }

    auto backprop = [x, mask, channels, inner](TensorNode& node) {
        auto xn = x.node();
        xn->ensure_grad();
        for (int64_t c = 0; c < channels; ++c) {
            const double m = (*mask)[c];
            if (m == 0.0) continue;
            for (int64_t i = 0; i < inner; ++i) xn->grad[c * inner + i] += node.grad[c * inner + i] * m;
        }
    };
    return make_op(x.shape(), std::move(out), {x}, std::move(backprop), "dropout");
}

Tensor instance_norm(const Tensor& x, double eps) {
    if (x.rank() < 3) throw std::invalid_argument("instance_norm: expects [N,C,spatial..]");
    const int64_t groups = x.shape()[0] * x.shape()[1];
    const int64_t m = x.numel() / groups;

    std::vector<double> out(static_cast<size_t>(x.numel()));
    auto inv_sd = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
    for (int64_t g = 0; g < groups; ++g) {
        const double* src = &x.data()[g * m];
        double mean = 0.0;
        for (int64_t i = 0; i < m; ++i) mean += src[i];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (int64_t i = 0; i < m; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_sd)[g] = inv;
        double* dst = &out[g * m];
        for (int64_t i = 0; i < m; ++i) dst[i] = (src[i] - mean) * inv;
    }

    auto backprop = [x, inv_sd, groups, m](TensorNode& node) {
        auto xn = x.node();
        xn->ensure_grad();
        for (int64_t g = 0; g < groups; ++g) {
            const double inv = (*inv_sd)[g];
            const double* y = &node.data[g * m];
            const double* gy = &node.grad[g * m];
            double mean_g = 0.0, mean_gy = 0.0;
            for (int64_t i = 0; i < m; ++i) {
                mean_g += gy[i];
                mean_gy += gy[i] * y[i];
            }
            mean_g /= static_cast<double>(m);
            mean_gy /= static_cast<double>(m);
            double* dx = &xn->grad[g * m];
            for (int64_t i = 0; i < m; ++i) dx[i] += inv * (gy[i] - mean_g - y[i] * mean_gy);
        }
    };
    return make_op(x.shape(), std::move(out), {x}, std::move(backprop), "instance_norm");
}

Tensor upsample_nn2x(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 5) throw std::invalid_argument("upsample_nn2x: x must be rank 5");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    const Shape out_shape{N, C, 2 * H, 2 * W, 2 * D};

    std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* src = &x.data()[nc * H * W * D];
        double* dst = &out[nc * 8 * H * W * D];
        for (int64_t h = 0; h < 2 * H; ++h)
            for (int64_t w = 0; w < 2 * W; ++w)
                for (int64_t d = 0; d < 2 * D; ++d)
                    dst[(h * 2 * W + w) * 2 * D + d] = src[((h / 2) * W + w / 2) * D + d / 2];
    }

    auto backprop = [x, N, C, H, W, D](TensorNode& node) {
        auto xn = x.node();
        xn->ensure_grad();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const double* g = &node.grad[nc * 8 * H * W * D];
            double* dst = &xn->grad[nc * H * W * D];
            for (int64_t h = 0; h < 2 * H; ++h)
                for (int64_t w = 0; w < 2 * W; ++w)
                    for (int64_t d = 0; d < 2 * D; ++d)
                        dst[((h / 2) * W + w / 2) * D + d / 2] += g[(h * 2 * W + w) * 2 * D + d];
        }
    };
    return make_op(out_shape, std::move(out), {x}, std::move(backprop), "upsample_nn2x");
}

Tensor bce_with_logits(const Tensor& g, const Tensor& logit) {
    if (g.shape() != logit.shape())
        throw std::invalid_argument("bce_with_logits: shape mismatch " + shape_str(g.shape()) +
                                    " vs " + shape_str(logit.shape()));
    const int64_t n = g.numel();
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double z = logit.data()[i];
        const double t = g.data()[i];
        total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    const double inv_n = 1.0 / static_cast<double>(n);

    auto backprop = [g, logit, inv_n](TensorNode& node) {
        auto gn = g.node();
        auto zn = logit.node();
        if (gn->requires_grad) gn->ensure_grad();
        if (zn->requires_grad) zn->ensure_grad();
        const double upstream = node.grad[0];
        for (int64_t i = 0; i < zn->numel(); ++i) {
            const double z = zn->data[i];
            const double p = 1.0 / (1.0 + std::exp(-z));
            if (zn->requires_grad) zn->grad[i] += upstream * (p - gn->data[i]) * inv_n;
            if (gn->requires_grad) gn->grad[i] += upstream * (-z) * inv_n;
        }
    };
    return make_op(Shape{}, {total * inv_n}, {g, logit}, std::move(backprop), "bce_with_logits");
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    auto root = loss.node();
    if (!root) throw std::invalid_argument("backward: undefined tensor");
    if (root->numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(root->shape));
    if (root->backward_ran) throw std::runtime_error("backward: already ran for this loss");
    if (!root->requires_grad)
        throw std::runtime_error("backward: loss is detached from any differentiable graph");

    // Iterative post-order DFS; post-order reversed is a reverse topological order.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (!node->backprop) continue;  // leaf keeps its accumulated grad
        node->ensure_grad();
        node->backprop(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
    root->backward_ran = true;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double h) {
    x.node()->requires_grad = true;
    x.zero_grad();
    {
        Tensor loss = f(x);
        if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
        backward(loss);
    }
    std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
    if (x.has_grad()) analytic = x.grad();

    double worst = 0.0;
    auto& data = x.mutable_data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double up = f(x).item();
        data[i] = saved - h;
        const double down = f(x).item();
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace caspian
