#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "caspian/rng.hpp"

namespace caspian {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);

struct TensorNode;
class Tensor;

// A node of the recorded computation graph. The chain of nodes reachable
// through `parents` is the tape: backward() walks it in reverse topological
// order exactly once, accumulating gradients additively at fan-out points.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily; same length as data when present
    bool requires_grad = false;
    bool backward_ran = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Pulls this node's grad into the parents' grad buffers.
    std::function<void(TensorNode&)> backprop;
    const char* op = "leaf";

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

enum class OpKind { add, sub, mul, div, relu, sigmoid, log, sqrt, square, negate };

// Value-semantic handle to a graph node. All operations return fresh nodes;
// tape-tracked tensors are never mutated in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return node_->numel(); }
    int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& data() const { return node_->data; }
    std::vector<double>& mutable_data() { return node_->data; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    // Value of a one-element tensor.
    double item() const;
    double at(std::initializer_list<int64_t> index) const;

    std::shared_ptr<TensorNode> node() const { return node_; }

    // Constant copy sharing no graph history.
    Tensor detach() const;

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;

    friend Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backprop, const char* op);
};

// Builds a graph node for a custom operation. `backprop` is dropped when no
// parent requires gradients, so constant subgraphs do not grow the tape.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backprop, const char* op);

// --- elementwise ops (binary kinds broadcast, size-1 extents stretch) ---
Tensor elementwise(OpKind kind, const Tensor& a);
Tensor elementwise(OpKind kind, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor negate(const Tensor& a);
// Unary with a constant floor; gradient passes where a > floor.
Tensor clamp_min(const Tensor& a, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

// --- structural ops ---
Tensor reduce_sum(const Tensor& a, const std::vector<int64_t>& axes, bool keep_dims);
Tensor reduce_sum_all(const Tensor& a);  // rank-0 result
Tensor flip(const Tensor& a, int64_t axis);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice(const Tensor& a, int64_t axis, int64_t start, int64_t length);
Tensor concat(const Tensor& a, const Tensor& b, int64_t axis);

// --- network primitives ---
// x: [N,C,H,W,D], w: [O,C,k,k,k], b: [O]; cross-correlation, odd k.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t padding);
// Windowed maxima; gradient routes to the first (lowest linear index) argmax.
Tensor maxpool3d(const Tensor& x, int64_t k, int64_t stride);
// x: [..,F_in], w: [F_out,F_in], b: [F_out] -> [..,F_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Channel-wise (spatial) dropout over [N,C,...]; eval mode is the identity.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);
// Per (n, c) standardization over the spatial axes of [N,C,...].
Tensor instance_norm(const Tensor& x, double eps = 1e-5);
// Nearest-neighbour doubling of the three spatial axes of [N,C,H,W,D].
Tensor upsample_nn2x(const Tensor& x);
// Numerically stable mean of -[g log p + (1-g) log(1-p)], p = sigmoid(logit).
Tensor bce_with_logits(const Tensor& g, const Tensor& logit);

// Reverse pass from a one-element loss. Every requires_grad leaf receives its
// gradient; calling twice on the same loss node is an error.
void backward(const Tensor& loss);

// Max over entries of |analytic - central difference| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x, double h = 1e-5);

}  // namespace caspian
