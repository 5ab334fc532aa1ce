#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a handle to a graph node. Operations on Vars that require gradients
// record a backward closure; hmdr::ag::backward() walks the graph in reverse
// topological order. Image tensors are laid out NCHW, where N is the frame
// axis of a clip.

#include "hmdr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace hmdr::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    /// Leaf that accumulates gradients.
    static Var parameter(Tensor value) { return Var(std::move(value), true); }
    static Var constant(Tensor value) { return Var(std::move(value), false); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    /// Direct access for optimizers and initializers. Do not use on graph interior nodes.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int axis) const { return node_->value.dim(axis); }
    std::size_t size() const { return node_->value.size(); }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    /// Gradient tensor, allocated as zeros on first access.
    Tensor& grad();
    void zero_grad();

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

    const std::shared_ptr<Node>& node() const noexcept { return node_; }
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// `root` must hold exactly one element.
void backward(const Var& root);

bool grad_enabled() noexcept;

/// Disables graph construction for the guard's lifetime (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Re-enables graph construction for the guard's lifetime (e.g. an input-gradient
/// probe evaluated inside a no-grad region).
class EnableGradGuard {
public:
    EnableGradGuard();
    ~EnableGradGuard();
    EnableGradGuard(const EnableGradGuard&) = delete;
    EnableGradGuard& operator=(const EnableGradGuard&) = delete;

private:
    bool previous_;
};

// ---- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& x, double c);
Var mul_scalar(const Var& x, double c);
/// x * s where s holds a single element.
Var scale(const Var& x, const Var& s);
Var neg(const Var& x);
Var sigmoid(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var exp(const Var& x);
Var log(const Var& x);
Var abs(const Var& x);
Var square(const Var& x);
/// sqrt(x + eps)
Var sqrt(const Var& x, double eps = 0.0);
/// Elementwise Huber of a residual: r^2/2 inside |r| <= delta, delta|r| - delta^2/2 outside.
Var huber(const Var& residual, double delta);
/// out = where(mask != 0, a, b); mask is a constant with the same shape as a and b.
Var where(const Tensor& mask, const Var& a, const Var& b);
/// tangent * d/dx leaky_relu(pre); `pre` is treated as a constant.
Var leaky_relu_tangent(const Var& pre, const Var& tangent, double slope);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double c, const Var& x) { return mul_scalar(x, c); }
inline Var operator*(const Var& x, double c) { return mul_scalar(x, c); }

// ---- reductions -------------------------------------------------------------

Var sum(const Var& x);
Var mean(const Var& x);

// ---- shape ------------------------------------------------------------------

Var reshape(const Var& x, Shape shape);
/// Concatenation along `axis`; all other dimensions must agree.
Var concat(const std::vector<Var>& parts, int axis);
/// x[..., begin:end, ...] along `axis`.
Var slice(const Var& x, int axis, int begin, int end);
/// Repeats a tensor with leading dimension 1 `count` times along axis 0.
Var repeat_leading(const Var& x, int count);
/// Rows of a rank-2 tensor (or leading-axis slices of any rank) selected by index.
Var gather(const Var& x, const std::vector<int>& index);

// ---- linear algebra ---------------------------------------------------------

/// Batched matrix product over rank-3 tensors, optionally transposing either operand.
Var bmm(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
/// x [N, in] * w^T [in, out] + bias [out]; bias may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);
/// A x + offset with constant A (rows x cols, row-major) and offset (rows).
Var affine_const(const Tensor& matrix, const Var& x, const Tensor& offset);
/// Softmax along the last axis.
Var softmax(const Var& x);
/// Applies a 3x4 affine transform (row-major, last column translation) to points [V, 3].
Var apply_affine(const Var& pose, const Var& points);

// ---- image ------------------------------------------------------------------

struct Conv2dSpec {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};

int conv_output_size(int input, int kernel, const Conv2dSpec& spec);

/// x [N, C, H, W], weight [O, C, KH, KW], bias [O] (may be undefined).
Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dSpec& spec);
/// Non-overlapping average pooling with window and stride `k`; trailing rows/columns are dropped.
Var avg_pool2d(const Var& x, int k);
Var upsample_nearest2x(const Var& x);
/// [N, C, H, W] -> [N, C]
Var global_avg_pool(const Var& x);
/// Per-image Gram matrices [N, C, C] of [N, C, H, W], divided by C*H*W.
Var gram(const Var& x);
/// Per-channel temporal mixing. x [T, C, H, W]; kernel [S, 3] mixes the first S channels
/// with taps at t-1, t, t+1 (zero outside the clip). Other channels pass through.
Var temporal_shift(const Var& x, const Var& kernel);
/// y [N, 2C, H, W] -> act(y[:, :C]) * sigmoid(y[:, C:]), act = leaky_relu(slope).
Var gated_activation(const Var& y, double slope);

/// Order-dependent FNV-1a digest of parameter bytes.
std::uint64_t checksum(const std::vector<Var>& params);

} // namespace hmdr::ag
