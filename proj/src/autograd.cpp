#include "hmdr/autograd.hpp"

#include "hmdr/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>
#include <utility>

namespace hmdr::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

Var make_result(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool tracked = false;
    if (g_grad_enabled) {
        for (const Var& v : inputs) {
            tracked = tracked || v.requires_grad();
        }
    }
    if (tracked) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const Var& v : inputs) {
            node->inputs.push_back(v.defined() ? v.node() : nullptr);
        }
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

Var make_result_vec(Tensor value, const std::vector<Var>& inputs, BackwardFn fn)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool tracked = false;
    if (g_grad_enabled) {
        for (const Var& v : inputs) {
            tracked = tracked || v.requires_grad();
        }
    }
    if (tracked) {
        node->requires_grad = true;
        for (const Var& v : inputs) {
            node->inputs.push_back(v.node());
        }
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

bool wants(const std::shared_ptr<Node>& n)
{
    return n && n->requires_grad;
}

Tensor& grad_of(Node& n)
{
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
        n.grad = Tensor(n.value.shape(), 0.0);
    }
    return n.grad;
}

void require_same_shape(const Var& a, const Var& b, const char* op)
{
    if (a.shape() != b.shape()) {
        throw InvalidInput(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
}

void require_rank(const Var& x, int rank, const char* op)
{
    if (x.value().rank() != rank) {
        throw InvalidInput(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                           shape_str(x.shape()));
    }
}

// Elementwise unary op; df(x, y) returns dy/dx.
template <class F, class DF>
Var unary(const Var& x, F f, DF df)
{
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = f(xv[i]);
    }
    return make_result(std::move(out), {x}, [df](Node& self) {
        Node& in = *self.inputs[0];
        Tensor& g = grad_of(in);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * df(in.value[i], self.value[i]);
        }
    });
}

} // namespace

// ---- Var ----------------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

double Var::item() const
{
    if (size() != 1) {
        throw InvalidInput("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

Tensor& Var::grad()
{
    return grad_of(*node_);
}

void Var::zero_grad()
{
    if (node_ && !node_->grad.empty()) {
        node_->grad.fill(0.0);
    }
}

bool grad_enabled() noexcept
{
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled)
{
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard()
{
    g_grad_enabled = previous_;
}

EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled)
{
    g_grad_enabled = true;
}

EnableGradGuard::~EnableGradGuard()
{
    g_grad_enabled = previous_;
}

void backward(const Var& root)
{
    if (root.size() != 1) {
        throw InvalidInput("backward() requires a scalar root, got " + shape_str(root.shape()));
    }
    if (!root.requires_grad()) {
        return;
    }
    // Iterative post-order DFS yields a topological order (inputs before consumers).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child && child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    grad_of(*root.node())[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward || node->grad.empty()) {
            continue;
        }
        node->backward(*node);
        // Interior gradients are not needed once propagated.
        node->grad = Tensor();
    }
}

// ---- elementwise --------------------------------------------------------------

Var add(const Var& a, const Var& b)
{
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.value()[i] + b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            if (wants(self.inputs[k])) {
                Tensor& g = grad_of(*self.inputs[k]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.value()[i] - b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [](Node& self) {
        if (wants(self.inputs[0])) {
            Tensor& g = grad_of(*self.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (wants(self.inputs[1])) {
            Tensor& g = grad_of(*self.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] -= self.grad[i];
            }
        }
    });
}

Var mul(const Var& a, const Var& b)
{
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.value()[i] * b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        if (wants(self.inputs[0])) {
            Tensor& g = grad_of(*self.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * bv[i];
            }
        }
        if (wants(self.inputs[1])) {
            Tensor& g = grad_of(*self.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * av[i];
            }
        }
    });
}

Var add_scalar(const Var& x, double c)
{
    return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& x, double c)
{
    return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Var scale(const Var& x, const Var& s)
{
    if (s.size() != 1) {
        throw InvalidInput("scale: factor must hold one element");
    }
    const double factor = s.value()[0];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = x.value()[i] * factor;
    }
    return make_result(std::move(out), {x, s}, [](Node& self) {
        const Tensor& xv = self.inputs[0]->value;
        const double f = self.inputs[1]->value[0];
        if (wants(self.inputs[0])) {
            Tensor& g = grad_of(*self.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * f;
            }
        }
        if (wants(self.inputs[1])) {
            double acc = 0.0;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                acc += self.grad[i] * xv[i];
            }
            grad_of(*self.inputs[1])[0] += acc;
        }
    });
}

Var neg(const Var& x)
{
    return mul_scalar(x, -1.0);
}

Var sigmoid(const Var& x)
{
    return unary(
        x,
        [](double v) {
            if (v >= 0) {
                return 1.0 / (1.0 + std::exp(-v));
            }
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var leaky_relu(const Var& x, double slope)
{
    return unary(
        x, [slope](double v) { return v > 0 ? v : slope * v; },
        [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var exp(const Var& x)
{
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x)
{
    return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var abs(const Var& x)
{
    return unary(
        x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var square(const Var& x)
{
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(const Var& x, double eps)
{
    return unary(
        x, [eps](double v) { return std::sqrt(v + eps); }, [](double, double y) { return 0.5 / y; });
}

Var huber(const Var& residual, double delta)
{
    if (!(delta > 0)) {
        throw InvalidInput("huber: delta must be positive");
    }
    return unary(
        residual,
        [delta](double r) {
            const double a = std::abs(r);
            return a <= delta ? 0.5 * r * r : delta * a - 0.5 * delta * delta;
        },
        [delta](double r, double) {
            if (std::abs(r) <= delta) {
                return r;
            }
            return r > 0 ? delta : -delta;
        });
}

Var where(const Tensor& mask, const Var& a, const Var& b)
{
    require_same_shape(a, b, "where");
    if (mask.shape() != a.shape()) {
        throw InvalidInput("where: mask shape " + shape_str(mask.shape()) + " vs " + shape_str(a.shape()));
    }
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = mask[i] != 0.0 ? a.value()[i] : b.value()[i];
    }
    return make_result(std::move(out), {a, b}, [mask](Node& self) {
        if (wants(self.inputs[0])) {
            Tensor& g = grad_of(*self.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (mask[i] != 0.0) {
                    g[i] += self.grad[i];
                }
            }
        }
        if (wants(self.inputs[1])) {
            Tensor& g = grad_of(*self.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (mask[i] == 0.0) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

Var leaky_relu_tangent(const Var& pre, const Var& tangent, double slope)
{
    require_same_shape(pre, tangent, "leaky_relu_tangent");
    Tensor slopes(pre.shape());
    for (std::size_t i = 0; i < slopes.size(); ++i) {
        slopes[i] = pre.value()[i] > 0 ? 1.0 : slope;
    }
    Tensor out(pre.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = tangent.value()[i] * slopes[i];
    }
    return make_result(std::move(out), {tangent}, [slopes = std::move(slopes)](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * slopes[i];
        }
    });
}

// ---- reductions -----------------------------------------------------------------

Var sum(const Var& x)
{
    const double total = std::accumulate(x.value().vec().begin(), x.value().vec().end(), 0.0);
    return make_result(Tensor({1}, {total}), {x}, [](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        const double d = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += d;
        }
    });
}

Var mean(const Var& x)
{
    if (x.size() == 0) {
        throw InvalidInput("mean of empty tensor");
    }
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- shape ----------------------------------------------------------------------

Var reshape(const Var& x, Shape shape)
{
    Tensor out = x.value().reshaped(std::move(shape));
    return make_result(std::move(out), {x}, [](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

namespace {

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis)
{
    AxisSplit s;
    for (int i = 0; i < axis; ++i) {
        s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    }
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
        s.inner *= static_cast<std::size_t>(shape[i]);
    }
    return s;
}

} // namespace

Var concat(const std::vector<Var>& parts, int axis)
{
    if (parts.empty()) {
        throw InvalidInput("concat: no inputs");
    }
    const Shape& first = parts.front().shape();
    if (axis < 0 || axis >= static_cast<int>(first.size())) {
        throw InvalidInput("concat: axis out of range");
    }
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = 0;
    for (const Var& p : parts) {
        Shape s = p.shape();
        if (s.size() != first.size()) {
            throw InvalidInput("concat: rank mismatch");
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int>(i) != axis && s[i] != first[i]) {
                throw InvalidInput("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
            }
        }
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    const AxisSplit split = split_at(out_shape, axis);
    const std::size_t out_row = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]) * split.inner;
    Tensor out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        offsets.push_back(offset);
        const std::size_t row = static_cast<std::size_t>(p.dim(axis)) * split.inner;
        for (std::size_t o = 0; o < split.outer; ++o) {
            std::copy_n(p.value().data() + o * row, row, out.data() + o * out_row + offset);
        }
        offset += row;
    }
    return make_result_vec(std::move(out), parts, [split, out_row, offsets](Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            if (!wants(self.inputs[k])) {
                continue;
            }
            Tensor& g = grad_of(*self.inputs[k]);
            const std::size_t row = g.size() / split.outer;
            for (std::size_t o = 0; o < split.outer; ++o) {
                const double* src = self.grad.data() + o * out_row + offsets[k];
                double* dst = g.data() + o * row;
                for (std::size_t i = 0; i < row; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
}

Var slice(const Var& x, int axis, int begin, int end)
{
    const Shape& in_shape = x.shape();
    if (axis < 0 || axis >= static_cast<int>(in_shape.size()) || begin < 0 || end < begin ||
        end > in_shape[static_cast<std::size_t>(axis)]) {
        throw InvalidInput("slice: invalid range on " + shape_str(in_shape));
    }
    Shape out_shape = in_shape;
    out_shape[static_cast<std::size_t>(axis)] = end - begin;
    const AxisSplit split = split_at(in_shape, axis);
    const std::size_t in_row = static_cast<std::size_t>(in_shape[static_cast<std::size_t>(axis)]) * split.inner;
    const std::size_t out_row = static_cast<std::size_t>(end - begin) * split.inner;
    const std::size_t offset = static_cast<std::size_t>(begin) * split.inner;
    Tensor out(out_shape);
    for (std::size_t o = 0; o < split.outer; ++o) {
        std::copy_n(x.value().data() + o * in_row + offset, out_row, out.data() + o * out_row);
    }
    return make_result(std::move(out), {x}, [split, in_row, out_row, offset](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src = self.grad.data() + o * out_row;
            double* dst = g.data() + o * in_row + offset;
            for (std::size_t i = 0; i < out_row; ++i) {
                dst[i] += src[i];
            }
        }
    });
}

Var repeat_leading(const Var& x, int count)
{
    if (x.value().rank() < 1 || x.dim(0) != 1 || count < 1) {
        throw InvalidInput("repeat_leading: expected leading dimension 1, got " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[0] = count;
    Tensor out(out_shape);
    const std::size_t n = x.size();
    for (int c = 0; c < count; ++c) {
        std::copy_n(x.value().data(), n, out.data() + static_cast<std::size_t>(c) * n);
    }
    return make_result(std::move(out), {x}, [n, count](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (int c = 0; c < count; ++c) {
            const double* src = self.grad.data() + static_cast<std::size_t>(c) * n;
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += src[i];
            }
        }
    });
}

Var gather(const Var& x, const std::vector<int>& index)
{
    if (x.value().rank() < 1) {
        throw InvalidInput("gather: scalar input");
    }
    const int rows = x.dim(0);
    const std::size_t row = rows > 0 ? x.size() / static_cast<std::size_t>(rows) : 0;
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<int>(index.size());
    Tensor out(out_shape);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= rows) {
            throw InvalidInput("gather: index " + std::to_string(index[i]) + " out of range");
        }
        std::copy_n(x.value().data() + static_cast<std::size_t>(index[i]) * row, row, out.data() + i * row);
    }
    return make_result(std::move(out), {x}, [index, row](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t i = 0; i < index.size(); ++i) {
            double* dst = g.data() + static_cast<std::size_t>(index[i]) * row;
            const double* src = self.grad.data() + i * row;
            for (std::size_t k = 0; k < row; ++k) {
                dst[k] += src[k];
            }
        }
    });
}

// ---- linear algebra -------------------------------------------------------------

Var bmm(const Var& a, const Var& b, bool transpose_a, bool transpose_b)
{
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const int batch = a.dim(0);
    if (b.dim(0) != batch) {
        throw InvalidInput("bmm: batch mismatch");
    }
    const int a_rows = a.dim(1), a_cols = a.dim(2);
    const int b_rows = b.dim(1), b_cols = b.dim(2);
    const int m = transpose_a ? a_cols : a_rows;
    const int k = transpose_a ? a_rows : a_cols;
    const int kb = transpose_b ? b_cols : b_rows;
    const int n = transpose_b ? b_rows : b_cols;
    if (k != kb) {
        throw InvalidInput("bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out({batch, m, n});
    const std::size_t a_step = static_cast<std::size_t>(a_rows) * a_cols;
    const std::size_t b_step = static_cast<std::size_t>(b_rows) * b_cols;
    const std::size_t c_step = static_cast<std::size_t>(m) * n;
    for (int i = 0; i < batch; ++i) {
        ConstMatMap am(a.value().data() + i * a_step, a_rows, a_cols);
        ConstMatMap bm(b.value().data() + i * b_step, b_rows, b_cols);
        MatMap cm(out.data() + i * c_step, m, n);
        if (transpose_a && transpose_b) {
            cm.noalias() = am.transpose() * bm.transpose();
        } else if (transpose_a) {
            cm.noalias() = am.transpose() * bm;
        } else if (transpose_b) {
            cm.noalias() = am * bm.transpose();
        } else {
            cm.noalias() = am * bm;
        }
    }
    return make_result(std::move(out), {a, b},
                       [=](Node& self) {
                           const Tensor& av = self.inputs[0]->value;
                           const Tensor& bv = self.inputs[1]->value;
                           for (int i = 0; i < batch; ++i) {
                               ConstMatMap am(av.data() + i * a_step, a_rows, a_cols);
                               ConstMatMap bm(bv.data() + i * b_step, b_rows, b_cols);
                               ConstMatMap dc(self.grad.data() + i * c_step, m, n);
                               // C = opA(A) opB(B)
                               if (wants(self.inputs[0])) {
                                   MatMap da(grad_of(*self.inputs[0]).data() + i * a_step, a_rows, a_cols);
                                   if (!transpose_a && !transpose_b) {
                                       da.noalias() += dc * bm.transpose();
                                   } else if (!transpose_a && transpose_b) {
                                       da.noalias() += dc * bm;
                                   } else if (transpose_a && !transpose_b) {
                                       da.noalias() += bm * dc.transpose();
                                   } else {
                                       da.noalias() += bm.transpose() * dc.transpose();
                                   }
                               }
                               if (wants(self.inputs[1])) {
                                   MatMap db(grad_of(*self.inputs[1]).data() + i * b_step, b_rows, b_cols);
                                   if (!transpose_a && !transpose_b) {
                                       db.noalias() += am.transpose() * dc;
                                   } else if (!transpose_a && transpose_b) {
                                       db.noalias() += dc.transpose() * am;
                                   } else if (transpose_a && !transpose_b) {
                                       db.noalias() += am * dc;
                                   } else {
                                       db.noalias() += dc.transpose() * am.transpose();
                                   }
                               }
                           }
                       });
}

Var linear(const Var& x, const Var& weight, const Var& bias)
{
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const int n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        throw InvalidInput("linear: input width " + std::to_string(in) + " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && bias.size() != static_cast<std::size_t>(out_dim)) {
        throw InvalidInput("linear: bias size mismatch");
    }
    Tensor out({n, out_dim});
    ConstMatMap xm(x.value().data(), n, in);
    ConstMatMap wm(weight.value().data(), out_dim, in);
    MatMap ym(out.data(), n, out_dim);
    ym.noalias() = xm * wm.transpose();
    if (bias.defined()) {
        ConstVecMap bv(bias.value().data(), out_dim);
        ym.rowwise() += bv.transpose();
    }
    return make_result(std::move(out), {x, weight, bias}, [n, in, out_dim](Node& self) {
        ConstMatMap dy(self.grad.data(), n, out_dim);
        ConstMatMap xm(self.inputs[0]->value.data(), n, in);
        ConstMatMap wm(self.inputs[1]->value.data(), out_dim, in);
        if (wants(self.inputs[0])) {
            MatMap dx(grad_of(*self.inputs[0]).data(), n, in);
            dx.noalias() += dy * wm;
        }
        if (wants(self.inputs[1])) {
            MatMap dw(grad_of(*self.inputs[1]).data(), out_dim, in);
            dw.noalias() += dy.transpose() * xm;
        }
        if (wants(self.inputs[2])) {
            VecMap db(grad_of(*self.inputs[2]).data(), out_dim);
            db += dy.colwise().sum().transpose();
        }
    });
}

Var affine_const(const Tensor& matrix, const Var& x, const Tensor& offset)
{
    if (matrix.rank() != 2) {
        throw InvalidInput("affine_const: matrix must be rank 2");
    }
    const int rows = matrix.dim(0), cols = matrix.dim(1);
    if (cols == 0 || x.size() % static_cast<std::size_t>(cols) != 0) {
        throw InvalidInput("affine_const: input size " + std::to_string(x.size()) + " incompatible with " +
                           shape_str(matrix.shape()));
    }
    if (offset.size() != static_cast<std::size_t>(rows)) {
        throw InvalidInput("affine_const: offset size mismatch");
    }
    const int batch = static_cast<int>(x.size() / static_cast<std::size_t>(cols));
    Shape out_shape = x.value().rank() == 1 ? Shape{rows} : Shape{batch, rows};
    Tensor out(out_shape);
    ConstMatMap a(matrix.data(), rows, cols);
    ConstMatMap xm(x.value().data(), batch, cols);
    MatMap ym(out.data(), batch, rows);
    ym.noalias() = xm * a.transpose();
    ym.rowwise() += ConstVecMap(offset.data(), rows).transpose();
    if (!(grad_enabled() && x.requires_grad())) {
        return make_result(std::move(out), {x}, nullptr);
    }
    auto shared = std::make_shared<const Tensor>(matrix);
    return make_result(std::move(out), {x}, [shared, rows, cols, batch](Node& self) {
        ConstMatMap a(shared->data(), rows, cols);
        ConstMatMap dy(self.grad.data(), batch, rows);
        MatMap dx(grad_of(*self.inputs[0]).data(), batch, cols);
        dx.noalias() += dy * a;
    });
}

Var softmax(const Var& x)
{
    if (x.value().rank() < 1) {
        throw InvalidInput("softmax: scalar input");
    }
    const int width = x.shape().back();
    const std::size_t rows = width > 0 ? x.size() / static_cast<std::size_t>(width) : 0;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.value().data() + r * width;
        double* o = out.data() + r * width;
        const double mx = *std::max_element(in, in + width);
        double total = 0.0;
        for (int i = 0; i < width; ++i) {
            o[i] = std::exp(in[i] - mx);
            total += o[i];
        }
        for (int i = 0; i < width; ++i) {
            o[i] /= total;
        }
    }
    return make_result(std::move(out), {x}, [rows, width](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * width;
            const double* dy = self.grad.data() + r * width;
            double dot = 0.0;
            for (int i = 0; i < width; ++i) {
                dot += dy[i] * y[i];
            }
            double* dx = g.data() + r * width;
            for (int i = 0; i < width; ++i) {
                dx[i] += y[i] * (dy[i] - dot);
            }
        }
    });
}

Var apply_affine(const Var& pose, const Var& points)
{
    // pose [3,4] or [B,3,4]; points [V,3] or [B,V,3]
    const bool batched = pose.value().rank() == 3;
    const int batch = batched ? pose.dim(0) : 1;
    if (pose.size() != static_cast<std::size_t>(batch) * 12) {
        throw InvalidInput("apply_affine: pose must be [3,4] or [B,3,4], got " + shape_str(pose.shape()));
    }
    if (points.size() % (static_cast<std::size_t>(batch) * 3) != 0 || points.shape().back() != 3) {
        throw InvalidInput("apply_affine: points must be [..., 3], got " + shape_str(points.shape()));
    }
    const int v = static_cast<int>(points.size() / (static_cast<std::size_t>(batch) * 3));
    Tensor out(points.shape());
    for (int b = 0; b < batch; ++b) {
        ConstMatMap p(pose.value().data() + b * 12, 3, 4);
        ConstMatMap x(points.value().data() + static_cast<std::size_t>(b) * v * 3, v, 3);
        MatMap y(out.data() + static_cast<std::size_t>(b) * v * 3, v, 3);
        y.noalias() = x * p.leftCols(3).transpose();
        y.rowwise() += p.col(3).transpose();
    }
    return make_result(std::move(out), {pose, points}, [batch, v](Node& self) {
        for (int b = 0; b < batch; ++b) {
            ConstMatMap p(self.inputs[0]->value.data() + b * 12, 3, 4);
            ConstMatMap x(self.inputs[1]->value.data() + static_cast<std::size_t>(b) * v * 3, v, 3);
            ConstMatMap dy(self.grad.data() + static_cast<std::size_t>(b) * v * 3, v, 3);
            if (wants(self.inputs[0])) {
                MatMap dp(grad_of(*self.inputs[0]).data() + b * 12, 3, 4);
                dp.leftCols(3).noalias() += dy.transpose() * x;
                dp.col(3) += dy.colwise().sum().transpose();
            }
            if (wants(self.inputs[1])) {
                MatMap dx(grad_of(*self.inputs[1]).data() + static_cast<std::size_t>(b) * v * 3, v, 3);
                dx.noalias() += dy * p.leftCols(3);
            }
        }
    });
}

// ---- image ----------------------------------------------------------------------

int conv_output_size(int input, int kernel, const Conv2dSpec& spec)
{
    const int effective = spec.dilation * (kernel - 1) + 1;
    const int span = input + 2 * spec.padding - effective;
    if (span < 0) {
        return 0;
    }
    return span / spec.stride + 1;
}

namespace {

struct ConvGeometry {
    int c, h, w, kh, kw, ho, wo;
    Conv2dSpec spec;
    int rows() const { return c * kh * kw; }
    int cols() const { return ho * wo; }
    bool trivial() const
    {
        return kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;
    }
};

void im2col(const double* x, const ConvGeometry& g, double* cols)
{
    const int out_n = g.cols();
    for (int c = 0; c < g.c; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                double* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * out_n;
                const double* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oi = 0; oi < g.ho; ++oi) {
                    const int ii = oi * g.spec.stride - g.spec.padding + ki * g.spec.dilation;
                    double* dst = row + oi * g.wo;
                    if (ii < 0 || ii >= g.h) {
                        std::fill_n(dst, g.wo, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(ii) * g.w;
                    for (int oj = 0; oj < g.wo; ++oj) {
                        const int jj = oj * g.spec.stride - g.spec.padding + kj * g.spec.dilation;
                        dst[oj] = (jj >= 0 && jj < g.w) ? src[jj] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvGeometry& g, double* x)
{
    const int out_n = g.cols();
    for (int c = 0; c < g.c; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const double* row = cols + static_cast<std::size_t>((c * g.kh + ki) * g.kw + kj) * out_n;
                double* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
                for (int oi = 0; oi < g.ho; ++oi) {
                    const int ii = oi * g.spec.stride - g.spec.padding + ki * g.spec.dilation;
                    if (ii < 0 || ii >= g.h) {
                        continue;
                    }
                    double* dst = plane + static_cast<std::size_t>(ii) * g.w;
                    const double* src = row + oi * g.wo;
                    for (int oj = 0; oj < g.wo; ++oj) {
                        const int jj = oj * g.spec.stride - g.spec.padding + kj * g.spec.dilation;
                        if (jj >= 0 && jj < g.w) {
                            dst[jj] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

} // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, const Conv2dSpec& spec)
{
    require_rank(x, 4, "conv2d");
    require_rank(weight, 4, "conv2d");
    if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0) {
        throw InvalidInput("conv2d: invalid stride/dilation/padding");
    }
    const int n = x.dim(0);
    const int out_c = weight.dim(0);
    ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), 0, 0, spec};
    if (weight.dim(1) != g.c) {
        throw InvalidInput("conv2d: input channels " + std::to_string(g.c) + " vs weight " +
                           shape_str(weight.shape()));
    }
    if (bias.defined() && bias.size() != static_cast<std::size_t>(out_c)) {
        throw InvalidInput("conv2d: bias size mismatch");
    }
    g.ho = conv_output_size(g.h, g.kh, spec);
    g.wo = conv_output_size(g.w, g.kw, spec);
    if (g.ho <= 0 || g.wo <= 0) {
        throw InvalidInput("conv2d: input " + shape_str(x.shape()) + " too small for kernel");
    }
    Tensor out({n, out_c, g.ho, g.wo});
    const std::size_t in_step = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_step = static_cast<std::size_t>(out_c) * g.cols();
    Storage cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
    ConstMatMap wm(weight.value().data(), out_c, g.rows());
    for (int i = 0; i < n; ++i) {
        const double* col_ptr = x.value().data() + i * in_step;
        if (!g.trivial()) {
            im2col(col_ptr, g, cols.data());
            col_ptr = cols.data();
        }
        ConstMatMap cm(col_ptr, g.rows(), g.cols());
        MatMap ym(out.data() + i * out_step, out_c, g.cols());
        ym.noalias() = wm * cm;
        if (bias.defined()) {
            ym.colwise() += ConstVecMap(bias.value().data(), out_c);
        }
    }
    return make_result(std::move(out), {x, weight, bias}, [g, n, out_c, in_step, out_step](Node& self) {
        const Tensor& xv = self.inputs[0]->value;
        ConstMatMap wm(self.inputs[1]->value.data(), out_c, g.rows());
        const bool need_x = wants(self.inputs[0]);
        const bool need_w = wants(self.inputs[1]);
        const bool need_b = wants(self.inputs[2]);
        Storage cols(g.trivial() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
        Storage dcols(need_x && !g.trivial() ? cols.size() : 0);
        for (int i = 0; i < n; ++i) {
            ConstMatMap dy(self.grad.data() + i * out_step, out_c, g.cols());
            if (need_w) {
                const double* col_ptr = xv.data() + i * in_step;
                if (!g.trivial()) {
                    im2col(col_ptr, g, cols.data());
                    col_ptr = cols.data();
                }
                ConstMatMap cm(col_ptr, g.rows(), g.cols());
                MatMap dw(grad_of(*self.inputs[1]).data(), out_c, g.rows());
                dw.noalias() += dy * cm.transpose();
            }
            if (need_b) {
                VecMap db(grad_of(*self.inputs[2]).data(), out_c);
                db += dy.rowwise().sum();
            }
            if (need_x) {
                double* dx = grad_of(*self.inputs[0]).data() + i * in_step;
                if (g.trivial()) {
                    MatMap dxm(dx, g.rows(), g.cols());
                    dxm.noalias() += wm.transpose() * dy;
                } else {
                    MatMap dcm(dcols.data(), g.rows(), g.cols());
                    dcm.noalias() = wm.transpose() * dy;
                    col2im(dcols.data(), g, dx);
                }
            }
        }
    });
}

Var avg_pool2d(const Var& x, int k)
{
    require_rank(x, 4, "avg_pool2d");
    if (k < 1) {
        throw InvalidInput("avg_pool2d: window must be positive");
    }
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h / k, wo = w / k;
    if (ho < 1 || wo < 1) {
        throw InvalidInput("avg_pool2d: input smaller than window");
    }
    const double inv = 1.0 / (k * k);
    Tensor out({n, c, ho, wo});
    for (int p = 0; p < n * c; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int i = 0; i < ho * k; ++i) {
            for (int j = 0; j < wo * k; ++j) {
                dst[(i / k) * wo + j / k] += src[i * w + j] * inv;
            }
        }
    }
    return make_result(std::move(out), {x}, [n, c, h, w, ho, wo, k, inv](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (int p = 0; p < n * c; ++p) {
            const double* src = self.grad.data() + static_cast<std::size_t>(p) * ho * wo;
            double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
            for (int i = 0; i < ho * k; ++i) {
                for (int j = 0; j < wo * k; ++j) {
                    dst[i * w + j] += src[(i / k) * wo + j / k] * inv;
                }
            }
        }
    });
}

Var upsample_nearest2x(const Var& x)
{
    require_rank(x, 4, "upsample_nearest2x");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int p = 0; p < n * c; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * 4 * h * w;
        for (int i = 0; i < 2 * h; ++i) {
            for (int j = 0; j < 2 * w; ++j) {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    return make_result(std::move(out), {x}, [n, c, h, w](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (int p = 0; p < n * c; ++p) {
            const double* src = self.grad.data() + static_cast<std::size_t>(p) * 4 * h * w;
            double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
            for (int i = 0; i < 2 * h; ++i) {
                for (int j = 0; j < 2 * w; ++j) {
                    dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                }
            }
        }
    });
}

Var global_avg_pool(const Var& x)
{
    require_rank(x, 4, "global_avg_pool");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out({n, c});
    for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
        const double* src = x.value().data() + p * hw;
        out[p] = std::accumulate(src, src + hw, 0.0) / static_cast<double>(hw);
    }
    return make_result(std::move(out), {x}, [hw](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (std::size_t p = 0; p < self.grad.size(); ++p) {
            const double d = self.grad[p] / static_cast<double>(hw);
            double* dst = g.data() + p * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                dst[i] += d;
            }
        }
    });
}

Var gram(const Var& x)
{
    require_rank(x, 4, "gram");
    const int n = x.dim(0), c = x.dim(1);
    const int hw = x.dim(2) * x.dim(3);
    const double norm = 1.0 / (static_cast<double>(c) * hw);
    Tensor out({n, c, c});
    for (int i = 0; i < n; ++i) {
        ConstMatMap f(x.value().data() + static_cast<std::size_t>(i) * c * hw, c, hw);
        MatMap gm(out.data() + static_cast<std::size_t>(i) * c * c, c, c);
        gm.noalias() = (f * f.transpose()) * norm;
    }
    return make_result(std::move(out), {x}, [n, c, hw, norm](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (int i = 0; i < n; ++i) {
            ConstMatMap f(self.inputs[0]->value.data() + static_cast<std::size_t>(i) * c * hw, c, hw);
            ConstMatMap dg(self.grad.data() + static_cast<std::size_t>(i) * c * c, c, c);
            MatMap df(g.data() + static_cast<std::size_t>(i) * c * hw, c, hw);
            df.noalias() += ((dg + dg.transpose()) * f) * norm;
        }
    });
}

Var temporal_shift(const Var& x, const Var& kernel)
{
    require_rank(x, 4, "temporal_shift");
    require_rank(kernel, 2, "temporal_shift");
    const int t_len = x.dim(0), c = x.dim(1);
    const int shifted = kernel.dim(0);
    if (kernel.dim(1) != 3 || shifted > c) {
        throw InvalidInput("temporal_shift: kernel " + shape_str(kernel.shape()) + " incompatible with " +
                           shape_str(x.shape()));
    }
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t frame = static_cast<std::size_t>(c) * plane;
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    Tensor out(x.shape());
    for (int t = 0; t < t_len; ++t) {
        for (int ch = 0; ch < c; ++ch) {
            double* dst = out.data() + t * frame + ch * plane;
            if (ch >= shifted) {
                std::copy_n(xv.data() + t * frame + ch * plane, plane, dst);
                continue;
            }
            for (int tap = 0; tap < 3; ++tap) {
                const double k = kv[static_cast<std::size_t>(ch) * 3 + tap];
                const int src_t = t + tap - 1;
                if (k == 0.0 || src_t < 0 || src_t >= t_len) {
                    continue;
                }
                const double* src = xv.data() + src_t * frame + ch * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    dst[i] += k * src[i];
                }
            }
        }
    }
    return make_result(std::move(out), {x, kernel}, [t_len, c, shifted, plane, frame](Node& self) {
        const Tensor& xv = self.inputs[0]->value;
        const Tensor& kv = self.inputs[1]->value;
        const bool need_x = wants(self.inputs[0]);
        const bool need_k = wants(self.inputs[1]);
        for (int t = 0; t < t_len; ++t) {
            for (int ch = 0; ch < c; ++ch) {
                const double* dy = self.grad.data() + t * frame + ch * plane;
                if (ch >= shifted) {
                    if (need_x) {
                        double* dx = grad_of(*self.inputs[0]).data() + t * frame + ch * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            dx[i] += dy[i];
                        }
                    }
                    continue;
                }
                for (int tap = 0; tap < 3; ++tap) {
                    const int src_t = t + tap - 1;
                    if (src_t < 0 || src_t >= t_len) {
                        continue;
                    }
                    if (need_x) {
                        const double k = kv[static_cast<std::size_t>(ch) * 3 + tap];
                        double* dx = grad_of(*self.inputs[0]).data() + src_t * frame + ch * plane;
                        for (std::size_t i = 0; i < plane; ++i) {
                            dx[i] += k * dy[i];
                        }
                    }
                    if (need_k) {
                        const double* src = xv.data() + src_t * frame + ch * plane;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) {
                            acc += dy[i] * src[i];
                        }
                        grad_of(*self.inputs[1])[static_cast<std::size_t>(ch) * 3 + tap] += acc;
                    }
                }
            }
        }
    });
}

Var gated_activation(const Var& y, double slope)
{
    require_rank(y, 4, "gated_activation");
    const int n = y.dim(0), c2 = y.dim(1);
    if (c2 % 2 != 0) {
        throw InvalidInput("gated_activation: channel count must be even");
    }
    const int c = c2 / 2;
    const std::size_t plane = static_cast<std::size_t>(y.dim(2)) * y.dim(3);
    const std::size_t half = static_cast<std::size_t>(c) * plane;
    Tensor out({n, c, y.dim(2), y.dim(3)});
    auto sig = [](double v) {
        if (v >= 0) {
            return 1.0 / (1.0 + std::exp(-v));
        }
        const double e = std::exp(v);
        return e / (1.0 + e);
    };
    for (int i = 0; i < n; ++i) {
        const double* f = y.value().data() + i * 2 * half;
        const double* gt = f + half;
        double* o = out.data() + i * half;
        for (std::size_t k = 0; k < half; ++k) {
            const double act = f[k] > 0 ? f[k] : slope * f[k];
            o[k] = act * sig(gt[k]);
        }
    }
    return make_result(std::move(out), {y}, [n, half, slope, sig](Node& self) {
        Tensor& g = grad_of(*self.inputs[0]);
        for (int i = 0; i < n; ++i) {
            const double* f = self.inputs[0]->value.data() + i * 2 * half;
            const double* gt = f + half;
            const double* dout = self.grad.data() + i * half;
            double* df = g.data() + i * 2 * half;
            double* dg = df + half;
            for (std::size_t k = 0; k < half; ++k) {
                const double s = sig(gt[k]);
                const double act = f[k] > 0 ? f[k] : slope * f[k];
                const double dact = f[k] > 0 ? 1.0 : slope;
                df[k] += dout[k] * s * dact;
                dg[k] += dout[k] * act * s * (1.0 - s);
            }
        }
    });
}

std::uint64_t checksum(const std::vector<Var>& params)
{
    std::uint64_t h = 1469598103934665603ull;
    for (const Var& p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value().data());
        const std::size_t count = p.size() * sizeof(double);
        for (std::size_t i = 0; i < count; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace hmdr::ag
