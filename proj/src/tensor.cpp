#include "sketch3d/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace sketch3d {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::atomic<std::uint64_t> g_next_sequence{1};
thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

struct Tensor::Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    Tensor grad;
    std::shared_ptr<Node> grad_fn;
};

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>())
{
    for (auto extent : shape) {
        if (extent == 0) throw TensorError("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<Impl>())
{
    for (auto extent : shape) {
        if (extent == 0) throw TensorError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
        throw TensorError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                          " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const
{
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->shape;
}

std::size_t Tensor::size(std::size_t axis) const
{
    const auto& s = shape();
    if (axis >= s.size()) throw TensorError("axis out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const
{
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->data.size();
}

std::span<const double> Tensor::values() const
{
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->data;
}

std::span<double> Tensor::mutable_values()
{
    if (!impl_) throw TensorError("use of undefined tensor");
    if (impl_->grad_fn) throw TensorError("cannot mutate the output of a recorded op in place");
    return impl_->data;
}

double Tensor::item() const
{
    if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on)
{
    if (!impl_) throw TensorError("use of undefined tensor");
    if (impl_->grad_fn) throw TensorError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
    if (!on) impl_->grad = Tensor();
    return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

const Tensor& Tensor::grad() const
{
    if (!impl_) throw TensorError("use of undefined tensor");
    return impl_->grad;
}

void Tensor::set_grad(Tensor g)
{
    if (!impl_) throw TensorError("use of undefined tensor");
    if (!impl_->requires_grad) return;
    if (g.defined() && g.shape() != impl_->shape) {
        throw TensorError("grad shape " + shape_str(g.shape()) + " does not match " + shape_str(impl_->shape));
    }
    impl_->grad = std::move(g);
}

void Tensor::zero_grad()
{
    if (requires_grad()) impl_->grad = Tensor::zeros(impl_->shape);
}

void Tensor::clear_grad()
{
    if (impl_) impl_->grad = Tensor();
}

Tensor Tensor::detach() const
{
    if (!impl_) return Tensor();
    return Tensor(impl_->shape, impl_->data);
}

const std::shared_ptr<Node>& Tensor::grad_fn() const
{
    static const std::shared_ptr<Node> none;
    return impl_ ? impl_->grad_fn : none;
}

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Tensor record_op(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn backward,
                 bool twice_differentiable)
{
    if (!g_grad_enabled) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    auto node = std::make_shared<Node>();
    node->sequence = g_next_sequence.fetch_add(1);
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    node->twice_differentiable = twice_differentiable;
    out.impl_->requires_grad = true;
    out.impl_->grad_fn = std::move(node);
    return out;
}

// ---- engine -----------------------------------------------------------------

namespace {

Tensor accumulate(const Tensor& existing, const Tensor& g)
{
    if (!existing.defined()) return g;
    return add(existing, g);
}

struct LeafSlot {
    Tensor leaf;
    Tensor grad;
};

struct BackwardResult {
    std::unordered_map<const Node*, Tensor> node_grads;
    std::vector<LeafSlot> leaves;
    std::unordered_map<const void*, std::size_t> leaf_index;
};

BackwardResult run_backward(const Tensor& root, const BackwardOptions& options)
{
    if (!root.defined()) throw TensorError("backward on undefined tensor");
    if (root.numel() != 1) throw TensorError("backward requires a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) throw TensorError("backward on a tensor that does not require grad");

    const bool create_graph = options.create_graph;
    const bool retain = options.retain_graph || create_graph;
    GradModeGuard mode(create_graph);

    BackwardResult result;
    auto add_leaf = [&](const Tensor& leaf, const Tensor& g) {
        auto [it, inserted] = result.leaf_index.try_emplace(leaf.id(), result.leaves.size());
        if (inserted) {
            result.leaves.push_back({leaf, g});
        } else {
            auto& slot = result.leaves[it->second];
            slot.grad = accumulate(slot.grad, g);
        }
    };

    const Tensor seed = Tensor::ones(root.shape());
    if (!root.grad_fn()) {
        add_leaf(root, seed);
        return result;
    }

    std::vector<Node*> order;
    {
        std::unordered_set<const Node*> seen;
        std::vector<Node*> stack{root.grad_fn().get()};
        seen.insert(stack.back());
        while (!stack.empty()) {
            Node* node = stack.back();
            stack.pop_back();
            order.push_back(node);
            for (const auto& input : node->inputs) {
                const auto& fn = input.grad_fn();
                if (fn && seen.insert(fn.get()).second) stack.push_back(fn.get());
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->sequence > b->sequence; });

    result.node_grads[root.grad_fn().get()] = seed;
    for (Node* node : order) {
        auto it = result.node_grads.find(node);
        if (it == result.node_grads.end()) continue;
        if (node->released) {
            throw TensorError("backward through op '" + node->op +
                              "' whose graph was already released; pass retain_graph to reuse it");
        }
        if (create_graph && !node->twice_differentiable) {
            throw TensorError("op '" + node->op + "' does not support double backward");
        }
        const Tensor g = it->second;
        std::vector<Tensor> grads = node->backward(g);
        if (grads.size() != node->inputs.size()) {
            throw TensorError("op '" + node->op + "' returned the wrong number of grads");
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            const Tensor& input = node->inputs[i];
            if (!grads[i].defined() || !input.requires_grad()) continue;
            if (grads[i].shape() != input.shape()) {
                throw TensorError("op '" + node->op + "' produced grad " + shape_str(grads[i].shape()) +
                                  " for input " + shape_str(input.shape()));
            }
            if (const auto& fn = input.grad_fn()) {
                auto& slot = result.node_grads[fn.get()];
                slot = accumulate(slot, grads[i]);
            } else {
                add_leaf(input, grads[i]);
            }
        }
        if (!retain) {
            node->backward = nullptr;
            node->released = true;
        }
    }
    return result;
}

}  // namespace

void backward(const Tensor& loss, BackwardOptions options)
{
    auto result = run_backward(loss, options);
    GradModeGuard mode(options.create_graph);
    for (auto& slot : result.leaves) {
        Tensor leaf = slot.leaf;
        const Tensor& existing = leaf.grad();
        leaf.set_grad(existing.defined() ? add(existing, slot.grad) : slot.grad);
    }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs, BackwardOptions options)
{
    auto result = run_backward(output, options);
    std::vector<Tensor> out;
    out.reserve(inputs.size());
    for (const auto& input : inputs) {
        Tensor g;
        if (const auto& fn = input.grad_fn()) {
            auto it = result.node_grads.find(fn.get());
            if (it != result.node_grads.end()) g = it->second;
        } else {
            auto it = result.leaf_index.find(input.id());
            if (it != result.leaf_index.end()) g = result.leaves[it->second].grad;
        }
        out.push_back(g.defined() ? g : Tensor::zeros(input.shape()));
    }
    return out;
}

// ---- element-wise -------------------------------------------------------------

namespace {

enum class Broadcast { same, a_scalar, b_scalar };

Broadcast check_binary(const Tensor& a, const Tensor& b, const char* op)
{
    if (!a.defined() || !b.defined()) throw TensorError(std::string(op) + ": undefined operand");
    if (a.shape() == b.shape()) return Broadcast::same;
    if (b.numel() == 1) return Broadcast::b_scalar;
    if (a.numel() == 1) return Broadcast::a_scalar;
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <typename F>
Tensor binary_values(const Tensor& a, const Tensor& b, Broadcast mode, F f)
{
    const auto av = a.values();
    const auto bv = b.values();
    const Shape& shape = mode == Broadcast::a_scalar ? b.shape() : a.shape();
    std::vector<double> out(shape_numel(shape));
    switch (mode) {
    case Broadcast::same:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
        break;
    case Broadcast::b_scalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[0]);
        break;
    case Broadcast::a_scalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[0], bv[i]);
        break;
    }
    return Tensor(shape, std::move(out));
}

template <typename F>
Tensor unary_values(const Tensor& a, F f)
{
    if (!a.defined()) throw TensorError("unary op on undefined tensor");
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return Tensor(a.shape(), std::move(out));
}

Tensor reduce_to(const Tensor& g, const Shape& shape)
{
    if (g.shape() == shape) return g;
    return reshape(sum(g), shape);
}

double stable_sigmoid(double x)
{
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b)
{
    const auto mode = check_binary(a, b, "add");
    Tensor out = binary_values(a, b, mode, [](double x, double y) { return x + y; });
    const Shape sa = a.shape(), sb = b.shape();
    return record_op(std::move(out), "add", {a, b}, [sa, sb](const Tensor& g) {
        return std::vector<Tensor>{reduce_to(g, sa), reduce_to(g, sb)};
    });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    const auto mode = check_binary(a, b, "sub");
    Tensor out = binary_values(a, b, mode, [](double x, double y) { return x - y; });
    const Shape sa = a.shape(), sb = b.shape();
    return record_op(std::move(out), "sub", {a, b}, [sa, sb](const Tensor& g) {
        return std::vector<Tensor>{reduce_to(g, sa), reduce_to(neg(g), sb)};
    });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    const auto mode = check_binary(a, b, "mul");
    Tensor out = binary_values(a, b, mode, [](double x, double y) { return x * y; });
    return record_op(std::move(out), "mul", {a, b}, [a, b](const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = reduce_to(mul(g, b), a.shape());
        if (b.requires_grad()) grads[1] = reduce_to(mul(g, a), b.shape());
        return grads;
    });
}

Tensor div(const Tensor& a, const Tensor& b)
{
    const auto mode = check_binary(a, b, "div");
    for (double v : b.values()) {
        if (v == 0.0 || !std::isfinite(v)) throw TensorError("div: divisor outside domain (" + std::to_string(v) + ")");
    }
    Tensor out = binary_values(a, b, mode, [](double x, double y) { return x / y; });
    return record_op(std::move(out), "div", {a, b}, [a, b](const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = reduce_to(div(g, b), a.shape());
        if (b.requires_grad()) grads[1] = reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape());
        return grads;
    });
}

Tensor neg(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return -x; });
    return record_op(std::move(out), "neg", {a}, [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor exp(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return std::exp(x); });
    return record_op(std::move(out), "exp", {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(a))}; });
}

Tensor log(const Tensor& a)
{
    for (double v : a.values()) {
        if (!(v > 0.0)) throw TensorError("log: argument outside domain (" + std::to_string(v) + ")");
    }
    Tensor out = unary_values(a, [](double x) { return std::log(x); });
    return record_op(std::move(out), "log", {a}, [a](const Tensor& g) { return std::vector<Tensor>{div(g, a)}; });
}

Tensor sigmoid(const Tensor& a)
{
    Tensor out = unary_values(a, stable_sigmoid);
    return record_op(std::move(out), "sigmoid", {a}, [a](const Tensor& g) {
        const Tensor s = sigmoid(a);
        return std::vector<Tensor>{mul(g, mul(s, add_scalar(neg(s), 1.0)))};
    });
}

Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0); }

Tensor leaky_relu(const Tensor& a, double slope)
{
    Tensor out = unary_values(a, [slope](double x) { return x > 0 ? x : slope * x; });
    return record_op(std::move(out), slope == 0.0 ? "relu" : "leaky_relu", {a}, [a, slope](const Tensor& g) {
        // The mask is piecewise constant, so it enters the second-order pass as a constant.
        Tensor mask = unary_values(a, [slope](double x) { return x > 0 ? 1.0 : slope; });
        return std::vector<Tensor>{mul(g, mask)};
    });
}

Tensor square(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return x * x; });
    return record_op(std::move(out), "square", {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{mul(g, mul_scalar(a, 2.0))}; });
}

Tensor sqrt(const Tensor& a)
{
    for (double v : a.values()) {
        if (!(v > 0.0)) throw TensorError("sqrt: argument outside domain (" + std::to_string(v) + ")");
    }
    Tensor out = unary_values(a, [](double x) { return std::sqrt(x); });
    return record_op(std::move(out), "sqrt", {a}, [a](const Tensor& g) {
        return std::vector<Tensor>{div(g, mul_scalar(sqrt(a), 2.0))};
    });
}

Tensor tanh(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return std::tanh(x); });
    return record_op(std::move(out), "tanh", {a}, [a](const Tensor& g) {
        const Tensor t = tanh(a);
        return std::vector<Tensor>{mul(g, add_scalar(neg(mul(t, t)), 1.0))};
    });
}

Tensor sin(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return std::sin(x); });
    return record_op(std::move(out), "sin", {a}, [a](const Tensor& g) { return std::vector<Tensor>{mul(g, cos(a))}; });
}

Tensor cos(const Tensor& a)
{
    Tensor out = unary_values(a, [](double x) { return std::cos(x); });
    return record_op(std::move(out), "cos", {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{neg(mul(g, sin(a)))}; });
}

Tensor softplus(const Tensor& a)
{
    Tensor out = unary_values(a, stable_softplus);
    return record_op(std::move(out), "softplus", {a},
                     [a](const Tensor& g) { return std::vector<Tensor>{mul(g, sigmoid(a))}; });
}

Tensor add_scalar(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
Tensor mul_scalar(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b)
{
    switch (op) {
    case ElementwiseOp::add: return add(a, b);
    case ElementwiseOp::sub: return sub(a, b);
    case ElementwiseOp::mul: return mul(a, b);
    case ElementwiseOp::div: return div(a, b);
    case ElementwiseOp::neg: return neg(a);
    case ElementwiseOp::exp: return exp(a);
    case ElementwiseOp::log: return log(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::square: return square(a);
    }
    throw TensorError("unknown element-wise op");
}

// ---- reductions and shape -----------------------------------------------------

Tensor sum(const Tensor& a)
{
    const auto v = a.values();
    double total = 0.0;
    for (double x : v) total += x;
    const Shape shape = a.shape();
    return record_op(Tensor::scalar(total), "sum", {a},
                     [shape](const Tensor& g) { return std::vector<Tensor>{expand(g, shape)}; });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor expand(const Tensor& scalar, const Shape& shape)
{
    if (scalar.numel() != 1) throw TensorError("expand expects a single-element tensor, got " + shape_str(scalar.shape()));
    const Shape from = scalar.shape();
    return record_op(Tensor(shape, scalar.item()), "expand", {scalar},
                     [from](const Tensor& g) { return std::vector<Tensor>{reshape(sum(g), from)}; });
}

Tensor reshape(const Tensor& a, Shape shape)
{
    if (shape_numel(shape) != a.numel()) {
        throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    const Shape from = a.shape();
    Tensor out(std::move(shape), std::vector<double>(a.values().begin(), a.values().end()));
    return record_op(std::move(out), "reshape", {a},
                     [from](const Tensor& g) { return std::vector<Tensor>{reshape(g, from)}; });
}

Tensor transpose(const Tensor& a)
{
    if (a.rank() != 2) throw TensorError("transpose expects a matrix, got " + shape_str(a.shape()));
    const std::size_t rows = a.size(0), cols = a.size(1);
    const auto v = a.values();
    std::vector<double> out(v.size());
    MutMap(out.data(), static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(rows)) =
        ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)).transpose();
    return record_op(Tensor({cols, rows}, std::move(out)), "transpose", {a},
                     [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

namespace {

// Places `part` at rows [begin, begin + rows) of a zero tensor of `full` shape.
Tensor pad_rows(const Tensor& part, const Shape& full, std::size_t begin)
{
    Tensor out = Tensor::zeros(full);
    const std::size_t row = shape_numel(full) / full[0];
    std::copy(part.values().begin(), part.values().end(), out.mutable_values().begin() + begin * row);
    const std::size_t end = begin + part.size(0);
    return record_op(std::move(out), "pad_rows", {part},
                     [begin, end](const Tensor& g) { return std::vector<Tensor>{slice(g, begin, end)}; });
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts)
{
    if (parts.empty()) throw TensorError("concat of zero tensors");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
            throw TensorError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                              shape_str(p.shape()));
        }
        rows += p.size(0);
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        offset += p.size(0);
    }
    std::vector<std::size_t> lengths;
    for (const auto& p : parts) lengths.push_back(p.size(0));
    return record_op(Tensor(shape, std::move(out)), "concat", parts, [offsets, lengths](const Tensor& g) {
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < offsets.size(); ++i) grads.push_back(slice(g, offsets[i], offsets[i] + lengths[i]));
        return grads;
    });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end)
{
    if (a.rank() == 0 || begin >= end || end > a.size(0)) {
        throw TensorError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                          shape_str(a.shape()));
    }
    Shape shape = a.shape();
    const std::size_t row = a.numel() / shape[0];
    shape[0] = end - begin;
    std::vector<double> out(a.values().begin() + begin * row, a.values().begin() + end * row);
    const Shape full = a.shape();
    return record_op(Tensor(shape, std::move(out)), "slice", {a},
                     [full, begin](const Tensor& g) { return std::vector<Tensor>{pad_rows(g, full, begin)}; });
}

// ---- linear algebra -------------------------------------------------------------

namespace {

// op(a) * op(b) where op transposes when the flag is set.
Tensor gemm(const Tensor& a, bool ta, const Tensor& b, bool tb)
{
    const auto ar = static_cast<Eigen::Index>(a.size(0)), ac = static_cast<Eigen::Index>(a.size(1));
    const auto br = static_cast<Eigen::Index>(b.size(0)), bc = static_cast<Eigen::Index>(b.size(1));
    const ConstMap am(a.values().data(), ar, ac), bm(b.values().data(), br, bc);
    const Eigen::Index m = ta ? ac : ar, n = tb ? br : bc;
    Tensor out({static_cast<std::size_t>(m), static_cast<std::size_t>(n)});
    MutMap o(out.mutable_values().data(), m, n);
    if (ta && tb) o.noalias() = am.transpose() * bm.transpose();
    else if (ta) o.noalias() = am.transpose() * bm;
    else if (tb) o.noalias() = am * bm.transpose();
    else o.noalias() = am * bm;
    return record_op(std::move(out), "matmul", {a, b}, [a, ta, b, tb](const Tensor& g) {
        std::vector<Tensor> grads(2);
        if (a.requires_grad()) grads[0] = ta ? gemm(b, tb, g, true) : gemm(g, false, b, !tb);
        if (b.requires_grad()) grads[1] = tb ? gemm(g, true, a, ta) : gemm(a, !ta, g, false);
        return grads;
    });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
        throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    return gemm(a, false, b, false);
}

namespace {

struct ConvGeometry {
    std::size_t channels, height, width, kernel, out_h, out_w;
    Conv2dParams params;
};

ConvGeometry conv_geometry(const Shape& input, std::size_t kernel, Conv2dParams params)
{
    if (input.size() != 3) throw TensorError("conv2d expects [C, H, W] input, got " + shape_str(input));
    if (kernel % 2 == 0) throw TensorError("conv2d kernel size must be odd, got " + std::to_string(kernel));
    if (params.stride == 0) throw TensorError("conv2d stride must be positive");
    const std::size_t h = input[1], w = input[2];
    if (h + 2 * params.pad < kernel || w + 2 * params.pad < kernel) {
        throw TensorError("conv2d input " + shape_str(input) + " smaller than kernel " + std::to_string(kernel));
    }
    const std::size_t span_h = h + 2 * params.pad - kernel;
    const std::size_t span_w = w + 2 * params.pad - kernel;
    if (span_h % params.stride != 0 || span_w % params.stride != 0) {
        throw TensorError("conv2d output extent is not integral for input " + shape_str(input) + ", kernel " +
                          std::to_string(kernel) + ", stride " + std::to_string(params.stride) + ", pad " +
                          std::to_string(params.pad));
    }
    return {input[0], h, w, kernel, span_h / params.stride + 1, span_w / params.stride + 1, params};
}

// Column matrix of shape [C*k*k, out_h*out_w].
std::vector<double> im2col(std::span<const double> x, const ConvGeometry& g)
{
    const std::size_t cols = g.out_h * g.out_w;
    std::vector<double> out(g.channels * g.kernel * g.kernel * cols, 0.0);
    const auto pad = static_cast<std::ptrdiff_t>(g.params.pad);
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                double* row = out.data() + ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.params.stride + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    const double* src = x.data() + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.params.stride + kx) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        row[oy * g.out_w + ox] = src[ix];
                    }
                }
            }
    return out;
}

void col2im(std::span<const double> colmat, const ConvGeometry& g, std::span<double> x)
{
    const std::size_t cols = g.out_h * g.out_w;
    const auto pad = static_cast<std::ptrdiff_t>(g.params.pad);
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kernel; ++ky)
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const double* row = colmat.data() + ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.params.stride + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    double* dst = x.data() + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.params.stride + kx) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        dst[ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

void check_kernel(const Tensor& kernel, std::size_t in_channels)
{
    if (kernel.rank() != 4 || kernel.size(2) != kernel.size(3) || kernel.size(1) != in_channels) {
        throw TensorError("conv2d kernel " + shape_str(kernel.shape()) + " incompatible with " +
                          std::to_string(in_channels) + " input channels");
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params)
{
    if (kernel.rank() != 4) throw TensorError("conv2d kernel must be rank 4, got " + shape_str(kernel.shape()));
    const auto g = conv_geometry(input.shape(), kernel.size(2), params);
    check_kernel(kernel, g.channels);
    const std::size_t out_c = kernel.size(0);
    const auto cols = im2col(input.values(), g);
    const auto kk = static_cast<Eigen::Index>(g.channels * g.kernel * g.kernel);
    const auto hw = static_cast<Eigen::Index>(g.out_h * g.out_w);
    Tensor out({out_c, g.out_h, g.out_w});
    MutMap(out.mutable_values().data(), static_cast<Eigen::Index>(out_c), hw).noalias() =
        ConstMap(kernel.values().data(), static_cast<Eigen::Index>(out_c), kk) * ConstMap(cols.data(), kk, hw);
    const Shape in_shape = input.shape();
    const std::size_t k = g.kernel;
    return record_op(std::move(out), "conv2d", {input, kernel}, [input, kernel, in_shape, k, params](const Tensor& gr) {
        std::vector<Tensor> grads(2);
        if (input.requires_grad()) grads[0] = conv2d_input_grad(gr, kernel, in_shape, params);
        if (kernel.requires_grad()) grads[1] = conv2d_weight_grad(input, gr, k, params);
        return grads;
    });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape, Conv2dParams params)
{
    if (kernel.rank() != 4) throw TensorError("conv2d kernel must be rank 4, got " + shape_str(kernel.shape()));
    const auto g = conv_geometry(input_shape, kernel.size(2), params);
    check_kernel(kernel, g.channels);
    const std::size_t out_c = kernel.size(0);
    if (grad_out.shape() != Shape{out_c, g.out_h, g.out_w}) {
        throw TensorError("conv2d_input_grad: grad shape " + shape_str(grad_out.shape()) + " mismatches");
    }
    const auto kk = static_cast<Eigen::Index>(g.channels * g.kernel * g.kernel);
    const auto hw = static_cast<Eigen::Index>(g.out_h * g.out_w);
    std::vector<double> cols(static_cast<std::size_t>(kk * hw));
    MutMap(cols.data(), kk, hw).noalias() =
        ConstMap(kernel.values().data(), static_cast<Eigen::Index>(out_c), kk).transpose() *
        ConstMap(grad_out.values().data(), static_cast<Eigen::Index>(out_c), hw);
    Tensor out = Tensor::zeros(input_shape);
    col2im(cols, g, out.mutable_values());
    const std::size_t k = g.kernel;
    return record_op(std::move(out), "conv2d_input_grad", {grad_out, kernel},
                     [grad_out, kernel, k, params](const Tensor& h) {
                         std::vector<Tensor> grads(2);
                         if (grad_out.requires_grad()) grads[0] = conv2d(h, kernel, params);
                         if (kernel.requires_grad()) grads[1] = conv2d_weight_grad(h, grad_out, k, params);
                         return grads;
                     });
}

Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::size_t kernel_size, Conv2dParams params)
{
    const auto g = conv_geometry(input.shape(), kernel_size, params);
    if (grad_out.rank() != 3 || grad_out.size(1) != g.out_h || grad_out.size(2) != g.out_w) {
        throw TensorError("conv2d_weight_grad: grad shape " + shape_str(grad_out.shape()) + " mismatches");
    }
    const std::size_t out_c = grad_out.size(0);
    const auto cols = im2col(input.values(), g);
    const auto kk = static_cast<Eigen::Index>(g.channels * g.kernel * g.kernel);
    const auto hw = static_cast<Eigen::Index>(g.out_h * g.out_w);
    Tensor out({out_c, g.channels, g.kernel, g.kernel});
    MutMap(out.mutable_values().data(), static_cast<Eigen::Index>(out_c), kk).noalias() =
        ConstMap(grad_out.values().data(), static_cast<Eigen::Index>(out_c), hw) *
        ConstMap(cols.data(), kk, hw).transpose();
    const Shape in_shape = input.shape();
    return record_op(std::move(out), "conv2d_weight_grad", {input, grad_out},
                     [input, grad_out, in_shape, params](const Tensor& h) {
                         std::vector<Tensor> grads(2);
                         if (input.requires_grad()) grads[0] = conv2d_input_grad(grad_out, h, in_shape, params);
                         if (grad_out.requires_grad()) grads[1] = conv2d(input, h, params);
                         return grads;
                     });
}

Tensor broadcast_channels(const Tensor& bias, std::size_t height, std::size_t width)
{
    if (bias.rank() != 1) throw TensorError("broadcast_channels expects [C], got " + shape_str(bias.shape()));
    const std::size_t c = bias.size(0), plane = height * width;
    Tensor out({c, height, width});
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < c; ++i) std::fill_n(ov.begin() + i * plane, plane, bias[i]);
    return record_op(std::move(out), "broadcast_channels", {bias},
                     [](const Tensor& g) { return std::vector<Tensor>{channel_sum(g)}; });
}

Tensor channel_sum(const Tensor& a)
{
    if (a.rank() != 3) throw TensorError("channel_sum expects [C, H, W], got " + shape_str(a.shape()));
    const std::size_t c = a.size(0), h = a.size(1), w = a.size(2), plane = h * w;
    Tensor out({c});
    auto ov = out.mutable_values();
    const auto av = a.values();
    for (std::size_t i = 0; i < c; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < plane; ++j) total += av[i * plane + j];
        ov[i] = total;
    }
    return record_op(std::move(out), "channel_sum", {a},
                     [h, w](const Tensor& g) { return std::vector<Tensor>{broadcast_channels(g, h, w)}; });
}

namespace {

struct PlaneLayout {
    std::size_t planes, height, width;
};

PlaneLayout plane_layout(const Tensor& a, const char* op)
{
    if (a.rank() == 2) return {1, a.size(0), a.size(1)};
    if (a.rank() == 3) return {a.size(0), a.size(1), a.size(2)};
    throw TensorError(std::string(op) + " expects [H, W] or [C, H, W], got " + shape_str(a.shape()));
}

}  // namespace

Tensor downsample2x(const Tensor& a)
{
    const auto p = plane_layout(a, "downsample2x");
    if (p.height % 2 || p.width % 2) throw TensorError("downsample2x requires even extents, got " + shape_str(a.shape()));
    Shape shape = a.shape();
    shape[shape.size() - 2] /= 2;
    shape[shape.size() - 1] /= 2;
    const std::size_t oh = p.height / 2, ow = p.width / 2;
    Tensor out(shape);
    auto ov = out.mutable_values();
    const auto av = a.values();
    for (std::size_t c = 0; c < p.planes; ++c)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                const double* s = av.data() + (c * p.height + 2 * y) * p.width + 2 * x;
                ov[(c * oh + y) * ow + x] = 0.25 * (s[0] + s[1] + s[p.width] + s[p.width + 1]);
            }
    return record_op(std::move(out), "downsample2x", {a},
                     [](const Tensor& g) { return std::vector<Tensor>{mul_scalar(upsample2x(g), 0.25)}; });
}

Tensor upsample2x(const Tensor& a)
{
    const auto p = plane_layout(a, "upsample2x");
    Shape shape = a.shape();
    shape[shape.size() - 2] *= 2;
    shape[shape.size() - 1] *= 2;
    const std::size_t oh = p.height * 2, ow = p.width * 2;
    Tensor out(shape);
    auto ov = out.mutable_values();
    const auto av = a.values();
    for (std::size_t c = 0; c < p.planes; ++c)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) ov[(c * oh + y) * ow + x] = av[(c * p.height + y / 2) * p.width + x / 2];
    return record_op(std::move(out), "upsample2x", {a},
                     [](const Tensor& g) { return std::vector<Tensor>{mul_scalar(downsample2x(g), 4.0)}; });
}

// ---- Adam -----------------------------------------------------------------------

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config)
{
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.numel(), 0.0);
            state.second_moment.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) throw TensorError("adam state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].grad().defined()) {
            throw TensorError("adam_step: parameter " + std::to_string(i) + " " + shape_str(params[i].shape()) +
                              " has no grad");
        }
        if (state.first_moment[i].size() != params[i].numel()) {
            throw TensorError("adam state shape mismatch for parameter " + std::to_string(i));
        }
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].mutable_values();
        const auto g = params[i].grad().values();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            value[j] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
        }
    }
}

}  // namespace sketch3d
