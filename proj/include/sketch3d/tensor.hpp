#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sketch3d {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Node;

// Dense row-major array of doubles that can take part in a reverse-mode graph.
// Copies are shallow: two Tensor handles may refer to the same storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor zeros_like(const Tensor& t) { return zeros(t.shape()); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> values() const;
    // Only valid on tensors that are not the output of a recorded op.
    std::span<double> mutable_values();
    double item() const;
    double operator[](std::size_t i) const { return values()[i]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);
    bool is_leaf() const;

    const Tensor& grad() const;
    void set_grad(Tensor g);
    // Replaces the grad with zeros so that accumulation always has a target.
    void zero_grad();
    void clear_grad();

    // New storage, same values, outside any graph.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    const std::shared_ptr<Node>& grad_fn() const;
    const void* id() const { return impl_.get(); }

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;

    friend Tensor record_op(Tensor out, std::string op, std::vector<Tensor> inputs,
                            std::function<std::vector<Tensor>(const Tensor&)> backward,
                            bool twice_differentiable);
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

// One recorded operation. Sequence numbers grow monotonically, so every input
// node carries a smaller number than its consumer.
struct Node {
    std::uint64_t sequence = 0;
    std::string op;
    std::vector<Tensor> inputs;
    BackwardFn backward;
    bool twice_differentiable = true;
    bool released = false;
};

// Attaches a graph node to `out` when recording is enabled and any input
// requires grad. The backward closure returns one grad per input (undefined
// tensors mean "no contribution"). Closures must be written with tensor ops
// when `twice_differentiable` is true.
Tensor record_op(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn backward,
                 bool twice_differentiable = true);

bool grad_enabled();

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

class NoGradGuard : public GradModeGuard {
public:
    NoGradGuard() : GradModeGuard(false) {}
};

struct BackwardOptions {
    bool create_graph = false;
    // Implied by create_graph.
    bool retain_graph = false;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
void backward(const Tensor& loss, BackwardOptions options = {});

// Returns d(output)/d(input) for each input without touching stored grads.
// Inputs that do not influence the output receive zeros.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         BackwardOptions options = {});

// ---- element-wise -----------------------------------------------------------
// Binary ops require equal shapes, or one operand with a single element.

enum class ElementwiseOp { add, sub, mul, div, neg, exp, log, sigmoid, relu, square };

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = Tensor());

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
// log(1 + exp(a)), overflow-free.
Tensor softplus(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

// ---- reductions and shape ---------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Broadcasts a single-element tensor to `shape`.
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
// Concatenates along axis 0; trailing extents must agree.
Tensor concat(const std::vector<Tensor>& parts);
// Rows [begin, end) along axis 0.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);

// ---- linear algebra and image ops ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dParams {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

// Cross-correlation of input [C_in, H, W] with kernel [C_out, C_in, k, k].
Tensor conv2d(const Tensor& input, const Tensor& kernel, Conv2dParams params = {});
// The adjoints of conv2d. Exposed because they are themselves differentiable
// and back the second-order pass.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         Conv2dParams params);
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::size_t kernel_size,
                          Conv2dParams params);

// [C] -> [C, H, W] and its adjoint.
Tensor broadcast_channels(const Tensor& bias, std::size_t height, std::size_t width);
Tensor channel_sum(const Tensor& a);

// 2x2 mean pooling of [C, H, W] (or [H, W]); extents must be even.
Tensor downsample2x(const Tensor& a);
inline Tensor pool_avg(const Tensor& a) { return downsample2x(a); }
// Nearest-neighbour 2x upsampling.
Tensor upsample2x(const Tensor& a);

// ---- optimisation -----------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam. Every parameter must carry a grad.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config);

}  // namespace sketch3d
