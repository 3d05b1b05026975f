#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ouro/common.hpp"

namespace ouro {

class Tape;

// Dense row-major f64 tensor. Buffers are shared and treated as immutable once
// a tensor has been fed to an op; mut() exists for filling freshly created
// constants. A tensor optionally carries a (tape, node) pair identifying where
// its value was recorded for reverse-mode differentiation.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    Tape* tape = nullptr;
    std::int64_t node = -1;

    Tensor() = default;

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    const double* ptr() const { return data->data(); }
    double* mut() { return const_cast<double*>(data->data()); }
    double scalar_value() const {
        require(numel() == 1, "expected scalar tensor, got shape " + shape_str(shape));
        return (*data)[0];
    }

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor from(Shape s, std::vector<double> v);
    static Tensor scalar(double v) { return from({1}, {v}); }
};

// Record of one differentiable op. The backward fn receives the node's output
// adjoint and accumulates into its parents' adjoints via Tape::adjoint().
class Tape {
  public:
    using BackwardFn = std::function<void(const double* grad_out, Tape&)>;

    // Register an op result; fn may be empty for leaves.
    std::int64_t record(std::size_t numel, BackwardFn fn);
    std::size_t size() const { return nodes_.size(); }

    // Accumulation buffer for a node, zero-initialised on first request.
    double* adjoint(std::int64_t node, std::size_t numel);

    // Reverse sweep from a scalar loss. Adjoint buffers of interior nodes are
    // freed as soon as they have been consumed, except for nodes listed in
    // `keep`; leaf adjoints always survive until the tape is destroyed.
    void backward(const Tensor& loss, const std::vector<const Tensor*>& keep = {});

    // Gradient of the last backward() w.r.t. `t` (zeros if the loss never
    // reached it). `t` must live on this tape and, if it is an interior node,
    // must have been passed in `keep`.
    std::vector<double> grad_of(const Tensor& t) const;

  private:
    struct Node {
        std::size_t numel;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    std::vector<std::unique_ptr<std::vector<double>>> adj_;
    bool ran_backward_ = false;
};

// Register a constant as a differentiable leaf on `tape`.
Tensor watch(Tape& tape, const Tensor& t);

// Which tape (if any) an op writing `out` should record on; validates that
// mixed inputs agree.
Tape* tape_of(const Tensor& a);
Tape* tape_of(const Tensor& a, const Tensor& b);

// Generic helper for defining new differentiable ops outside this file:
// wraps a computed buffer as a tensor and records `fn` if tape is non-null.
Tensor make_op_result(Shape shape, std::vector<double> value, Tape* tape, Tape::BackwardFn fn);

// Shapes broadcast right-aligned; a dimension must match or be 1.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Sum `g` (of shape `from`) down to shape `to`; inverse of broadcasting.
std::vector<double> reduce_to_shape(const double* g, const Shape& from, const Shape& to);

// Elementwise, with broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// Elementwise transcendental / activation ops.
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor softplus(const Tensor& a);  // max(x,0) + log1p(exp(-|x|))
Tensor silu(const Tensor& a);      // x * sigmoid(x)

// 2-D matrix product with optional operand transposes: op(a) is M x K,
// op(b) is K x N. Transposed operands are stored as K x M (resp. N x K).
Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// Reductions.
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false);

Tensor cumsum(const Tensor& a, std::size_t axis);
Tensor reshape(const Tensor& a, Shape s);
// Index one position along `axis`, dropping that axis.
Tensor slice_index(const Tensor& a, std::size_t axis, std::size_t i);
// Stack equal-shaped tensors along a new axis inserted at `axis`.
Tensor stack(const std::vector<Tensor>& parts, std::size_t axis);
// Gather positions along `axis` (duplicates allowed; backward scatter-adds).
Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& idx);
Tensor softmax_lastdim(const Tensor& a);

// Depthwise causal 1-D convolution over the token axis of x: B x T x E, with
// per-channel taps E x W; tap W-1 touches the current token, earlier taps its
// predecessors (zero padding on the left). Taps must be constants.
Tensor conv1d_depthwise_causal(const Tensor& x, const Tensor& taps);

// Shift a B x I x J x ... tensor by (di, dj) over axes 1 and 2, zero-filling:
// out[b,i,j,...] = a[b,i+di,j+dj,...] where in bounds.
Tensor shift2d(const Tensor& a, std::int64_t di, std::int64_t dj);

// Low-level kernels shared by the tensor ops and the plain-buffer model paths
// so both produce bit-identical results.
namespace detail {

// C (M x N) = op(A)op(B), added into C when acc is set. Transposed operands
// are stored transposed: op=T means A is stored K x M (resp. B stored N x K).
void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
        std::size_t n, bool ta, bool tb, bool acc);

inline double sigmoid_val(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}
inline double softplus_val(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
inline double silu_val(double x) { return x * sigmoid_val(x); }

}  // namespace detail

}  // namespace ouro
