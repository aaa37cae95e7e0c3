// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stq/rng.hpp"

namespace stq {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shapes_equal(const Shape& a, const Shape& b);

namespace detail {

// One recorded value in the computation graph. Leaves have no inputs and no
// backward rule; interior nodes own a closure that routes the upstream
// gradient to the input nodes.
struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool taped = true;  // created while taping was enabled
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  float* grad_data();  // allocates zeroed storage on demand
};

}  // namespace detail

// Dense float32 tensor, row-major, immutable once produced by an operation.
// Copying a Tensor copies a handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float v);
  static Tensor scalar(float v);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, float mean = 0.0f);
  static Tensor uniform(Shape shape, Rng& rng, float lo, float hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t dim(size_t i) const;

  std::span<const float> data() const;
  // Mutable view of a leaf's storage (parameter updates between steps).
  std::span<float> raw_data();

  float item() const;  // single-element tensors only

  Tensor& set_requires_grad(bool v = true);
  bool requires_grad() const;
  bool is_leaf() const;

  // Gradient accumulated by the last backward() pass (zeros if untouched).
  Tensor grad() const;
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Taping is on by default; a NoGradGuard disables graph recording in scope.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// Elementwise with NumPy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);  // tie -> first argument
Tensor minimum(const Tensor& a, const Tensor& b);  // tie -> first argument

Tensor add(const Tensor& a, float b);
Tensor sub(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);
Tensor div(const Tensor& a, float b);

Tensor neg(const Tensor& x);
Tensor abs(const Tensor& x);  // d|x|/dx at 0 fixed to +1
Tensor relu(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
// y = x * w^T + b with x:[N,I], w:[O,I], b:[O] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// x:[N,C,H,W], w:[F,C,KH,KW], b:[F] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
Tensor maxpool2d(const Tensor& x, int kernel, int stride);
// Per-channel batch normalization over [N,C,H,W] or [N,F].
// running_mean/var are module buffers, updated in training mode only.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::vector<float>& running_mean, std::vector<float>& running_var,
                 bool training, float momentum, float eps);
Tensor log_softmax(const Tensor& x);  // over the last dimension
Tensor nll_loss(const Tensor& log_probs, std::vector<int> targets);  // mean reduction

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// Forward behaves as `fwd`; backward applies `bwd` verbatim:
// bwd(x_values, upstream, grad_x_out).
Tensor custom_unary(
    const Tensor& x, const char* name,
    std::function<void(std::span<const float>, std::span<float>)> fwd,
    std::function<void(std::span<const float>, std::span<const float>, std::span<float>)> bwd);

// Closed operation set, dispatchable by identifier.
enum class OpKind {
  Add, Sub, Mul, Div, Maximum, Minimum, Neg, Abs, Relu,
  MatMul, Conv2d, MaxPool2d, LogSoftmax, Sum, Mean,
};
struct OpParams {
  int stride = 1;
  int padding = 0;
  int kernel = 2;
};
Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpParams& params = {});

// Reverse-mode sweep from a scalar root produced under taping. Visits each
// recorded node once in reverse topological order and accumulates gradients
// on every leaf with requires_grad set.
void backward(const Tensor& root);

}  // namespace stq
