// SPDX-License-Identifier: Apache-2.0
#include "stq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace stq {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

namespace detail {

float* Node::grad_data() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad.data();
}

}  // namespace detail

using detail::Node;

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<Node> new_node(Shape shape) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(shape_numel(n->shape)));
  n->taped = g_no_grad_depth == 0;
  return n;
}

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor argument");
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch, " + detail);
}

bool record(std::initializer_list<const Tensor*> ins) {
  if (g_no_grad_depth > 0) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->node()->requires_grad) return true;
  return false;
}

void finish(const std::shared_ptr<Node>& out, const char* op,
            std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> bw) {
  out->op = op;
  out->requires_grad = true;
  out->inputs = std::move(inputs);
  out->backward_fn = std::move(bw);
}

// ---- broadcasting ----------------------------------------------------------

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_error(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `from` right-aligned into `to`, 0 on broadcast dims.
std::vector<int64_t> bcast_strides(const Shape& from, const Shape& to) {
  std::vector<int64_t> st(to.size(), 0);
  int64_t stride = 1;
  for (size_t i = 0; i < from.size(); ++i) {
    size_t fi = from.size() - 1 - i;
    size_t ti = to.size() - 1 - i;
    st[ti] = (from[fi] == 1 && to[ti] != 1) ? 0 : stride;
    stride *= from[fi];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) in ascending out_index order.
template <class F>
void bcast_for_each(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> sa = bcast_strides(a, out), sb = bcast_strides(b, out);
  std::vector<int64_t> idx(rank, 0);
  int64_t total = shape_numel(out);
  int64_t ai = 0, bi = 0;
  for (int64_t i = 0; i < total; ++i) {
    f(i, ai, bi);
    for (size_t dpos = rank; dpos-- > 0;) {
      idx[dpos]++;
      ai += sa[dpos];
      bi += sb[dpos];
      if (idx[dpos] < out[dpos]) break;
      ai -= sa[dpos] * out[dpos];
      bi -= sb[dpos] * out[dpos];
      idx[dpos] = 0;
    }
  }
}

// ---- GEMM kernels (fixed summation order, f32 accumulation) ----------------

constexpr int64_t kGemmKC = 256;
constexpr int64_t kGemmNB = 512;

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(int64_t M, int64_t N, int64_t K, const float* __restrict A,
             const float* __restrict B, float* __restrict C, bool accumulate) {
  for (int64_t k0 = 0; k0 < K; k0 += kGemmKC) {
    int64_t kc = std::min(kGemmKC, K - k0);
    for (int64_t j0 = 0; j0 < N; j0 += kGemmNB) {
      int64_t nb = std::min(kGemmNB, N - j0);
      for (int64_t i = 0; i < M; ++i) {
        float* __restrict c = C + i * N + j0;
        if (k0 == 0 && !accumulate)
          for (int64_t j = 0; j < nb; ++j) c[j] = 0.0f;
        for (int64_t k = k0; k < k0 + kc; ++k) {
          float a = A[i * K + k];
          const float* __restrict b = B + k * N + j0;
          for (int64_t j = 0; j < nb; ++j) c[j] += a * b[j];
        }
      }
    }
  }
}

// Deterministic vector-friendly dot product: lane-wise partial sums combined
// in a fixed order.
float det_dot(const float* __restrict a, const float* __restrict b, int64_t n) {
  constexpr int64_t L = 16;
  float acc[L] = {0};
  int64_t k = 0;
  for (; k + L <= n; k += L)
    for (int64_t l = 0; l < L; ++l) acc[l] += a[k + l] * b[k + l];
  float tail = 0.0f;
  for (; k < n; ++k) tail += a[k] * b[k];
  float s = 0.0f;
  for (int64_t l = 0; l < L; ++l) s += acc[l];
  return s + tail;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(int64_t M, int64_t N, int64_t K, const float* __restrict A,
             const float* __restrict B, float* __restrict C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) {
      float s = det_dot(A + i * K, B + j * K, K);
      if (accumulate)
        C[i * N + j] += s;
      else
        C[i * N + j] = s;
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(int64_t M, int64_t N, int64_t K, const float* __restrict A,
             const float* __restrict B, float* __restrict C, bool accumulate) {
  for (int64_t j0 = 0; j0 < N; j0 += kGemmNB) {
    int64_t nb = std::min(kGemmNB, N - j0);
    if (!accumulate)
      for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < nb; ++j) C[i * N + j0 + j] = 0.0f;
    for (int64_t k = 0; k < K; ++k)
      for (int64_t i = 0; i < M; ++i) {
        float a = A[k * M + i];
        if (a == 0.0f) continue;
        const float* __restrict b = B + k * N + j0;
        float* __restrict c = C + i * N + j0;
        for (int64_t j = 0; j < nb; ++j) c[j] += a * b[j];
      }
  }
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  const_cast<std::shared_ptr<Node>&>(t.node_) = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape) { return wrap(new_node(std::move(shape))); }

Tensor Tensor::full(Shape shape, float v) {
  auto n = new_node(std::move(shape));
  std::fill(n->value.begin(), n->value.end(), v);
  return wrap(std::move(n));
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    shape_error("from_data", shape_str(shape) + " does not hold " + std::to_string(data.size()) + " values");
  auto n = new_node(std::move(shape));
  n->value = std::move(data);
  return wrap(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, float mean) {
  auto n = new_node(std::move(shape));
  for (float& v : n->value) v = mean + stddev * static_cast<float>(rng.normal());
  return wrap(std::move(n));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, float lo, float hi) {
  auto n = new_node(std::move(shape));
  for (float& v : n->value) v = lo + (hi - lo) * rng.next_float();
  return wrap(std::move(n));
}

const Shape& Tensor::shape() const {
  check_defined("shape", *this);
  return node_->shape;
}

int64_t Tensor::numel() const { return defined() ? static_cast<int64_t>(node_->value.size()) : 0; }

int64_t Tensor::dim(size_t i) const {
  const Shape& s = shape();
  if (i >= s.size()) throw std::invalid_argument("dim: index " + std::to_string(i) + " out of rank " + std::to_string(s.size()));
  return s[i];
}

std::span<const float> Tensor::data() const {
  check_defined("data", *this);
  return node_->value;
}

std::span<float> Tensor::raw_data() {
  check_defined("raw_data", *this);
  if (!is_leaf()) throw std::logic_error("raw_data: only leaf tensors are mutable");
  return node_->value;
}

float Tensor::item() const {
  check_defined("item", *this);
  if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  check_defined("set_requires_grad", *this);
  if (v && !is_leaf()) throw std::logic_error("set_requires_grad: only valid on leaf tensors");
  node_->requires_grad = v;
  return *this;
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

bool Tensor::is_leaf() const { return defined() && node_->inputs.empty() && !node_->backward_fn; }

Tensor Tensor::grad() const {
  check_defined("grad", *this);
  auto g = new_node(node_->shape);
  if (!node_->grad.empty()) g->value = node_->grad;
  return wrap(std::move(g));
}

void Tensor::zero_grad() {
  check_defined("zero_grad", *this);
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- elementwise binary ops -------------------------------------------------

namespace {

template <class FwdFn, class BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn&& fwd, BwdFn&& bwd) {
  check_defined(name, a);
  check_defined(name, b);
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  auto out = new_node(os);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out->value.data();
  if (a.shape() == os && b.shape() == os) {
    int64_t n = out->value.size();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else {
    bcast_for_each(os, a.shape(), b.shape(),
                   [&](int64_t i, int64_t ai, int64_t bi) { po[i] = fwd(pa[ai], pb[bi]); });
  }
  if (record({&a, &b})) {
    auto na = a.node(), nb = b.node();
    finish(out, name, {na, nb}, [na, nb, bwd](Node& self) {
      const float* g = self.grad.data();
      const float* va = na->value.data();
      const float* vb = nb->value.data();
      const float* vo = self.value.data();
      float* ga = na->requires_grad ? na->grad_data() : nullptr;
      float* gb = nb->requires_grad ? nb->grad_data() : nullptr;
      if (na->shape == self.shape && nb->shape == self.shape) {
        int64_t n = self.value.size();
        for (int64_t i = 0; i < n; ++i) bwd(g[i], va[i], vb[i], vo[i], ga ? ga + i : nullptr, gb ? gb + i : nullptr);
      } else {
        bcast_for_each(self.shape, na->shape, nb->shape, [&](int64_t i, int64_t ai, int64_t bi) {
          bwd(g[i], va[ai], vb[bi], vo[i], ga ? ga + ai : nullptr, gb ? gb + bi : nullptr);
        });
      }
    });
  }
  return Tensor::wrap(std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float g, float, float, float, float* ga, float* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float g, float, float, float, float* ga, float* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float g, float x, float y, float, float* ga, float* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / y; },
      [](float g, float, float y, float o, float* ga, float* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * o / y;
      });
}

// Ties route the gradient to the first argument.
Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "max", a, b, [](float x, float y) { return x >= y ? x : y; },
      [](float g, float x, float y, float, float* ga, float* gb) {
        if (x >= y) {
          if (ga) *ga += g;
        } else if (gb) {
          *gb += g;
        }
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "min", a, b, [](float x, float y) { return x <= y ? x : y; },
      [](float g, float x, float y, float, float* ga, float* gb) {
        if (x <= y) {
          if (ga) *ga += g;
        } else if (gb) {
          *gb += g;
        }
      });
}

// ---- scalar and unary ops ---------------------------------------------------

namespace {

template <class FwdFn, class BwdFn>
Tensor unary_op(const char* name, const Tensor& x, FwdFn&& fwd, BwdFn&& bwd) {
  check_defined(name, x);
  auto out = new_node(x.shape());
  const float* px = x.data().data();
  float* po = out->value.data();
  int64_t n = out->value.size();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (record({&x})) {
    auto nx = x.node();
    finish(out, name, {nx}, [nx, bwd](Node& self) {
      if (!nx->requires_grad) return;
      const float* g = self.grad.data();
      const float* vx = nx->value.data();
      float* gx = nx->grad_data();
      int64_t count = self.value.size();
      for (int64_t i = 0; i < count; ++i) gx[i] += bwd(g[i], vx[i]);
    });
  }
  return Tensor::wrap(std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, float b) {
  return unary_op("add_scalar", a, [b](float x) { return x + b; }, [](float g, float) { return g; });
}
Tensor sub(const Tensor& a, float b) { return add(a, -b); }
Tensor mul(const Tensor& a, float b) {
  return unary_op("mul_scalar", a, [b](float x) { return x * b; }, [b](float g, float) { return g * b; });
}
Tensor div(const Tensor& a, float b) {
  return unary_op("div_scalar", a, [b](float x) { return x / b; }, [b](float g, float) { return g / b; });
}

Tensor neg(const Tensor& x) {
  return unary_op("neg", x, [](float v) { return -v; }, [](float g, float) { return -g; });
}

Tensor abs(const Tensor& x) {
  return unary_op("abs", x, [](float v) { return std::fabs(v); },
                  [](float g, float v) { return v >= 0.0f ? g : -g; });
}

Tensor relu(const Tensor& x) {
  // relu(x) = max(x, 0) with the tie at 0 routed to the first argument.
  return unary_op("relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
                  [](float g, float v) { return v >= 0.0f ? g : 0.0f; });
}

// ---- matmul / linear --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", a);
  check_defined("matmul", b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    shape_error("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2)
    shape_error("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  auto out = new_node({M, N});
  gemm_nn(M, N, K, a.data().data(), b.data().data(), out->value.data(), false);
  if (record({&a, &b})) {
    auto na = a.node(), nb = b.node();
    finish(out, "matmul", {na, nb}, [na, nb, M, N, K](Node& self) {
      const float* g = self.grad.data();
      if (na->requires_grad) gemm_nt(M, K, N, g, nb->value.data(), na->grad_data(), true);
      if (nb->requires_grad) gemm_tn(K, N, M, na->value.data(), g, nb->grad_data(), true);
    });
  }
  return Tensor::wrap(std::move(out));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_defined("linear", x);
  check_defined("linear", w);
  if (x.shape().size() != 2 || w.shape().size() != 2)
    shape_error("linear", "expects x:[N,I], w:[O,I], got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  int64_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (w.dim(1) != I)
    shape_error("linear", "x " + shape_str(x.shape()) + " incompatible with w " + shape_str(w.shape()));
  if (b.defined() && b.numel() != O)
    shape_error("linear", "bias " + shape_str(b.shape()) + " does not match " + std::to_string(O) + " outputs");
  auto out = new_node({N, O});
  float* po = out->value.data();
  gemm_nt(N, O, I, x.data().data(), w.data().data(), po, false);
  if (b.defined()) {
    const float* pb = b.data().data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t o = 0; o < O; ++o) po[n * O + o] += pb[o];
  }
  if (record({&x, &w, &b})) {
    auto nx = x.node(), nw = w.node();
    auto nb = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<Node>> ins = {nx, nw};
    if (nb) ins.push_back(nb);
    finish(out, "linear", std::move(ins), [nx, nw, nb, N, I, O](Node& self) {
      const float* g = self.grad.data();
      if (nx->requires_grad) gemm_nn(N, I, O, g, nw->value.data(), nx->grad_data(), true);
      if (nw->requires_grad) gemm_tn(O, I, N, g, nx->value.data(), nw->grad_data(), true);
      if (nb && nb->requires_grad) {
        float* gb = nb->grad_data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
      }
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- conv2d -----------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t N, C, H, W, F, KH, KW, OH, OW;
  int stride, padding;
  int64_t ckk() const { return C * KH * KW; }
  int64_t patches() const { return OH * OW; }
};

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.shape().size() != 4 || w.shape().size() != 4)
    shape_error(op, "expects x:[N,C,H,W], w:[F,C,KH,KW], got " + shape_str(x.shape()) + " and " +
                        shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  if (padding < 0) throw std::invalid_argument(std::string(op) + ": padding must be >= 0");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, padding};
  if (w.dim(1) != d.C)
    shape_error(op, "input channels " + std::to_string(d.C) + " != kernel channels " + std::to_string(w.dim(1)));
  d.OH = (d.H + 2 * padding - d.KH) / stride + 1;
  d.OW = (d.W + 2 * padding - d.KW) / stride + 1;
  if (d.H + 2 * padding < d.KH || d.W + 2 * padding < d.KW)
    shape_error(op, "kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  return d;
}

// col[(C*KH*KW), (OH*OW)] from one image x[C,H,W], zero padding.
void im2col(const ConvDims& d, const float* x, float* col) {
  int64_t P = d.patches();
  for (int64_t c = 0; c < d.C; ++c) {
    const float* xc = x + c * d.H * d.W;
    for (int64_t kh = 0; kh < d.KH; ++kh)
      for (int64_t kw = 0; kw < d.KW; ++kw) {
        float* row = col + ((c * d.KH + kh) * d.KW + kw) * P;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
          int64_t ih = oh * d.stride + kh - d.padding;
          if (ih < 0 || ih >= d.H) {
            for (int64_t ow = 0; ow < d.OW; ++ow) row[oh * d.OW + ow] = 0.0f;
            continue;
          }
          const float* xr = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.OW; ++ow) {
            int64_t iw = ow * d.stride + kw - d.padding;
            row[oh * d.OW + ow] = (iw < 0 || iw >= d.W) ? 0.0f : xr[iw];
          }
        }
      }
  }
}

// Scatter-add of col gradients back into one image gradient gx[C,H,W].
void col2im_add(const ConvDims& d, const float* col, float* gx) {
  int64_t P = d.patches();
  for (int64_t c = 0; c < d.C; ++c) {
    float* xc = gx + c * d.H * d.W;
    for (int64_t kh = 0; kh < d.KH; ++kh)
      for (int64_t kw = 0; kw < d.KW; ++kw) {
        const float* row = col + ((c * d.KH + kh) * d.KW + kw) * P;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
          int64_t ih = oh * d.stride + kh - d.padding;
          if (ih < 0 || ih >= d.H) continue;
          float* xr = xc + ih * d.W;
          for (int64_t ow = 0; ow < d.OW; ++ow) {
            int64_t iw = ow * d.stride + kw - d.padding;
            if (iw >= 0 && iw < d.W) xr[iw] += row[oh * d.OW + ow];
          }
        }
      }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  check_defined("conv2d", x);
  check_defined("conv2d", w);
  ConvDims d = conv_dims("conv2d", x, w, stride, padding);
  if (b.defined() && b.numel() != d.F)
    shape_error("conv2d", "bias " + shape_str(b.shape()) + " does not match " + std::to_string(d.F) + " filters");
  auto out = new_node({d.N, d.F, d.OH, d.OW});
  int64_t P = d.patches(), CKK = d.ckk();
  std::vector<float> col(static_cast<size_t>(CKK * P));
  const float* px = x.data().data();
  const float* pw = w.data().data();
  const float* pb = b.defined() ? b.data().data() : nullptr;
  float* po = out->value.data();
  for (int64_t n = 0; n < d.N; ++n) {
    im2col(d, px + n * d.C * d.H * d.W, col.data());
    float* on = po + n * d.F * P;
    gemm_nn(d.F, P, CKK, pw, col.data(), on, false);
    if (pb)
      for (int64_t f = 0; f < d.F; ++f)
        for (int64_t p = 0; p < P; ++p) on[f * P + p] += pb[f];
  }
  if (record({&x, &w, &b})) {
    auto nx = x.node(), nw = w.node();
    auto nb = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<Node>> ins = {nx, nw};
    if (nb) ins.push_back(nb);
    finish(out, "conv2d", std::move(ins), [nx, nw, nb, d](Node& self) {
      int64_t P = d.patches(), CKK = d.ckk();
      const float* g = self.grad.data();
      std::vector<float> col(static_cast<size_t>(CKK * P));
      std::vector<float> dcol;
      float* gw = nw->requires_grad ? nw->grad_data() : nullptr;
      float* gx = nx->requires_grad ? nx->grad_data() : nullptr;
      if (gx) dcol.resize(static_cast<size_t>(CKK * P));
      for (int64_t n = 0; n < d.N; ++n) {
        const float* gn = g + n * d.F * P;
        if (gw) {
          im2col(d, nx->value.data() + n * d.C * d.H * d.W, col.data());
          gemm_nt(d.F, CKK, P, gn, col.data(), gw, true);
        }
        if (gx) {
          gemm_tn(CKK, P, d.F, nw->value.data(), gn, dcol.data(), false);
          col2im_add(d, dcol.data(), gx + n * d.C * d.H * d.W);
        }
      }
      if (nb && nb->requires_grad) {
        float* gb = nb->grad_data();
        for (int64_t n = 0; n < d.N; ++n)
          for (int64_t f = 0; f < d.F; ++f) {
            const float* gn = g + (n * d.F + f) * P;
            float s = 0.0f;
            for (int64_t p = 0; p < P; ++p) s += gn[p];
            gb[f] += s;
          }
      }
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- maxpool ----------------------------------------------------------------

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
  check_defined("maxpool2d", x);
  if (x.shape().size() != 4)
    shape_error("maxpool2d", "expects [N,C,H,W], got " + shape_str(x.shape()));
  if (kernel < 1 || stride < 1) throw std::invalid_argument("maxpool2d: kernel and stride must be >= 1");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < kernel || W < kernel)
    shape_error("maxpool2d", "kernel " + std::to_string(kernel) + " larger than input " + shape_str(x.shape()));
  int64_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  auto out = new_node({N, C, OH, OW});
  std::vector<int32_t> argmax(out->value.size());
  const float* px = x.data().data();
  float* po = out->value.data();
  int64_t oi = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float* plane = px + (n * C + c) * H * W;
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow, ++oi) {
          // First maximum in scan order wins on ties.
          int64_t h0 = oh * stride, w0 = ow * stride;
          float best = plane[h0 * W + w0];
          int32_t besti = static_cast<int32_t>(h0 * W + w0);
          for (int64_t kh = 0; kh < kernel; ++kh)
            for (int64_t kw = 0; kw < kernel; ++kw) {
              int64_t idx = (h0 + kh) * W + (w0 + kw);
              if (plane[idx] > best) {
                best = plane[idx];
                besti = static_cast<int32_t>(idx);
              }
            }
          po[oi] = best;
          argmax[oi] = besti;
        }
    }
  if (record({&x})) {
    auto nx = x.node();
    finish(out, "maxpool2d", {nx}, [nx, argmax = std::move(argmax), N, C, H, W, OH, OW](Node& self) {
      if (!nx->requires_grad) return;
      float* gx = nx->grad_data();
      const float* g = self.grad.data();
      int64_t oi = 0;
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          float* plane = gx + (n * C + c) * H * W;
          for (int64_t p = 0; p < OH * OW; ++p, ++oi) plane[argmax[oi]] += g[oi];
        }
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- batchnorm ---------------------------------------------------------------

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 std::vector<float>& running_mean, std::vector<float>& running_var,
                 bool training, float momentum, float eps) {
  check_defined("batchnorm", x);
  check_defined("batchnorm", gamma);
  check_defined("batchnorm", beta);
  size_t rank = x.shape().size();
  if (rank != 2 && rank != 4)
    shape_error("batchnorm", "expects [N,C,H,W] or [N,F], got " + shape_str(x.shape()));
  int64_t N = x.dim(0), C = x.dim(1);
  int64_t S = rank == 4 ? x.dim(2) * x.dim(3) : 1;  // spatial extent per channel
  if (gamma.numel() != C || beta.numel() != C || static_cast<int64_t>(running_mean.size()) != C ||
      static_cast<int64_t>(running_var.size()) != C)
    shape_error("batchnorm", "parameter size does not match " + std::to_string(C) + " channels");
  int64_t per_channel = N * S;
  auto out = new_node(x.shape());
  const float* px = x.data().data();
  const float* pg = gamma.data().data();
  const float* pbt = beta.data().data();
  float* po = out->value.data();

  std::vector<float> mean_v(C), invstd_v(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      float m = 0.0f;
      for (int64_t n = 0; n < N; ++n) {
        const float* base = px + (n * C + c) * S;
        for (int64_t s = 0; s < S; ++s) m += base[s];
      }
      m /= static_cast<float>(per_channel);
      float var = 0.0f;
      for (int64_t n = 0; n < N; ++n) {
        const float* base = px + (n * C + c) * S;
        for (int64_t s = 0; s < S; ++s) {
          float dlt = base[s] - m;
          var += dlt * dlt;
        }
      }
      var /= static_cast<float>(per_channel);
      mean_v[c] = m;
      invstd_v[c] = 1.0f / std::sqrt(var + eps);
      // Running variance keeps the unbiased estimate.
      float unbiased = per_channel > 1 ? var * static_cast<float>(per_channel) / static_cast<float>(per_channel - 1)
                                       : var;
      running_mean[c] = momentum * running_mean[c] + (1.0f - momentum) * m;
      running_var[c] = momentum * running_var[c] + (1.0f - momentum) * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mean_v[c] = running_mean[c];
      invstd_v[c] = 1.0f / std::sqrt(running_var[c] + eps);
    }
  }
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const float* base = px + (n * C + c) * S;
      float* obase = po + (n * C + c) * S;
      float m = mean_v[c], is = invstd_v[c], gm = pg[c], bt = pbt[c];
      for (int64_t s = 0; s < S; ++s) obase[s] = (base[s] - m) * is * gm + bt;
    }

  if (record({&x, &gamma, &beta})) {
    auto nx = x.node(), ng = gamma.node(), nb = beta.node();
    finish(out, "batchnorm", {nx, ng, nb},
           [nx, ng, nb, mean_v = std::move(mean_v), invstd_v = std::move(invstd_v), N, C, S, training](Node& self) {
             const float* g = self.grad.data();
             const float* px = nx->value.data();
             const float* pg = ng->value.data();
             int64_t per_channel = N * S;
             float* gx = nx->requires_grad ? nx->grad_data() : nullptr;
             float* gg = ng->requires_grad ? ng->grad_data() : nullptr;
             float* gb = nb->requires_grad ? nb->grad_data() : nullptr;
             for (int64_t c = 0; c < C; ++c) {
               float m = mean_v[c], is = invstd_v[c];
               float sum_g = 0.0f, sum_gx = 0.0f;  // sums of g and g*(x-m)
               for (int64_t n = 0; n < N; ++n) {
                 const float* gbase = g + (n * C + c) * S;
                 const float* xbase = px + (n * C + c) * S;
                 for (int64_t s = 0; s < S; ++s) {
                   sum_g += gbase[s];
                   sum_gx += gbase[s] * (xbase[s] - m);
                 }
               }
               if (gg) gg[c] += sum_gx * is;
               if (gb) gb[c] += sum_g;
               if (!gx) continue;
               float gamma_c = pg[c];
               if (training) {
                 // dx = (γ·is/n) * (n·g - Σg - (x-m)·is² · Σ g(x-m))
                 float k1 = gamma_c * is / static_cast<float>(per_channel);
                 float k2 = sum_gx * is * is;
                 for (int64_t n = 0; n < N; ++n) {
                   const float* gbase = g + (n * C + c) * S;
                   const float* xbase = px + (n * C + c) * S;
                   float* gxbase = gx + (n * C + c) * S;
                   for (int64_t s = 0; s < S; ++s)
                     gxbase[s] += k1 * (static_cast<float>(per_channel) * gbase[s] - sum_g -
                                        (xbase[s] - m) * k2);
                 }
               } else {
                 float k = gamma_c * is;
                 for (int64_t n = 0; n < N; ++n) {
                   const float* gbase = g + (n * C + c) * S;
                   float* gxbase = gx + (n * C + c) * S;
                   for (int64_t s = 0; s < S; ++s) gxbase[s] += k * gbase[s];
                 }
               }
             }
           });
  }
  return Tensor::wrap(std::move(out));
}

// ---- softmax / loss ----------------------------------------------------------

Tensor log_softmax(const Tensor& x) {
  check_defined("log_softmax", x);
  if (x.shape().empty()) shape_error("log_softmax", "expects rank >= 1, got scalar");
  int64_t K = x.shape().back();
  int64_t rows = x.numel() / K;
  auto out = new_node(x.shape());
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = px + r * K;
    float* yr = po + r * K;
    float mx = xr[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
    float lse = 0.0f;
    for (int64_t k = 0; k < K; ++k) lse += std::exp(xr[k] - mx);
    lse = std::log(lse) + mx;
    for (int64_t k = 0; k < K; ++k) yr[k] = xr[k] - lse;
  }
  if (record({&x})) {
    auto nx = x.node();
    finish(out, "log_softmax", {nx}, [nx, rows, K](Node& self) {
      if (!nx->requires_grad) return;
      const float* g = self.grad.data();
      const float* y = self.value.data();
      float* gx = nx->grad_data();
      for (int64_t r = 0; r < rows; ++r) {
        const float* gr = g + r * K;
        const float* yr = y + r * K;
        float* gxr = gx + r * K;
        float gsum = 0.0f;
        for (int64_t k = 0; k < K; ++k) gsum += gr[k];
        for (int64_t k = 0; k < K; ++k) gxr[k] += gr[k] - std::exp(yr[k]) * gsum;
      }
    });
  }
  return Tensor::wrap(std::move(out));
}

Tensor nll_loss(const Tensor& log_probs, std::vector<int> targets) {
  check_defined("nll_loss", log_probs);
  if (log_probs.shape().size() != 2)
    shape_error("nll_loss", "expects [N,K] log-probabilities, got " + shape_str(log_probs.shape()));
  int64_t N = log_probs.dim(0), K = log_probs.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    shape_error("nll_loss", std::to_string(targets.size()) + " targets for " + std::to_string(N) + " rows");
  for (int t : targets)
    if (t < 0 || t >= K)
      throw std::invalid_argument("nll_loss: target " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
  auto out = new_node({1});
  const float* p = log_probs.data().data();
  float s = 0.0f;
  for (int64_t n = 0; n < N; ++n) s += p[n * K + targets[n]];
  out->value[0] = -s / static_cast<float>(N);
  if (record({&log_probs})) {
    auto nx = log_probs.node();
    finish(out, "nll_loss", {nx}, [nx, targets = std::move(targets), N, K](Node& self) {
      if (!nx->requires_grad) return;
      float g = self.grad[0];
      float* gx = nx->grad_data();
      float scale = -g / static_cast<float>(N);
      for (int64_t n = 0; n < N; ++n) gx[n * K + targets[n]] += scale;
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- reductions / shape ops ---------------------------------------------------

Tensor sum(const Tensor& x) {
  check_defined("sum", x);
  auto out = new_node({1});
  float s = 0.0f;
  for (float v : x.data()) s += v;
  out->value[0] = s;
  if (record({&x})) {
    auto nx = x.node();
    finish(out, "sum", {nx}, [nx](Node& self) {
      if (!nx->requires_grad) return;
      float g = self.grad[0];
      float* gx = nx->grad_data();
      int64_t n = nx->value.size();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return Tensor::wrap(std::move(out));
}

Tensor mean(const Tensor& x) {
  check_defined("mean", x);
  if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  Tensor s = sum(x);
  return div(s, static_cast<float>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined("reshape", x);
  if (shape_numel(shape) != x.numel())
    shape_error("reshape", shape_str(x.shape()) + " cannot view as " + shape_str(shape));
  auto out = new_node(std::move(shape));
  out->value = std::vector<float>(x.data().begin(), x.data().end());
  if (record({&x})) {
    auto nx = x.node();
    finish(out, "reshape", {nx}, [nx](Node& self) {
      if (!nx->requires_grad) return;
      float* gx = nx->grad_data();
      const float* g = self.grad.data();
      int64_t n = self.value.size();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return Tensor::wrap(std::move(out));
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  check_defined("broadcast_to", x);
  Shape os = broadcast_shape("broadcast_to", x.shape(), shape);
  if (os != shape)
    shape_error("broadcast_to", shape_str(x.shape()) + " does not broadcast to " + shape_str(shape));
  auto out = new_node(shape);
  const float* px = x.data().data();
  float* po = out->value.data();
  bcast_for_each(shape, x.shape(), shape, [&](int64_t i, int64_t ai, int64_t) { po[i] = px[ai]; });
  if (record({&x})) {
    auto nx = x.node();
    finish(out, "broadcast_to", {nx}, [nx](Node& self) {
      if (!nx->requires_grad) return;
      float* gx = nx->grad_data();
      const float* g = self.grad.data();
      bcast_for_each(self.shape, nx->shape, self.shape,
                     [&](int64_t i, int64_t ai, int64_t) { gx[ai] += g[i]; });
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- custom gradient ----------------------------------------------------------

Tensor custom_unary(
    const Tensor& x, const char* name,
    std::function<void(std::span<const float>, std::span<float>)> fwd,
    std::function<void(std::span<const float>, std::span<const float>, std::span<float>)> bwd) {
  check_defined(name, x);
  auto out = new_node(x.shape());
  fwd(x.data(), out->value);
  if (record({&x})) {
    auto nx = x.node();
    finish(out, name, {nx}, [nx, bwd = std::move(bwd)](Node& self) {
      if (!nx->requires_grad) return;
      std::vector<float> gx(nx->value.size(), 0.0f);
      bwd(nx->value, self.grad, gx);
      float* acc = nx->grad_data();
      for (size_t i = 0; i < gx.size(); ++i) acc[i] += gx[i];
    });
  }
  return Tensor::wrap(std::move(out));
}

// ---- dispatcher -----------------------------------------------------------------

Tensor forward_op(OpKind kind, std::span<const Tensor> inputs, const OpParams& params) {
  auto want = [&](size_t n) {
    if (inputs.size() != n)
      throw std::invalid_argument("forward_op: operation expects " + std::to_string(n) + " inputs, got " +
                                  std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Add: want(2); return add(inputs[0], inputs[1]);
    case OpKind::Sub: want(2); return sub(inputs[0], inputs[1]);
    case OpKind::Mul: want(2); return mul(inputs[0], inputs[1]);
    case OpKind::Div: want(2); return div(inputs[0], inputs[1]);
    case OpKind::Maximum: want(2); return maximum(inputs[0], inputs[1]);
    case OpKind::Minimum: want(2); return minimum(inputs[0], inputs[1]);
    case OpKind::Neg: want(1); return neg(inputs[0]);
    case OpKind::Abs: want(1); return abs(inputs[0]);
    case OpKind::Relu: want(1); return relu(inputs[0]);
    case OpKind::MatMul: want(2); return matmul(inputs[0], inputs[1]);
    case OpKind::Conv2d:
      if (inputs.size() == 2) return conv2d(inputs[0], inputs[1], Tensor(), params.stride, params.padding);
      want(3);
      return conv2d(inputs[0], inputs[1], inputs[2], params.stride, params.padding);
    case OpKind::MaxPool2d: want(1); return maxpool2d(inputs[0], params.kernel, params.stride);
    case OpKind::LogSoftmax: want(1); return log_softmax(inputs[0]);
    case OpKind::Sum: want(1); return sum(inputs[0]);
    case OpKind::Mean: want(1); return mean(inputs[0]);
  }
  throw std::invalid_argument("forward_op: unknown operation kind");
}

// ---- backward ------------------------------------------------------------------

void backward(const Tensor& root) {
  check_defined("backward", root);
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.shape()));
  Node* r = root.node().get();
  if (!r->taped) throw std::invalid_argument("backward: root was not produced under taping");
  // Post-order DFS; reverse iteration then visits each node after all of its
  // consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  r->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

}  // namespace stq
