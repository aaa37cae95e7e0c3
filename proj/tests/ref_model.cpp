// SPDX-License-Identifier: Apache-2.0
#include "ref_model.hpp"

#include <cassert>
#include <cmath>

namespace ref {

namespace {

int64_t product(const std::vector<int64_t>& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

}  // namespace

Arr make(std::vector<int64_t> shape) {
  Arr a;
  a.v.assign(static_cast<size_t>(product(shape)), 0.0);
  a.shape = std::move(shape);
  return a;
}

Arr from_floats(std::vector<int64_t> shape, const float* data, int64_t count) {
  Arr a = make(std::move(shape));
  assert(a.numel() == count);
  for (int64_t i = 0; i < count; ++i) a.v[i] = static_cast<double>(data[i]);
  return a;
}

#define REF_ELEMENTWISE(name, expr)                    \
  Arr name(const Arr& a, const Arr& b) {               \
    assert(a.shape == b.shape);                        \
    Arr o = make(a.shape);                             \
    for (size_t i = 0; i < a.v.size(); ++i) {          \
      double x = a.v[i], y = b.v[i];                   \
      o.v[i] = (expr);                                 \
    }                                                  \
    return o;                                          \
  }

REF_ELEMENTWISE(add, x + y)
REF_ELEMENTWISE(sub, x - y)
REF_ELEMENTWISE(mul, x* y)
#undef REF_ELEMENTWISE

Arr div(const Arr& a, const Arr& b, Margin* m) {
  assert(a.shape == b.shape);
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (m) m->note(std::fabs(b.v[i]));
    o.v[i] = a.v[i] / b.v[i];
  }
  return o;
}

Arr abs(const Arr& a, Margin* m) {
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (m) m->note(std::fabs(a.v[i]));
    o.v[i] = std::fabs(a.v[i]);
  }
  return o;
}

Arr maximum(const Arr& a, const Arr& b, Margin* m) {
  assert(a.shape == b.shape);
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (m) m->note(std::fabs(a.v[i] - b.v[i]));
    o.v[i] = a.v[i] >= b.v[i] ? a.v[i] : b.v[i];
  }
  return o;
}

Arr minimum(const Arr& a, const Arr& b, Margin* m) {
  assert(a.shape == b.shape);
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (m) m->note(std::fabs(a.v[i] - b.v[i]));
    o.v[i] = a.v[i] <= b.v[i] ? a.v[i] : b.v[i];
  }
  return o;
}

Arr relu(const Arr& a, Margin* m) {
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) {
    if (m) m->note(std::fabs(a.v[i]));
    o.v[i] = a.v[i] > 0.0 ? a.v[i] : 0.0;
  }
  return o;
}

Arr add_scalar(const Arr& a, double s) {
  Arr o = make(a.shape);
  for (size_t i = 0; i < a.v.size(); ++i) o.v[i] = a.v[i] + s;
  return o;
}

Arr matmul(const Arr& a, const Arr& b) {
  assert(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[1] == b.shape[0]);
  int64_t M = a.shape[0], K = a.shape[1], N = b.shape[1];
  Arr o = make({M, N});
  for (int64_t i = 0; i < M; ++i)
    for (int64_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < K; ++k) s += a.v[i * K + k] * b.v[k * N + j];
      o.v[i * N + j] = s;
    }
  return o;
}

Arr dense(const Arr& x, const Arr& w, const Arr& b) {
  int64_t N = x.shape[0], I = x.shape[1], O = w.shape[0];
  assert(w.shape[1] == I);
  Arr o = make({N, O});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t q = 0; q < O; ++q) {
      double s = b.numel() ? b.v[q] : 0.0;
      for (int64_t i = 0; i < I; ++i) s += x.v[n * I + i] * w.v[q * I + i];
      o.v[n * O + q] = s;
    }
  return o;
}

Arr conv2d(const Arr& x, const Arr& w, const Arr& b, int stride, int padding) {
  int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3];
  assert(w.shape[1] == C);
  int64_t OH = (H + 2 * padding - KH) / stride + 1;
  int64_t OW = (W + 2 * padding - KW) / stride + 1;
  Arr o = make({N, F, OH, OW});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < F; ++f)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double s = b.numel() ? b.v[f] : 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t ih = oh * stride + kh - padding;
                int64_t iw = ow * stride + kw - padding;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                s += x.v[((n * C + c) * H + ih) * W + iw] * w.v[((f * C + c) * KH + kh) * KW + kw];
              }
          o.v[((n * F + f) * OH + oh) * OW + ow] = s;
        }
  return o;
}

Arr maxpool2d(const Arr& x, int kernel, int stride, Margin* m) {
  int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  Arr o = make({N, C, OH, OW});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          double second = best;
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw) {
              double v = x.v[((n * C + c) * H + oh * stride + kh) * W + ow * stride + kw];
              if (v > best) {
                second = best;
                best = v;
              } else if (v > second) {
                second = v;
              }
            }
          if (m && std::isfinite(second)) m->note(best - second);
          o.v[((n * C + c) * OH + oh) * OW + ow] = best;
        }
  return o;
}

Arr batchnorm_train(const Arr& x, const Arr& gamma, const Arr& beta, double eps) {
  bool is4d = x.shape.size() == 4;
  int64_t N = x.shape[0], C = x.shape[1];
  int64_t S = is4d ? x.shape[2] * x.shape[3] : 1;
  Arr o = make(x.shape);
  for (int64_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t s = 0; s < S; ++s) mean += x.v[(n * C + c) * S + s];
    mean /= static_cast<double>(N * S);
    double var = 0.0;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t s = 0; s < S; ++s) {
        double d = x.v[(n * C + c) * S + s] - mean;
        var += d * d;
      }
    var /= static_cast<double>(N * S);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t s = 0; s < S; ++s) {
        size_t i = static_cast<size_t>((n * C + c) * S + s);
        o.v[i] = (x.v[i] - mean) * inv * gamma.v[c] + beta.v[c];
      }
  }
  return o;
}

Arr log_softmax(const Arr& x) {
  int64_t K = x.shape.back();
  int64_t rows = x.numel() / K;
  Arr o = make(x.shape);
  for (int64_t r = 0; r < rows; ++r) {
    double mx = x.v[r * K];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, x.v[r * K + k]);
    double lse = 0.0;
    for (int64_t k = 0; k < K; ++k) lse += std::exp(x.v[r * K + k] - mx);
    lse = std::log(lse) + mx;
    for (int64_t k = 0; k < K; ++k) o.v[r * K + k] = x.v[r * K + k] - lse;
  }
  return o;
}

double nll(const Arr& log_probs, const std::vector<int>& targets) {
  int64_t N = log_probs.shape[0], K = log_probs.shape[1];
  double s = 0.0;
  for (int64_t n = 0; n < N; ++n) s += log_probs.v[n * K + targets[static_cast<size_t>(n)]];
  return -s / static_cast<double>(N);
}

double sum(const Arr& a) {
  double s = 0.0;
  for (double v : a.v) s += v;
  return s;
}

double mean(const Arr& a) { return sum(a) / static_cast<double>(a.numel()); }

double r1(double w, double mu) { return std::fabs(std::fabs(w) - mu); }

double r2(double w, double mu) { return std::fabs(std::fabs(std::fabs(w) - mu / 2) - mu / 2); }

double stq_reg(double w, double mu, double beta, Margin* m) {
  double aw = std::fabs(w);
  double a = std::fabs(aw - mu);
  double b = std::tan(beta) * aw;
  if (m) {
    m->note(aw);            // |w| kink at 0
    m->note(std::fabs(aw - mu));  // scale-arm kink at |w| = mu
    m->note(std::fabs(a - b));    // arm tie
  }
  return a < b ? a : b;
}

double stq_reg_layer(const Arr& w, const std::vector<double>& mu, double beta, double lambda,
                     double gamma, Margin* m) {
  int64_t filters = w.shape[0];
  int64_t block = w.numel() / filters;
  double total = 0.0;
  for (int64_t f = 0; f < filters; ++f) {
    double mf = mu.size() == 1 ? mu[0] : mu[static_cast<size_t>(f)];
    for (int64_t i = 0; i < block; ++i) total += stq_reg(w.v[f * block + i], mf, beta, m);
    total += gamma / std::tan(beta);
  }
  return lambda / static_cast<double>(w.numel()) * total;
}

}  // namespace ref
