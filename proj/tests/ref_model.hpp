// SPDX-License-Identifier: Apache-2.0
//
// Independent double-precision reference implementations used to cross-check
// the float32 engine with central finite differences. Deliberately written as
// plain loops with no code shared with the library.
#pragma once

#include <cstdint>
#include <limits>
#include <vector>

namespace ref {

struct Arr {
  std::vector<int64_t> shape;
  std::vector<double> v;

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(size_t i) const { return shape[i]; }
};

Arr make(std::vector<int64_t> shape);
Arr from_floats(std::vector<int64_t> shape, const float* data, int64_t count);

// Distance to the nearest non-differentiable point seen during a forward
// pass. Finite-difference probes whose margin falls below the step size are
// resampled by the tests.
struct Margin {
  double min = std::numeric_limits<double>::infinity();
  void note(double m) {
    if (m < min) min = m;
  }
};

Arr add(const Arr& a, const Arr& b);
Arr sub(const Arr& a, const Arr& b);
Arr mul(const Arr& a, const Arr& b);
Arr div(const Arr& a, const Arr& b, Margin* m);  // notes |denominator|
Arr abs(const Arr& a, Margin* m);
Arr maximum(const Arr& a, const Arr& b, Margin* m);
Arr minimum(const Arr& a, const Arr& b, Margin* m);
Arr relu(const Arr& a, Margin* m);
Arr add_scalar(const Arr& a, double s);
Arr matmul(const Arr& a, const Arr& b);
Arr dense(const Arr& x, const Arr& w, const Arr& b);  // x[N,I], w[O,I], b[O]
Arr conv2d(const Arr& x, const Arr& w, const Arr& b, int stride, int padding);
Arr maxpool2d(const Arr& x, int kernel, int stride, Margin* m);
Arr batchnorm_train(const Arr& x, const Arr& gamma, const Arr& beta, double eps);
Arr log_softmax(const Arr& x);
double nll(const Arr& log_probs, const std::vector<int>& targets);
double sum(const Arr& a);
double mean(const Arr& a);

// Regularizer family (independent of the library's implementation).
double r1(double w, double mu);
double r2(double w, double mu);
double stq_reg(double w, double mu, double beta, Margin* m);
// lambda/#W * sum_f [sum_i stq_reg + gamma*cot(beta)] with the gamma term per
// filter (gamma_per_layer=false semantics).
double stq_reg_layer(const Arr& w, const std::vector<double>& mu, double beta, double lambda,
                     double gamma, Margin* m);

}  // namespace ref
