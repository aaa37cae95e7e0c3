// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "stq/tensor.hpp"

namespace stq {

inline constexpr double kPi = 3.14159265358979323846;

// Which arm of the min wins when both are equal.
enum class TiePolicy {
  ScaleArm,  // ||w| - mu|
  SlopeArm,  // tan(beta)|w|
};

struct RegularizerConfig {
  double lambda = 0.1;            // global regularization constant
  double gamma = 1e-2;            // binary-preference strength
  double depth_delta = 1.55;      // final depth decision threshold on beta
  double beta_min = kPi / 4 + 1e-3;
  double beta_max = kPi / 2 - 1e-3;
  TiePolicy tie = TiePolicy::ScaleArm;
  bool gamma_per_layer = false;   // count gamma|cot beta| once per layer

  void validate() const;  // throws on inconsistent settings
};

// Binary regularizer, zero at {-mu, +mu}.
double reg_r1(double w, double mu);

// Ternary regularizer, zero at {-mu, 0, +mu}.
double reg_r2(double w, double mu);

// Adaptive regularizer min(||w|-mu|, tan(beta)|w|).
// beta must lie in [pi/4, pi/2), where the slope arm is well defined; the
// trainer keeps beta inside the tighter configured clamp range.
double reg_stq(double w, double mu, double beta);

struct RegGrad {
  double dw;
  double dmu;
  double dbeta;
};

// Closed-form subgradients of reg_stq + gamma*cot(beta). Kinks use the fixed
// conventions sign(0) = +1 and ties resolved by `tie`.
RegGrad reg_stq_grad(double w, double mu, double beta, double gamma,
                     TiePolicy tie = TiePolicy::ScaleArm);

// Layer regularization value
//   lambda_l * sum_f [ sum_{i in filter f} reg_stq(w_i, mu_f, beta)
//                      + gamma*cot(beta) ]
// with lambda_l = lambda / #W. `mu` holds one scale per filter or a single
// shared scale; the gamma term is still counted per filter unless
// gamma_per_layer is set.
double reg_layer_value(std::span<const float> w, std::span<const float> mu, int64_t filters,
                       double beta, const RegularizerConfig& cfg);

// Differentiable graph node for the layer regularizer; gradients to w, mu and
// beta are the closed forms above (accumulated per filter / per layer).
Tensor reg_layer_op(const Tensor& w, const Tensor& mu, const Tensor& beta,
                    const RegularizerConfig& cfg);

}  // namespace stq
