// SPDX-License-Identifier: Apache-2.0
#include "stq/regularizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace stq {

namespace {

double sign_of(double x) { return x >= 0.0 ? 1.0 : -1.0; }

void check_beta_domain(const char* op, double beta) {
  if (!(beta >= kPi / 4 && beta < kPi / 2))
    throw std::invalid_argument(std::string(op) + ": beta " + std::to_string(beta) +
                                " outside [pi/4, pi/2)");
}

void check_mu(const char* op, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument(std::string(op) + ": mu must be positive, got " + std::to_string(mu));
}

// True when the slope arm tan(beta)|w| is the active branch.
bool slope_arm_active(double arm_scale, double arm_slope, TiePolicy tie) {
  if (arm_slope < arm_scale) return true;
  if (arm_scale < arm_slope) return false;
  return tie == TiePolicy::SlopeArm;
}

}  // namespace

void RegularizerConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("RegularizerConfig: lambda must be >= 0");
  if (!(gamma >= 0.0)) throw std::invalid_argument("RegularizerConfig: gamma must be >= 0");
  if (!(kPi / 4 < beta_min && beta_min < beta_max && beta_max < kPi / 2))
    throw std::invalid_argument("RegularizerConfig: requires pi/4 < beta_min < beta_max < pi/2");
  if (!(depth_delta > beta_min && depth_delta <= beta_max))
    throw std::invalid_argument("RegularizerConfig: depth threshold must lie in (beta_min, beta_max]");
}

double reg_r1(double w, double mu) {
  check_mu("reg_r1", mu);
  return std::fabs(std::fabs(w) - mu);
}

double reg_r2(double w, double mu) {
  check_mu("reg_r2", mu);
  return std::fabs(std::fabs(std::fabs(w) - mu / 2) - mu / 2);
}

double reg_stq(double w, double mu, double beta) {
  check_mu("reg_stq", mu);
  check_beta_domain("reg_stq", beta);
  double a = std::fabs(std::fabs(w) - mu);
  double b = std::tan(beta) * std::fabs(w);
  return a < b ? a : b;
}

RegGrad reg_stq_grad(double w, double mu, double beta, double gamma, TiePolicy tie) {
  check_mu("reg_stq_grad", mu);
  check_beta_domain("reg_stq_grad", beta);
  if (!(gamma >= 0.0)) throw std::invalid_argument("reg_stq_grad: gamma must be >= 0");
  double aw = std::fabs(w);
  double t = std::tan(beta);
  double arm_scale = std::fabs(aw - mu);
  double arm_slope = t * aw;
  RegGrad g{0.0, 0.0, 0.0};
  if (slope_arm_active(arm_scale, arm_slope, tie)) {
    g.dw = t * sign_of(w);
    g.dbeta = (1.0 + t * t) * aw;  // sec^2(beta)|w|
  } else {
    g.dw = sign_of(w) * sign_of(aw - mu);
    g.dmu = -sign_of(aw - mu);
  }
  if (gamma > 0.0) {
    double s = std::sin(beta);
    g.dbeta -= gamma / (s * s);  // d(gamma*cot)/dbeta, cot > 0 on the domain
  }
  return g;
}

namespace {

void check_layer_args(const char* op, int64_t weights, int64_t scales, int64_t filters) {
  if (weights == 0) throw std::invalid_argument(std::string(op) + ": empty weight tensor");
  if (filters <= 0 || weights % filters != 0)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(weights) + " weights do not split into " +
                                std::to_string(filters) + " filters");
  if (scales != filters && scales != 1)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(scales) + " scales for " +
                                std::to_string(filters) + " filters");
}

}  // namespace

double reg_layer_value(std::span<const float> w, std::span<const float> mu, int64_t filters,
                       double beta, const RegularizerConfig& cfg) {
  check_layer_args("reg_layer", static_cast<int64_t>(w.size()), static_cast<int64_t>(mu.size()), filters);
  check_beta_domain("reg_layer", beta);
  bool shared = mu.size() == 1;
  int64_t block = static_cast<int64_t>(w.size()) / filters;
  double total = 0.0;
  for (int64_t f = 0; f < filters; ++f) {
    double m = mu[shared ? 0 : f];
    check_mu("reg_layer", m);
    const float* wf = w.data() + f * block;
    for (int64_t i = 0; i < block; ++i) total += reg_stq(wf[i], m, beta);
  }
  double gamma_count = cfg.gamma_per_layer ? 1.0 : static_cast<double>(filters);
  total += cfg.gamma * gamma_count / std::tan(beta);
  double lambda_l = cfg.lambda / static_cast<double>(w.size());
  return lambda_l * total;
}

Tensor reg_layer_op(const Tensor& w, const Tensor& mu, const Tensor& beta,
                    const RegularizerConfig& cfg) {
  if (!w.defined() || !mu.defined() || !beta.defined())
    throw std::invalid_argument("reg_layer: undefined argument");
  if (beta.numel() != 1) throw std::invalid_argument("reg_layer: beta must be scalar");
  int64_t filters = w.shape().empty() ? 1 : w.dim(0);
  check_layer_args("reg_layer", w.numel(), mu.numel(), filters);

  double beta_v = beta.item();
  double value = reg_layer_value(w.data(), mu.data(), filters, beta_v, cfg);

  auto out = std::make_shared<detail::Node>();
  out->shape = {1};
  out->value = {static_cast<float>(value)};
  if (grad_enabled() && (w.requires_grad() || mu.requires_grad() || beta.requires_grad())) {
    auto nw = w.node();
    auto nmu = mu.node();
    auto nbeta = beta.node();
    int64_t block = w.numel() / filters;
    bool shared = mu.numel() == 1;
    out->op = "reg_layer";
    out->requires_grad = true;
    out->inputs = {nw, nmu, nbeta};
    out->backward_fn = [nw, nmu, nbeta, cfg, filters, block, shared](detail::Node& self) {
      double g = static_cast<double>(self.grad[0]);
      double beta_v = static_cast<double>(nbeta->value[0]);
      double lambda_l = cfg.lambda / static_cast<double>(nw->value.size());
      double scale = g * lambda_l;
      float* gw = nw->requires_grad ? nw->grad_data() : nullptr;
      float* gmu = nmu->requires_grad ? nmu->grad_data() : nullptr;
      float* gbeta = nbeta->requires_grad ? nbeta->grad_data() : nullptr;
      double beta_acc = 0.0;
      for (int64_t f = 0; f < filters; ++f) {
        double m = static_cast<double>(nmu->value[shared ? 0 : f]);
        const float* wf = nw->value.data() + f * block;
        double mu_acc = 0.0;
        for (int64_t i = 0; i < block; ++i) {
          RegGrad rg = reg_stq_grad(wf[i], m, beta_v, 0.0, cfg.tie);
          if (gw) gw[f * block + i] += static_cast<float>(scale * rg.dw);
          mu_acc += rg.dmu;
          beta_acc += rg.dbeta;
        }
        if (gmu) gmu[shared ? 0 : f] += static_cast<float>(scale * mu_acc);
      }
      if (gbeta) {
        double gamma_count = cfg.gamma_per_layer ? 1.0 : static_cast<double>(filters);
        double s = std::sin(beta_v);
        beta_acc -= cfg.gamma * gamma_count / (s * s);
        gbeta[0] += static_cast<float>(scale * beta_acc);
      }
    };
  }
  return Tensor::wrap(std::move(out));
}

}  // namespace stq
