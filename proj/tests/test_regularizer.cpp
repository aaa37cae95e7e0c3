// SPDX-License-Identifier: Apache-2.0
#include "stq/regularizer.hpp"

#include <cmath>
#include <functional>
#include <string>

#include "doctest.h"

using namespace stq;

namespace {

bool throws_containing(const std::function<void()>& fn, const std::string& needle) {
  try {
    fn();
  } catch (const std::exception& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

}  // namespace

TEST_CASE("reg_r1 point values") {
  CHECK(reg_r1(1.0, 1.0) == 0.0);
  CHECK(reg_r1(-1.0, 1.0) == 0.0);
  CHECK(reg_r1(0.0, 1.0) == 1.0);
  CHECK(reg_r1(0.5, 1.0) == 0.5);
}

TEST_CASE("reg_r2 point values and zeros") {
  CHECK(reg_r2(0.0, 1.0) == 0.0);
  CHECK(reg_r2(1.0, 1.0) == 0.0);
  CHECK(reg_r2(-1.0, 1.0) == 0.0);
  CHECK(reg_r2(0.5, 1.0) == 0.5);
  CHECK(reg_r2(2.0, 1.0) == 1.0);
}

TEST_CASE("reg_stq point values") {
  CHECK(reg_stq(0.5, 1.0, kPi / 4) == 0.5);
  CHECK(reg_stq(0.0, 1.0, kPi / 3) == 0.0);
  CHECK(reg_stq(0.0, 0.25, 1.5) == 0.0);
  double beta = std::atan(2.0);
  CHECK(reg_stq(0.1, 1.0, beta) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("reg_stq domain and argument checks") {
  CHECK(throws_containing([] { (void)reg_stq(0.1, 1.0, 0.5); }, "beta"));
  CHECK(throws_containing([] { (void)reg_stq(0.1, 1.0, kPi / 2); }, "beta"));
  CHECK(throws_containing([] { (void)reg_stq(0.1, 0.0, 1.0); }, "mu"));
  CHECK(throws_containing([] { (void)reg_stq_grad(0.1, 1.0, 0.2, 0.0); }, "beta"));
}

TEST_CASE("ternary limit: reg_stq at pi/4 equals reg_r2 on a dense grid") {
  for (double mu : {0.5, 1.0, 2.0}) {
    double max_dev = 0.0;
    for (int i = 0; i <= 10000; ++i) {
      double w = -3.0 + 6.0 * static_cast<double>(i) / 10000.0;
      max_dev = std::max(max_dev, std::fabs(reg_stq(w, mu, kPi / 4) - reg_r2(w, mu)));
    }
    CHECK(max_dev < 1e-12);
  }
}

TEST_CASE("binary limit: reg_stq equals reg_r1 where the scale arm is active") {
  double beta = kPi / 2 - 1e-3;
  for (double mu : {0.5, 1.0, 2.0}) {
    for (int i = 0; i <= 4000; ++i) {
      double w = -3.0 + 6.0 * static_cast<double>(i) / 4000.0;
      if (std::fabs(w) < 0.01) continue;
      double a = std::fabs(std::fabs(w) - mu);
      double b = std::tan(beta) * std::fabs(w);
      if (b > a) CHECK(reg_stq(w, mu, beta) == reg_r1(w, mu));
    }
  }
}

TEST_CASE("reg_stq is even, nonnegative, zero exactly on {-mu, 0, +mu}") {
  Rng rng(21);
  for (int i = 0; i < 2000; ++i) {
    double w = 6.0 * rng.next_double() - 3.0;
    double mu = 0.1 + 2.0 * rng.next_double();
    double beta = kPi / 4 + (kPi / 4 - 2e-3) * rng.next_double();
    double v = reg_stq(w, mu, beta);
    CHECK(v >= 0.0);
    CHECK(reg_stq(-w, mu, beta) == v);
    bool at_zero_set = w == 0.0 || std::fabs(std::fabs(w) - mu) == 0.0;
    if (!at_zero_set) CHECK(v > 0.0);
  }
  CHECK(reg_stq(0.0, 0.7, 1.0) == 0.0);
  CHECK(reg_stq(0.7, 0.7, 1.0) == 0.0);
  CHECK(reg_stq(-0.7, 0.7, 1.0) == 0.0);
}

TEST_CASE("reg_stq_grad hand-derived points") {
  SUBCASE("slope arm active") {
    double beta = std::atan(2.0);
    RegGrad g = reg_stq_grad(0.1, 1.0, beta, 0.0);
    CHECK(g.dw == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(g.dmu == 0.0);
    CHECK(g.dbeta == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("scale arm active near pi/2") {
    RegGrad g = reg_stq_grad(0.9, 1.0, kPi / 2 - 1e-4, 0.0);
    CHECK(g.dw == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(g.dmu == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(g.dbeta == 0.0);
  }
  SUBCASE("gamma adds -gamma*csc^2(beta) to the beta component") {
    RegGrad with = reg_stq_grad(0.9, 1.0, kPi / 3, 0.3);
    RegGrad without = reg_stq_grad(0.9, 1.0, kPi / 3, 0.0);
    CHECK(with.dbeta - without.dbeta == doctest::Approx(-0.4).epsilon(1e-12));
    CHECK(with.dw == without.dw);
    CHECK(with.dmu == without.dmu);
  }
}

TEST_CASE("reg_stq_grad matches central finite differences away from kinks") {
  Rng rng(99);
  const double h = 1e-3;
  int checked = 0;
  while (checked < 1000) {
    double w = 6.0 * rng.next_double() - 3.0;
    double mu = 0.2 + 2.0 * rng.next_double();
    double beta = kPi / 4 + 1e-3 + (kPi / 4 - 3e-3) * rng.next_double();
    double gamma = rng.next_double() * 0.5;

    // Keep every probe at least 1e-2 away from the kinks of the composite.
    auto margin = [&](double wv, double muv, double bv) {
      double aw = std::fabs(wv);
      double a = std::fabs(aw - muv);
      double b = std::tan(bv) * aw;
      return std::min({aw, std::fabs(aw - muv), std::fabs(a - b)});
    };
    bool ok = true;
    for (double dw : {-h, 0.0, h})
      for (double dm : {-h, 0.0, h})
        for (double db : {-h, 0.0, h})
          ok = ok && margin(w + dw, mu + dm, beta + db) >= 1e-2;
    if (!ok || beta + h >= kPi / 2 || beta - h <= kPi / 4) continue;

    auto f = [&](double wv, double muv, double bv) {
      return reg_stq(wv, muv, bv) + gamma / std::tan(bv);
    };
    RegGrad g = reg_stq_grad(w, mu, beta, gamma);
    double fw = (f(w + h, mu, beta) - f(w - h, mu, beta)) / (2 * h);
    double fm = (f(w, mu + h, beta) - f(w, mu - h, beta)) / (2 * h);
    double fb = (f(w, mu, beta + h) - f(w, mu, beta - h)) / (2 * h);
    CHECK(g.dw == doctest::Approx(fw).epsilon(1e-6).scale(std::max(1.0, std::fabs(fw))));
    CHECK(g.dmu == doctest::Approx(fm).epsilon(1e-6).scale(std::max(1.0, std::fabs(fm))));
    CHECK(g.dbeta == doctest::Approx(fb).epsilon(1e-6).scale(std::max(1.0, std::fabs(fb))));
    ++checked;
  }
}

TEST_CASE("depth pressure signs") {
  Rng rng(15);
  for (int i = 0; i < 500; ++i) {
    double beta = kPi / 4 + 1e-3 + (kPi / 4 - 2e-3) * rng.next_double();
    double gamma = 1e-4 + rng.next_double();
    // The gamma term always pushes beta upward (toward binary).
    RegGrad g0 = reg_stq_grad(0.0, 1.0, beta, gamma);
    CHECK(g0.dbeta < 0.0);
    // The slope arm pushes beta downward for small nonzero weights.
    double w = 1e-3 + 0.01 * rng.next_double();
    RegGrad g1 = reg_stq_grad(w, 1.0, beta, 0.0);
    CHECK(g1.dbeta > 0.0);
  }
}

TEST_CASE("tie policy selects the arm at exact equality") {
  // w = mu/2 makes both arms equal at beta = pi/4.
  RegGrad a = reg_stq_grad(0.5, 1.0, kPi / 4, 0.0, TiePolicy::ScaleArm);
  CHECK(a.dmu != 0.0);  // scale arm active
  CHECK(a.dbeta == 0.0);
  RegGrad b = reg_stq_grad(0.5, 1.0, kPi / 4, 0.0, TiePolicy::SlopeArm);
  CHECK(b.dmu == 0.0);  // slope arm active
  CHECK(b.dbeta > 0.0);
}

TEST_CASE("reg_layer value composition") {
  RegularizerConfig cfg;
  cfg.gamma = 0.0;

  SUBCASE("weights at the minima contribute zero") {
    std::vector<float> w = {1.0f, -1.0f, 0.0f, 1.0f};
    std::vector<float> mu = {1.0f};
    cfg.lambda = 3.7;
    CHECK(reg_layer_value(w, mu, 1, kPi / 2 - 1e-3, cfg) == 0.0);
  }
  SUBCASE("single weight, lambda = #W") {
    std::vector<float> w = {0.5f};
    std::vector<float> mu = {1.0f};
    cfg.lambda = 1.0;
    CHECK(reg_layer_value(w, mu, 1, kPi / 4, cfg) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("gamma counted once per filter") {
    std::vector<float> w = {0.0f, 0.0f};  // two filters, one weight each
    std::vector<float> mu = {1.0f, 1.0f};
    cfg.lambda = 1.0;
    cfg.gamma = 0.1;
    double lambda_l = cfg.lambda / 2.0;
    CHECK(reg_layer_value(w, mu, 2, kPi / 4, cfg) == doctest::Approx(lambda_l * 0.2).epsilon(1e-12));
    SUBCASE("per-layer option counts it once") {
      cfg.gamma_per_layer = true;
      CHECK(reg_layer_value(w, mu, 2, kPi / 4, cfg) == doctest::Approx(lambda_l * 0.1).epsilon(1e-12));
    }
  }
}

TEST_CASE("reg_layer_op gradients match finite differences") {
  Rng rng(1001);
  RegularizerConfig cfg;
  cfg.lambda = 0.8;
  cfg.gamma = 0.05;
  const int64_t F = 3, B = 4;
  const double h = 1e-4;

  std::vector<float> wv(F * B), muv(F);
  double beta0 = 1.1;
  auto resample = [&] {
    for (float& v : wv) v = rng.next_float() * 3 - 1.5f;
    for (float& v : muv) v = 0.3f + rng.next_float();
    beta0 = kPi / 4 + 0.02 + (kPi / 4 - 0.04) * rng.next_double();
  };
  auto value = [&](const std::vector<float>& w, const std::vector<float>& mu, double beta) {
    return reg_layer_value(w, mu, F, beta, cfg);
  };
  auto min_margin = [&] {
    double m = 1e9;
    for (int64_t f = 0; f < F; ++f)
      for (int64_t i = 0; i < B; ++i) {
        double aw = std::fabs(static_cast<double>(wv[f * B + i]));
        double mu = muv[static_cast<size_t>(f)];
        double a = std::fabs(aw - mu);
        double b = std::tan(beta0) * aw;
        m = std::min({m, aw, std::fabs(aw - mu), std::fabs(a - b)});
      }
    return m;
  };

  int done = 0;
  while (done < 20) {
    resample();
    if (min_margin() < 5e-2) continue;

    Tensor w = Tensor::from_data({F, B}, wv);
    Tensor mu = Tensor::from_data({F}, muv);
    Tensor beta = Tensor::scalar(static_cast<float>(beta0));
    w.set_requires_grad(true);
    mu.set_requires_grad(true);
    beta.set_requires_grad(true);
    Tensor r = reg_layer_op(w, mu, beta, cfg);
    CHECK(static_cast<double>(r.item()) == doctest::Approx(value(wv, muv, beta0)).epsilon(1e-6));
    backward(r);

    for (int64_t i = 0; i < F * B; ++i) {
      std::vector<float> up = wv, dn = wv;
      up[static_cast<size_t>(i)] += static_cast<float>(h);
      dn[static_cast<size_t>(i)] -= static_cast<float>(h);
      double fd = (value(up, muv, beta0) - value(dn, muv, beta0)) / (2 * h);
      CHECK(static_cast<double>(w.grad().data()[i]) ==
            doctest::Approx(fd).epsilon(1e-4).scale(std::max(0.05, std::fabs(fd))));
    }
    for (int64_t f = 0; f < F; ++f) {
      std::vector<float> up = muv, dn = muv;
      up[static_cast<size_t>(f)] += static_cast<float>(h);
      dn[static_cast<size_t>(f)] -= static_cast<float>(h);
      double fd = (value(wv, up, beta0) - value(wv, dn, beta0)) / (2 * h);
      CHECK(static_cast<double>(mu.grad().data()[f]) ==
            doctest::Approx(fd).epsilon(1e-4).scale(std::max(0.05, std::fabs(fd))));
    }
    double fd_beta = (value(wv, muv, beta0 + h) - value(wv, muv, beta0 - h)) / (2 * h);
    CHECK(static_cast<double>(beta.grad().data()[0]) ==
          doctest::Approx(fd_beta).epsilon(1e-4).scale(std::max(0.05, std::fabs(fd_beta))));
    ++done;
  }
}

TEST_CASE("config validation") {
  RegularizerConfig cfg;
  cfg.validate();
  RegularizerConfig bad = cfg;
  bad.beta_min = kPi / 4;  // must be strictly inside
  CHECK(throws_containing([&] { bad.validate(); }, "beta_min"));
  bad = cfg;
  bad.depth_delta = 0.5;
  CHECK(throws_containing([&] { bad.validate(); }, "depth threshold"));
  bad = cfg;
  bad.lambda = -1;
  CHECK(throws_containing([&] { bad.validate(); }, "lambda"));
}
