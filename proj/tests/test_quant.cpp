// SPDX-License-Identifier: Apache-2.0
#include "stq/quant.hpp"

#include <cmath>
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

TEST_CASE("sign_binarize maps zero to +1") {
  TernaryCodes c = sign_binarize(Tensor::from_data({3}, {0.3f, -0.2f, 0.0f}));
  CHECK(c.values == std::vector<int8_t>{1, -1, 1});
}

TEST_CASE("sign_binarize of all-negative input") {
  TernaryCodes c = sign_binarize(Tensor::from_data({3}, {-0.1f, -5.0f, -0.0001f}));
  CHECK(c.values == std::vector<int8_t>{-1, -1, -1});
}

TEST_CASE("sign_binarize odd symmetry on zero-free input") {
  Rng rng(5);
  std::vector<float> w(257), neg(257);
  for (size_t i = 0; i < w.size(); ++i) {
    float v = 0.0f;
    while (v == 0.0f) v = rng.next_float() * 2.0f - 1.0f;
    w[i] = v;
    neg[i] = -v;
  }
  TernaryCodes cw = sign_binarize(Tensor::from_data({257}, w));
  TernaryCodes cn = sign_binarize(Tensor::from_data({257}, neg));
  for (size_t i = 0; i < w.size(); ++i) CHECK(cw.values[i] == -cn.values[i]);
}

TEST_CASE("threshold_ternarize") {
  TernaryCodes c = threshold_ternarize(Tensor::from_data({3}, {0.5f, 0.1f, -0.5f}), 0.2f);
  CHECK(c.values == std::vector<int8_t>{1, 0, -1});

  SUBCASE("threshold above every magnitude gives all zeros") {
    TernaryCodes z = threshold_ternarize(Tensor::from_data({3}, {0.5f, 0.1f, -0.5f}), 0.6f);
    CHECK(z.values == std::vector<int8_t>{0, 0, 0});
  }
  SUBCASE("vanishing threshold matches sign on zero-free input") {
    Rng rng(6);
    std::vector<float> w(100);
    for (float& v : w) {
      v = 0.0f;
      while (std::fabs(v) < 1e-3f) v = rng.next_float() * 2.0f - 1.0f;
    }
    Tensor t = Tensor::from_data({100}, w);
    TernaryCodes tern = threshold_ternarize(t, 1e-6f);
    TernaryCodes sign = sign_binarize(t);
    CHECK(tern.values == sign.values);
  }
  SUBCASE("odd in w") {
    Rng rng(7);
    std::vector<float> w(64), neg(64);
    for (size_t i = 0; i < w.size(); ++i) {
      w[i] = rng.next_float() * 2 - 1;
      neg[i] = -w[i];
    }
    TernaryCodes a = threshold_ternarize(Tensor::from_data({64}, w), 0.3f);
    TernaryCodes b = threshold_ternarize(Tensor::from_data({64}, neg), 0.3f);
    for (size_t i = 0; i < w.size(); ++i) CHECK(a.values[i] == -b.values[i]);
  }
  SUBCASE("non-positive threshold is rejected") {
    Tensor t = Tensor::from_data({1}, {1.0f});
    CHECK(throws_containing([&] { (void)threshold_ternarize(t, 0.0f); }, "positive"));
    CHECK(throws_containing([&] { (void)threshold_ternarize(t, -0.5f); }, "positive"));
  }
}

TEST_CASE("ste_quantize hand-derived example") {
  // w=0.5, mu=2, ternary threshold 0.2: code +1, forward 2.0; with upstream
  // 1.0 the chain rule on mu*t(w) with STE mask 1 gives grad_w = 2.0 and
  // grad_mu = 1.0.
  Tensor w = Tensor::from_data({1}, {0.5f});
  Tensor mu = Tensor::from_data({1}, {2.0f});
  w.set_requires_grad(true);
  mu.set_requires_grad(true);
  Tensor q = ste_quantize(w, CodeFn::Ternary, 0.2f, mu);
  CHECK(q.data()[0] == 2.0f);
  backward(sum(q));
  CHECK(w.grad().data()[0] == 2.0f);
  CHECK(mu.grad().data()[0] == 1.0f);
}

TEST_CASE("ste_quantize clips gradients outside |w| <= 1") {
  Tensor w = Tensor::from_data({1}, {1.5f});
  Tensor mu = Tensor::from_data({1}, {2.0f});
  w.set_requires_grad(true);
  Tensor q = ste_quantize(w, CodeFn::Ternary, 0.2f, mu);
  backward(mul(sum(q), 7.5f));
  CHECK(w.grad().data()[0] == 0.0f);
}

TEST_CASE("ste_quantize zero code annihilates the scale gradient") {
  Tensor w = Tensor::from_data({1}, {0.1f});
  Tensor mu = Tensor::from_data({1}, {2.0f});
  w.set_requires_grad(true);
  mu.set_requires_grad(true);
  Tensor q = ste_quantize(w, CodeFn::Ternary, 0.2f, mu);
  CHECK(q.data()[0] == 0.0f);
  backward(sum(q));
  CHECK(mu.grad().data()[0] == 0.0f);
  CHECK(w.grad().data()[0] == 2.0f);  // mask is about |w|, not the code
}

TEST_CASE("ste contract: exact masking and exact mu*upstream passthrough") {
  Rng rng(42);
  const int64_t F = 4, B = 25;
  std::vector<float> wv(F * B);
  for (float& v : wv) v = rng.next_float() * 3.0f - 1.5f;
  std::vector<float> muv = {0.5f, 1.0f, 1.5f, 2.0f};
  Tensor w = Tensor::from_data({F, B}, wv);
  Tensor mu = Tensor::from_data({F}, muv);
  w.set_requires_grad(true);
  Tensor q = ste_quantize(w, CodeFn::Ternary, 0.3f, mu);
  const float upstream = 0.37f;
  backward(sum(mul(q, upstream)));
  Tensor g = w.grad();
  for (int64_t f = 0; f < F; ++f)
    for (int64_t i = 0; i < B; ++i) {
      float wij = wv[static_cast<size_t>(f * B + i)];
      float got = g.data()[f * B + i];
      if (std::fabs(wij) > 1.0f)
        CHECK(got == 0.0f);
      else
        CHECK(got == upstream * muv[static_cast<size_t>(f)]);
    }
}

TEST_CASE("ste_quantize rejects non-positive scales") {
  Tensor w = Tensor::from_data({2}, {0.5f, -0.5f});
  CHECK(throws_containing([&] { (void)ste_quantize(w, CodeFn::Sign, 0, Tensor::from_data({2}, {1.0f, 0.0f})); },
                          "non-positive scale"));
  CHECK(throws_containing([&] { (void)ste_quantize(w, CodeFn::Sign, 0, Tensor::from_data({2}, {1.0f, -2.0f})); },
                          "non-positive scale"));
}

TEST_CASE("bwn_scale") {
  CHECK(bwn_scale(Tensor::from_data({4}, {1, -1, 1, -1})) == 1.0f);
  CHECK(bwn_scale(Tensor::from_data({4}, {2, 0, -2, 0})) == 1.0f);
  CHECK(throws_containing([&] { (void)bwn_scale(std::span<const float>()); }, "empty"));

  SUBCASE("half-normal mean of a standard Gaussian sample") {
    Rng rng(1234);
    const int64_t n = 1000000;
    std::vector<float> w(static_cast<size_t>(n));
    for (float& v : w) v = static_cast<float>(rng.normal());
    float m = bwn_scale(w);
    CHECK(m == doctest::Approx(std::sqrt(2.0 / 3.14159265358979)).epsilon(0.013));
  }
}

TEST_CASE("twn_threshold_and_scale") {
  TwnParams p = twn_threshold_and_scale(Tensor::from_data({4}, {1, 1, -1, -1}));
  CHECK(p.delta == doctest::Approx(0.7).epsilon(1e-6));
  CHECK(p.mu == doctest::Approx(1.0).epsilon(1e-6));

  SUBCASE("positive homogeneity") {
    Rng rng(9);
    std::vector<float> w(512);
    for (float& v : w) v = static_cast<float>(rng.normal());
    std::vector<float> w3 = w;
    for (float& v : w3) v *= 3.0f;
    TwnParams a = twn_threshold_and_scale(std::span<const float>(w));
    TwnParams b = twn_threshold_and_scale(std::span<const float>(w3));
    CHECK(b.delta == doctest::Approx(3.0 * a.delta).epsilon(1e-5));
    CHECK(b.mu == doctest::Approx(3.0 * a.mu).epsilon(1e-5));
  }

  SUBCASE("Monte-Carlo against the analytic half-normal values") {
    // For W ~ N(0,1): delta = 0.7*E|W| = 0.7*sqrt(2/pi) ~ 0.5585; survivors
    // have fraction 2*(1 - Phi(delta)) and mean phi(delta)/(1 - Phi(delta)).
    Rng rng(4321);
    const int64_t n = 1000000;
    std::vector<float> w(static_cast<size_t>(n));
    for (float& v : w) v = static_cast<float>(rng.normal());
    TwnParams p2 = twn_threshold_and_scale(std::span<const float>(w));
    double delta_exact = 0.7 * std::sqrt(2.0 / 3.14159265358979);
    CHECK(p2.delta == doctest::Approx(delta_exact).epsilon(0.01));
    double phi = std::exp(-delta_exact * delta_exact / 2.0) / std::sqrt(2.0 * 3.14159265358979);
    double tail = 0.5 * std::erfc(delta_exact / std::sqrt(2.0));
    int64_t survivors = 0;
    for (float v : w)
      if (std::fabs(v) > p2.delta) ++survivors;
    CHECK(static_cast<double>(survivors) / static_cast<double>(n) ==
          doctest::Approx(2.0 * tail).epsilon(0.01));
    CHECK(p2.mu == doctest::Approx(phi / tail).epsilon(0.01));
  }

  SUBCASE("all-zero weights are degenerate") {
    CHECK(throws_containing([&] { (void)twn_threshold_and_scale(Tensor::zeros({8})); }, "degenerate"));
  }
}

TEST_CASE("pack_codes bit-level layout") {
  TernaryCodes bin;
  bin.shape = {8};
  bin.values = {1, -1, -1, 1, 1, 1, 1, 1};
  std::vector<uint8_t> packed = pack_codes(bin, QuantDepth::Binary);
  REQUIRE(packed.size() == 1);
  CHECK(packed[0] == 0xF9);

  TernaryCodes tern;
  tern.shape = {4};
  tern.values = {0, 1, -1, 0};
  std::vector<uint8_t> packed2 = pack_codes(tern, QuantDepth::Ternary);
  REQUIRE(packed2.size() == 1);
  CHECK(packed2[0] == 0x24);
}

TEST_CASE("binary packing rejects zero codes") {
  TernaryCodes c;
  c.shape = {2};
  c.values = {1, 0};
  CHECK(throws_containing([&] { (void)pack_codes(c, QuantDepth::Binary); }, "zero code"));
}

TEST_CASE("reserved ternary bit pattern is a decode error") {
  std::vector<uint8_t> bytes = {0b00001100};  // second field = 11
  CHECK(throws_containing([&] { (void)unpack_codes(bytes, {4}, QuantDepth::Ternary); }, "reserved"));
}

TEST_CASE("unpack rejects wrong payload sizes") {
  std::vector<uint8_t> bytes = {0, 0};
  CHECK(throws_containing([&] { (void)unpack_codes(bytes, {4}, QuantDepth::Binary); }, "expected"));
}

TEST_CASE("pack/unpack round trip over random code tensors") {
  Rng rng(777);
  for (int depth_i = 0; depth_i < 2; ++depth_i) {
    QuantDepth depth = depth_i == 0 ? QuantDepth::Binary : QuantDepth::Ternary;
    for (int trial = 0; trial < 10000; ++trial) {
      int64_t n = 1 + static_cast<int64_t>(rng.below(40));
      TernaryCodes c;
      c.shape = {n};
      c.values.resize(static_cast<size_t>(n));
      for (int8_t& v : c.values)
        v = depth == QuantDepth::Binary ? (rng.below(2) ? 1 : -1)
                                        : static_cast<int8_t>(static_cast<int>(rng.below(3)) - 1);
      std::vector<uint8_t> bytes = pack_codes(c, depth);
      CHECK(static_cast<int64_t>(bytes.size()) == packed_size(n, depth));
      TernaryCodes back = unpack_codes(bytes, c.shape, depth);
      CHECK(back.values == c.values);
    }
  }
}

TEST_CASE("packed size matches the bit accounting") {
  CHECK(packed_size(8, QuantDepth::Binary) == 1);
  CHECK(packed_size(9, QuantDepth::Binary) == 2);
  CHECK(packed_size(4, QuantDepth::Ternary) == 1);
  CHECK(packed_size(5, QuantDepth::Ternary) == 2);
  // bits used = count * n_l, padding < 8 bits
  for (int64_t n : {1, 7, 64, 1000}) {
    CHECK(packed_size(n, QuantDepth::Binary) * 8 - n * 1 < 8);
    CHECK(packed_size(n, QuantDepth::Ternary) * 8 - n * 2 < 8);
  }
}

TEST_CASE("materialize_codes equals the ste_quantize forward bitwise") {
  Rng rng(31);
  std::vector<float> wv(3 * 10);
  for (float& v : wv) v = rng.next_float() * 2 - 1;
  std::vector<float> muv = {0.3f, 0.7f, 1.3f};
  Tensor w = Tensor::from_data({3, 10}, wv);
  Tensor mu = Tensor::from_data({3}, muv);
  Tensor q = ste_quantize(w, CodeFn::Ternary, 0.25f, mu);
  Tensor m = materialize_codes(threshold_ternarize(w, 0.25f), muv);
  for (int64_t i = 0; i < q.numel(); ++i) CHECK(q.data()[i] == m.data()[i]);
}
