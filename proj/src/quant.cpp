// SPDX-License-Identifier: Apache-2.0
#include "stq/quant.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace stq {

TernaryCodes sign_binarize(std::span<const float> w, Shape shape) {
  TernaryCodes c;
  c.shape = std::move(shape);
  c.values.resize(w.size());
  for (size_t i = 0; i < w.size(); ++i) c.values[i] = w[i] >= 0.0f ? 1 : -1;
  return c;
}

TernaryCodes sign_binarize(const Tensor& w) { return sign_binarize(w.data(), w.shape()); }

TernaryCodes threshold_ternarize(std::span<const float> w, Shape shape, float delta) {
  if (!(delta > 0.0f))
    throw std::invalid_argument("threshold_ternarize: delta must be positive, got " + std::to_string(delta));
  TernaryCodes c;
  c.shape = std::move(shape);
  c.values.resize(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    float v = w[i];
    c.values[i] = v > delta ? 1 : (v < -delta ? -1 : 0);
  }
  return c;
}

TernaryCodes threshold_ternarize(const Tensor& w, float delta) {
  return threshold_ternarize(w.data(), w.shape(), delta);
}

namespace {

void check_scales(const char* op, const Tensor& mu, int64_t filters) {
  if (!mu.defined()) throw std::invalid_argument(std::string(op) + ": undefined scale tensor");
  if (mu.numel() != filters && mu.numel() != 1)
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(mu.numel()) + " scales for " +
                                std::to_string(filters) + " filters");
  for (float v : mu.data())
    if (!(v > 0.0f))
      throw std::invalid_argument(std::string(op) + ": non-positive scale " + std::to_string(v));
}

}  // namespace

Tensor ste_quantize(const Tensor& w, CodeFn fn, float delta, const Tensor& mu) {
  if (!w.defined()) throw std::invalid_argument("ste_quantize: undefined weight tensor");
  if (w.shape().empty()) throw std::invalid_argument("ste_quantize: weight tensor must have rank >= 1");
  int64_t filters = w.dim(0);
  check_scales("ste_quantize", mu, filters);
  TernaryCodes codes = fn == CodeFn::Sign ? sign_binarize(w) : threshold_ternarize(w, delta);

  int64_t block = w.numel() / filters;
  bool shared = mu.numel() == 1;
  auto fwd = [&](std::span<const float> pm, std::span<float> out) {
    for (int64_t f = 0; f < filters; ++f) {
      float m = pm[shared ? 0 : f];
      const int8_t* cf = codes.values.data() + f * block;
      float* of = out.data() + f * block;
      for (int64_t i = 0; i < block; ++i) of[i] = m * static_cast<float>(cf[i]);
    }
  };

  // Built as a two-input graph node so gradients reach both w and mu.
  auto out_node = std::make_shared<detail::Node>();
  out_node->shape = w.shape();
  out_node->value.resize(w.numel());
  fwd(mu.data(), out_node->value);
  if (grad_enabled() && (w.requires_grad() || mu.requires_grad())) {
    auto nw = w.node();
    auto nmu = mu.node();
    out_node->op = "ste_quantize";
    out_node->requires_grad = true;
    out_node->inputs = {nw, nmu};
    out_node->backward_fn = [nw, nmu, codes = std::move(codes), filters, block, shared](detail::Node& self) {
      const float* g = self.grad.data();
      const float* pw = nw->value.data();
      const float* pm = nmu->value.data();
      if (nw->requires_grad) {
        float* gw = nw->grad_data();
        for (int64_t f = 0; f < filters; ++f) {
          float m = pm[shared ? 0 : f];
          const float* gf = g + f * block;
          const float* wf = pw + f * block;
          float* gwf = gw + f * block;
          for (int64_t i = 0; i < block; ++i)
            if (std::fabs(wf[i]) <= 1.0f) gwf[i] += gf[i] * m;
        }
      }
      if (nmu->requires_grad) {
        float* gm = nmu->grad_data();
        for (int64_t f = 0; f < filters; ++f) {
          const float* gf = g + f * block;
          const int8_t* cf = codes.values.data() + f * block;
          float s = 0.0f;
          for (int64_t i = 0; i < block; ++i) s += gf[i] * static_cast<float>(cf[i]);
          gm[shared ? 0 : f] += s;
        }
      }
    };
  }
  return Tensor::wrap(std::move(out_node));
}

Tensor materialize_codes(const TernaryCodes& codes, std::span<const float> mu) {
  int64_t total = codes.numel();
  if (total == 0) throw std::invalid_argument("materialize_codes: empty codes");
  int64_t filters = codes.shape.empty() ? 1 : codes.shape[0];
  if (static_cast<int64_t>(mu.size()) != filters && mu.size() != 1)
    throw std::invalid_argument("materialize_codes: " + std::to_string(mu.size()) + " scales for " +
                                std::to_string(filters) + " filters");
  bool shared = mu.size() == 1;
  int64_t block = total / filters;
  std::vector<float> out(static_cast<size_t>(total));
  for (int64_t f = 0; f < filters; ++f) {
    float m = mu[shared ? 0 : f];
    const int8_t* cf = codes.values.data() + f * block;
    float* of = out.data() + f * block;
    for (int64_t i = 0; i < block; ++i) of[i] = m * static_cast<float>(cf[i]);
  }
  return Tensor::from_data(codes.shape, std::move(out));
}

float bwn_scale(std::span<const float> w) {
  if (w.empty()) throw std::invalid_argument("bwn_scale: empty tensor");
  double s = 0.0;
  for (float v : w) s += std::fabs(static_cast<double>(v));
  return static_cast<float>(s / static_cast<double>(w.size()));
}

float bwn_scale(const Tensor& w) { return bwn_scale(std::span<const float>(w.data())); }

TwnParams twn_threshold_and_scale(std::span<const float> w) {
  if (w.empty()) throw std::invalid_argument("twn_threshold_and_scale: empty tensor");
  double mean_abs = 0.0;
  for (float v : w) mean_abs += std::fabs(static_cast<double>(v));
  mean_abs /= static_cast<double>(w.size());
  double delta = 0.7 * mean_abs;
  double sum = 0.0;
  int64_t count = 0;
  for (float v : w) {
    double a = std::fabs(static_cast<double>(v));
    if (a > delta) {
      sum += a;
      ++count;
    }
  }
  if (count == 0)
    throw std::runtime_error("twn_threshold_and_scale: degenerate layer, no weight above threshold " +
                             std::to_string(delta));
  return {static_cast<float>(delta), static_cast<float>(sum / static_cast<double>(count))};
}

TwnParams twn_threshold_and_scale(const Tensor& w) {
  return twn_threshold_and_scale(std::span<const float>(w.data()));
}

int64_t packed_size(int64_t count, QuantDepth depth) {
  int64_t bits = count * (depth == QuantDepth::Binary ? 1 : 2);
  return (bits + 7) / 8;
}

std::vector<uint8_t> pack_codes(const TernaryCodes& codes, QuantDepth depth) {
  int64_t n = codes.numel();
  std::vector<uint8_t> out(static_cast<size_t>(packed_size(n, depth)), 0);
  if (depth == QuantDepth::Binary) {
    for (int64_t i = 0; i < n; ++i) {
      int8_t c = codes.values[i];
      if (c == 0)
        throw std::invalid_argument("pack_codes: zero code at index " + std::to_string(i) +
                                    " not representable in binary depth");
      if (c > 0) out[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      int8_t c = codes.values[i];
      uint8_t field = c == 0 ? 0u : (c > 0 ? 1u : 2u);
      out[i >> 2] |= static_cast<uint8_t>(field << ((i & 3) * 2));
    }
  }
  return out;
}

TernaryCodes unpack_codes(std::span<const uint8_t> bytes, const Shape& shape, QuantDepth depth) {
  int64_t n = shape_numel(shape);
  int64_t want = packed_size(n, depth);
  if (static_cast<int64_t>(bytes.size()) != want)
    throw std::invalid_argument("unpack_codes: payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                                std::to_string(want) + " for " + std::to_string(n) + " codes");
  TernaryCodes c;
  c.shape = shape;
  c.values.resize(static_cast<size_t>(n));
  if (depth == QuantDepth::Binary) {
    for (int64_t i = 0; i < n; ++i)
      c.values[i] = (bytes[i >> 3] >> (i & 7)) & 1u ? 1 : -1;
  } else {
    for (int64_t i = 0; i < n; ++i) {
      uint8_t field = (bytes[i >> 2] >> ((i & 3) * 2)) & 3u;
      if (field == 3u)
        throw std::invalid_argument("unpack_codes: reserved bit pattern 11 at code index " + std::to_string(i) +
                                    " (byte offset " + std::to_string(i >> 2) + ")");
      c.values[i] = field == 0u ? 0 : (field == 1u ? 1 : -1);
    }
  }
  return c;
}

}  // namespace stq
