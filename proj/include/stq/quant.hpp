// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stq/tensor.hpp"

namespace stq {

// Storage depth of a quantized layer, in bits per weight.
enum class QuantDepth : uint8_t { Binary = 1, Ternary = 2 };

// Quantized weight codes; every element is -1, 0 or +1.
struct TernaryCodes {
  Shape shape;
  std::vector<int8_t> values;
  int64_t numel() const { return static_cast<int64_t>(values.size()); }
};

// sign(w): +1 for w >= 0, -1 for w < 0.
TernaryCodes sign_binarize(std::span<const float> w, Shape shape);
TernaryCodes sign_binarize(const Tensor& w);

// Symmetric threshold: +1 above delta, 0 within [-delta, delta], -1 below.
TernaryCodes threshold_ternarize(std::span<const float> w, Shape shape, float delta);
TernaryCodes threshold_ternarize(const Tensor& w, float delta);

enum class CodeFn { Sign, Ternary };

// Differentiable quantized view of latent weights.
//
// Forward: mu[f] * code(w) with the filter index f = leading dimension of w
// (mu holds one scale per filter, or a single shared scale).
// Backward: the clipped straight-through estimator routes the upstream
// gradient to w masked by 1{|w| <= 1} and scaled by mu; the gradient to
// mu[f] is the sum over the filter of upstream * code.
Tensor ste_quantize(const Tensor& w, CodeFn fn, float delta, const Tensor& mu);

// mu[f] * code as a plain tensor; bitwise identical to the ste_quantize
// forward value.
Tensor materialize_codes(const TernaryCodes& codes, std::span<const float> mu);

// Binary weight network scale: mean of |W|.
float bwn_scale(std::span<const float> w);
float bwn_scale(const Tensor& w);

// Ternary weight network constants: delta = 0.7 * mean|W|, mu = mean of |w|
// over the surviving weights {|w| > delta}.
struct TwnParams {
  float delta;
  float mu;
};
TwnParams twn_threshold_and_scale(std::span<const float> w);
TwnParams twn_threshold_and_scale(const Tensor& w);

// Bit packing. Row-major code order, little-endian bit order within each
// byte, final byte zero-padded.
//   Binary:  1 bit/weight, 1 -> +1, 0 -> -1. Zero codes are an error.
//   Ternary: 2 bits/weight, 00 -> 0, 01 -> +1, 10 -> -1, 11 reserved.
std::vector<uint8_t> pack_codes(const TernaryCodes& codes, QuantDepth depth);
TernaryCodes unpack_codes(std::span<const uint8_t> bytes, const Shape& shape, QuantDepth depth);

// Packed payload size in bytes for `count` weights at `depth`.
int64_t packed_size(int64_t count, QuantDepth depth);

}  // namespace stq
