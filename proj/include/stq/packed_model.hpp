// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stq/layers.hpp"

namespace stq {

// Mixed-precision weight container. All integers little-endian.
//
//   header:     magic "STQW", version u16, layer count u16
//   per layer:  kind u8, depth u8 (1|2|32), rank u8, extents u32 each,
//               delta f32, filter count u32, mu f32 array,
//               payload length u64, payload bytes (packed codes, or raw
//               f32 weights for depth 32), then five f32 blocks each
//               prefixed by a u64 element count: bias, bn_gamma, bn_beta,
//               bn_running_mean, bn_running_var.
//
// The kind byte describes the layer and what follows it in the network:
//   bits 0-1: 1 = conv (stride 1), 2 = dense
//   0x10: same padding ((k-1)/2), otherwise valid
//   0x20: 2x2/2 maxpool after
//   0x40: batchnorm after (the bn blocks are then non-empty)
//   0x80: relu after
// Post-ops apply in the order batchnorm, relu, maxpool. A flatten stage is
// implied between the last conv and the first dense layer.
namespace packed {
constexpr uint8_t kKindConv = 1;
constexpr uint8_t kKindDense = 2;
constexpr uint8_t kFlagSamePad = 0x10;
constexpr uint8_t kFlagPool = 0x20;
constexpr uint8_t kFlagBatchNorm = 0x40;
constexpr uint8_t kFlagRelu = 0x80;
}  // namespace packed

struct PackedLayer {
  uint8_t kind = 0;
  uint8_t depth = 32;
  Shape shape;
  float delta = 0.0f;
  std::vector<float> mu;
  std::vector<uint8_t> payload;
  std::vector<float> bias, bn_gamma, bn_beta, bn_rmean, bn_rvar;
};

struct PackedModel {
  uint16_t version = 1;
  std::vector<PackedLayer> layers;
};

std::vector<uint8_t> encode_packed(const PackedModel& pm);
PackedModel decode_packed(std::span<const uint8_t> bytes);  // errors name the byte offset

void write_packed_file(const PackedModel& pm, const std::string& path);
PackedModel read_packed_file(const std::string& path);

// Snapshot of a trained model at the decided depths.
PackedModel pack_model(Model& model, const std::vector<int>& depths);

// Inference model from a container: quantized layers become materialized
// full-precision weights (mu times codes), bit-identical to what the trainer
// evaluates after export.
Model unpack_to_model(const PackedModel& pm);

}  // namespace stq
