// SPDX-License-Identifier: Apache-2.0
#include "stq/packed_model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace stq {

namespace {

constexpr char kMagic[4] = {'S', 'T', 'Q', 'W'};
constexpr uint16_t kVersion = 1;

struct Writer {
  std::vector<uint8_t> bytes;

  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back(static_cast<uint8_t>(v));
    bytes.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void f32_block(const std::vector<float>& vs) {
    u64(vs.size());
    for (float v : vs) f32(v);
  }
  void raw(std::span<const uint8_t> data) { bytes.insert(bytes.end(), data.begin(), data.end()); }
};

struct Reader {
  std::span<const uint8_t> bytes;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("packed model: " + what + " at offset " + std::to_string(pos));
  }
  void need(size_t n) const {
    if (pos + n > bytes.size()) fail("truncated file, need " + std::to_string(n) + " more bytes");
  }
  uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<float> f32_block(uint64_t max_count) {
    uint64_t count = u64();
    if (count > max_count) fail("block of " + std::to_string(count) + " floats exceeds limit");
    need(count * 4);
    std::vector<float> vs(count);
    for (uint64_t i = 0; i < count; ++i) vs[i] = f32();
    return vs;
  }
};

constexpr uint64_t kMaxBlock = 1ull << 32;

void validate_layer(const PackedLayer& l, size_t index, size_t offset) {
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("packed model: layer " + std::to_string(index) + ": " + what +
                             " (near offset " + std::to_string(offset) + ")");
  };
  uint8_t base = l.kind & 0x03;
  if (base != packed::kKindConv && base != packed::kKindDense) fail("unknown layer kind");
  if ((l.kind & 0x0C) != 0) fail("reserved kind bits set");
  if (l.depth != 1 && l.depth != 2 && l.depth != 32) fail("depth code " + std::to_string(l.depth));
  size_t want_rank = base == packed::kKindConv ? 4 : 2;
  if (l.shape.size() != want_rank) fail("rank " + std::to_string(l.shape.size()));
  for (int64_t e : l.shape)
    if (e <= 0) fail("non-positive extent");
  int64_t count = shape_numel(l.shape);
  int64_t filters = l.shape[0];
  uint64_t want_payload =
      l.depth == 32 ? static_cast<uint64_t>(count) * 4
                    : static_cast<uint64_t>(packed_size(count, static_cast<QuantDepth>(l.depth)));
  if (l.payload.size() != want_payload)
    fail("payload of " + std::to_string(l.payload.size()) + " bytes, expected " + std::to_string(want_payload));
  if (l.depth != 32 && l.mu.size() != static_cast<size_t>(filters) && l.mu.size() != 1)
    fail(std::to_string(l.mu.size()) + " scales for " + std::to_string(filters) + " filters");
  if (!l.bias.empty() && l.bias.size() != static_cast<size_t>(filters)) fail("bias size mismatch");
  bool bn = (l.kind & packed::kFlagBatchNorm) != 0;
  size_t bn_len = bn ? static_cast<size_t>(filters) : 0;
  if (l.bn_gamma.size() != bn_len || l.bn_beta.size() != bn_len || l.bn_rmean.size() != bn_len ||
      l.bn_rvar.size() != bn_len)
    fail("batchnorm block size mismatch");
}

}  // namespace

std::vector<uint8_t> encode_packed(const PackedModel& pm) {
  if (pm.layers.size() > 0xFFFF) throw std::invalid_argument("encode_packed: too many layers");
  Writer w;
  w.raw(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(kMagic), 4));
  w.u16(pm.version);
  w.u16(static_cast<uint16_t>(pm.layers.size()));
  for (const PackedLayer& l : pm.layers) {
    w.u8(l.kind);
    w.u8(l.depth);
    w.u8(static_cast<uint8_t>(l.shape.size()));
    for (int64_t e : l.shape) w.u32(static_cast<uint32_t>(e));
    w.f32(l.delta);
    w.u32(static_cast<uint32_t>(l.mu.size()));
    for (float m : l.mu) w.f32(m);
    w.u64(l.payload.size());
    w.raw(l.payload);
    w.f32_block(l.bias);
    w.f32_block(l.bn_gamma);
    w.f32_block(l.bn_beta);
    w.f32_block(l.bn_rmean);
    w.f32_block(l.bn_rvar);
  }
  return w.bytes;
}

PackedModel decode_packed(std::span<const uint8_t> bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) r.fail("bad magic, expected \"STQW\"");
  r.pos = 4;
  PackedModel pm;
  pm.version = r.u16();
  if (pm.version != kVersion)
    r.fail("unsupported version " + std::to_string(pm.version) + ", expected " + std::to_string(kVersion));
  uint16_t layer_count = r.u16();
  for (uint16_t i = 0; i < layer_count; ++i) {
    size_t layer_offset = r.pos;
    PackedLayer l;
    l.kind = r.u8();
    l.depth = r.u8();
    uint8_t rank = r.u8();
    if (rank == 0 || rank > 4) r.fail("layer " + std::to_string(i) + ": bad rank " + std::to_string(rank));
    for (uint8_t d = 0; d < rank; ++d) l.shape.push_back(r.u32());
    l.delta = r.f32();
    uint32_t mu_count = r.u32();
    if (mu_count > kMaxBlock) r.fail("scale count too large");
    for (uint32_t m = 0; m < mu_count; ++m) l.mu.push_back(r.f32());
    uint64_t payload_len = r.u64();
    if (payload_len > kMaxBlock) r.fail("payload too large");
    r.need(payload_len);
    l.payload.assign(bytes.begin() + r.pos, bytes.begin() + r.pos + payload_len);
    r.pos += payload_len;
    l.bias = r.f32_block(kMaxBlock);
    l.bn_gamma = r.f32_block(kMaxBlock);
    l.bn_beta = r.f32_block(kMaxBlock);
    l.bn_rmean = r.f32_block(kMaxBlock);
    l.bn_rvar = r.f32_block(kMaxBlock);
    validate_layer(l, i, layer_offset);
    pm.layers.push_back(std::move(l));
  }
  if (r.pos != bytes.size()) r.fail(std::to_string(bytes.size() - r.pos) + " trailing bytes");
  return pm;
}

void write_packed_file(const PackedModel& pm, const std::string& path) {
  std::vector<uint8_t> bytes = encode_packed(pm);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

PackedModel read_packed_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_packed(bytes);
}

PackedModel pack_model(Model& model, const std::vector<int>& depths) {
  PackedModel pm;
  size_t weight_index = 0;
  const auto& layers = model.layers;
  for (size_t i = 0; i < layers.size(); ++i) {
    QuantLayerState* st = layers[i]->quant_state();
    if (!st) continue;
    if (weight_index >= depths.size()) throw std::invalid_argument("pack_model: depth count mismatch");
    PackedLayer pl;
    pl.depth = static_cast<uint8_t>(depths[weight_index]);
    pl.shape = st->weight.shape();
    pl.bias.assign(st->bias.data().begin(), st->bias.data().end());
    if (auto* conv = dynamic_cast<QuantConv2d*>(layers[i].get())) {
      pl.kind = packed::kKindConv;
      if (conv->padding > 0) {
        if (conv->padding != (conv->state.weight.dim(2) - 1) / 2 || conv->stride != 1)
          throw std::invalid_argument("pack_model: only stride-1 valid/same convolutions are representable");
        pl.kind |= packed::kFlagSamePad;
      }
    } else {
      pl.kind = packed::kKindDense;
    }
    // Inspect the post-ops between this weight layer and the next one.
    for (size_t j = i + 1; j < layers.size() && !layers[j]->quant_state(); ++j) {
      if (auto* bn = dynamic_cast<BatchNormLayer*>(layers[j].get())) {
        pl.kind |= packed::kFlagBatchNorm;
        pl.bn_gamma.assign(bn->gamma.data().begin(), bn->gamma.data().end());
        pl.bn_beta.assign(bn->beta.data().begin(), bn->beta.data().end());
        pl.bn_rmean = bn->running_mean;
        pl.bn_rvar = bn->running_var;
      } else if (dynamic_cast<ReluLayer*>(layers[j].get())) {
        pl.kind |= packed::kFlagRelu;
      } else if (auto* pool = dynamic_cast<MaxPool2dLayer*>(layers[j].get())) {
        if (pool->kernel != 2 || pool->stride != 2)
          throw std::invalid_argument("pack_model: only 2x2/2 maxpool is representable");
        pl.kind |= packed::kFlagPool;
      }
    }
    if (pl.depth == 32) {
      pl.delta = 0.0f;
      std::span<const float> w = st->weight.data();
      pl.payload.resize(w.size() * 4);
      std::memcpy(pl.payload.data(), w.data(), pl.payload.size());
    } else {
      pl.delta = st->effective_mode() == QuantMode::STQ
                     ? st->delta
                     : (st->effective_mode() == QuantMode::TWN ? twn_threshold_and_scale(st->weight).delta : 0.0f);
      pl.mu = st->export_scales(pl.depth);
      pl.payload = pack_codes(st->export_codes(pl.depth), static_cast<QuantDepth>(pl.depth));
    }
    pm.layers.push_back(std::move(pl));
    ++weight_index;
  }
  if (weight_index != depths.size()) throw std::invalid_argument("pack_model: depth count mismatch");
  return pm;
}

Model unpack_to_model(const PackedModel& pm) {
  Model model;
  Rng dummy(0);
  bool flat = false;
  bool in_conv_stack = true;
  for (const PackedLayer& pl : pm.layers) {
    uint8_t base = pl.kind & 0x03;
    std::vector<float> weights;
    if (pl.depth == 32) {
      weights.resize(pl.payload.size() / 4);
      std::memcpy(weights.data(), pl.payload.data(), pl.payload.size());
    } else {
      TernaryCodes codes = unpack_codes(pl.payload, pl.shape, static_cast<QuantDepth>(pl.depth));
      Tensor m = materialize_codes(codes, pl.mu);
      weights.assign(m.data().begin(), m.data().end());
    }
    if (base == packed::kKindConv) {
      if (!in_conv_stack) throw std::runtime_error("packed model: conv layer after dense layer");
      int kernel = static_cast<int>(pl.shape[2]);
      int padding = (pl.kind & packed::kFlagSamePad) ? (kernel - 1) / 2 : 0;
      auto conv = std::make_unique<QuantConv2d>(pl.shape[1], pl.shape[0], kernel, 1, padding,
                                                QuantMode::FP, false, true, dummy);
      std::copy(weights.begin(), weights.end(), conv->state.weight.raw_data().begin());
      std::copy(pl.bias.begin(), pl.bias.end(), conv->state.bias.raw_data().begin());
      model.layers.push_back(std::move(conv));
    } else {
      if (!flat) {
        model.layers.push_back(std::make_unique<FlattenLayer>());
        flat = true;
      }
      in_conv_stack = false;
      auto dense = std::make_unique<QuantDense>(pl.shape[1], pl.shape[0], QuantMode::FP, false, true, dummy);
      std::copy(weights.begin(), weights.end(), dense->state.weight.raw_data().begin());
      std::copy(pl.bias.begin(), pl.bias.end(), dense->state.bias.raw_data().begin());
      model.layers.push_back(std::move(dense));
    }
    if (pl.kind & packed::kFlagBatchNorm) {
      auto bn = std::make_unique<BatchNormLayer>(pl.shape[0]);
      std::copy(pl.bn_gamma.begin(), pl.bn_gamma.end(), bn->gamma.raw_data().begin());
      std::copy(pl.bn_beta.begin(), pl.bn_beta.end(), bn->beta.raw_data().begin());
      bn->running_mean = pl.bn_rmean;
      bn->running_var = pl.bn_rvar;
      model.layers.push_back(std::move(bn));
    }
    if (pl.kind & packed::kFlagRelu) model.layers.push_back(std::make_unique<ReluLayer>());
    if (pl.kind & packed::kFlagPool) model.layers.push_back(std::make_unique<MaxPool2dLayer>(2, 2));
  }
  return model;
}

}  // namespace stq
