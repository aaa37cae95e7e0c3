// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stq/quant.hpp"
#include "stq/regularizer.hpp"
#include "stq/tensor.hpp"

namespace stq {

enum class QuantMode { STQ, BC, BWN, TWN, FP };
QuantMode parse_mode(const std::string& s);
const char* mode_name(QuantMode m);

// Per-layer quantization state. Latent weights stay full precision; the
// forward pass sees their quantized view.
struct QuantLayerState {
  Tensor weight;  // latent W, filter-major (output channel / output unit first)
  Tensor bias;
  Tensor mu;    // [F] per-filter scales, or [1] shared (trainable in STQ mode)
  Tensor beta;  // [1] shape parameter (trainable in STQ mode)
  float delta = 0.0f;       // 0.2 * sigma_init, frozen after initialization
  float sigma_init = 0.0f;  // std of the Gaussian initializer
  QuantMode mode = QuantMode::FP;
  bool quantize = true;  // false: keep this layer full precision

  QuantMode effective_mode() const { return quantize ? mode : QuantMode::FP; }
  int64_t filter_count() const { return weight.dim(0); }
  int64_t weight_count() const { return weight.numel(); }

  // Quantized view used by forward/backward during training (differentiable).
  Tensor train_weight() const;
  // Codes written at export time, after the depth decision (1 or 2 bits).
  TernaryCodes export_codes(int depth_bits) const;
  // Scales stored next to the exported codes.
  std::vector<float> export_scales(int depth_bits) const;
};

enum class ParamKind { Weight, Bias, Mu, Beta, BnGamma, BnBeta };
struct ParamRef {
  Tensor tensor;
  ParamKind kind;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual void collect_params(std::vector<ParamRef>& out) { (void)out; }
  virtual QuantLayerState* quant_state() { return nullptr; }
  virtual const char* kind() const = 0;
};

class QuantConv2d : public Layer {
 public:
  QuantConv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, int padding,
              QuantMode mode, bool quantize, bool per_filter_mu, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect_params(std::vector<ParamRef>& out) override;
  QuantLayerState* quant_state() override { return &state; }
  const char* kind() const override { return "conv2d"; }

  QuantLayerState state;
  int stride;
  int padding;
};

class QuantDense : public Layer {
 public:
  QuantDense(int64_t in_features, int64_t out_features, QuantMode mode, bool quantize,
             bool per_filter_mu, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect_params(std::vector<ParamRef>& out) override;
  QuantLayerState* quant_state() override { return &state; }
  const char* kind() const override { return "dense"; }

  QuantLayerState state;
};

class MaxPool2dLayer : public Layer {
 public:
  MaxPool2dLayer(int kernel, int stride) : kernel(kernel), stride(stride) {}
  Tensor forward(const Tensor& x, bool) override { return maxpool2d(x, kernel, stride); }
  const char* kind() const override { return "maxpool"; }
  int kernel, stride;
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override { return relu(x); }
  const char* kind() const override { return "relu"; }
};

class FlattenLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
  }
  const char* kind() const override { return "flatten"; }
};

class BatchNormLayer : public Layer {
 public:
  explicit BatchNormLayer(int64_t channels);
  Tensor forward(const Tensor& x, bool training) override;
  void collect_params(std::vector<ParamRef>& out) override;
  const char* kind() const override { return "batchnorm"; }

  Tensor gamma, beta;
  std::vector<float> running_mean, running_var;
  float momentum = 0.9f;
  float eps = 1e-5f;
};

struct Model {
  std::vector<std::unique_ptr<Layer>> layers;

  Tensor forward(const Tensor& x, bool training);
  std::vector<ParamRef> params();
  // Weight layers in network order (conv/dense), including unquantized ones.
  std::vector<QuantLayerState*> quant_states();
  std::vector<Layer*> weight_layers();
};

// Declarative architecture description.
struct LayerSpec {
  enum class Kind { Conv, Dense, MaxPool, Relu, Flatten, BatchNorm };
  Kind kind;
  int64_t out = 0;  // filters (conv) or units (dense)
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  bool quantize = true;
};

struct ModelSpec {
  std::string name;
  QuantMode mode = QuantMode::STQ;
  bool per_filter_mu = true;
  std::vector<LayerSpec> layers;

  int64_t weight_layer_count() const;
};

// LeNet-5: conv 6@5x5 (pad 2) -> pool -> conv 16@5x5 -> pool ->
// dense 120 -> dense 84 -> dense 10. Five quantizable weight layers.
ModelSpec build_lenet5(QuantMode mode);

struct Vgg7Options {
  std::vector<int64_t> conv_widths = {128, 128, 256, 256, 512, 512};
  double width_factor = 1.0;
  int64_t num_classes = 10;
  bool quantize_all = true;
};
// VGG-7: three pairs of 3x3 conv blocks (batchnorm + ReLU after each conv,
// maxpool after each pair) and a dense classifier head. Seven quantizable
// weight layers.
ModelSpec build_vgg7(QuantMode mode, const Vgg7Options& opt = {});

// Instantiates a spec for inputs shaped [C,H,W]; weights drawn from `rng`.
Model instantiate(const ModelSpec& spec, const Shape& input_chw, Rng& rng);

}  // namespace stq
