// SPDX-License-Identifier: Apache-2.0
#include "stq/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stq {

QuantMode parse_mode(const std::string& s) {
  if (s == "stq") return QuantMode::STQ;
  if (s == "bc") return QuantMode::BC;
  if (s == "bwn") return QuantMode::BWN;
  if (s == "twn") return QuantMode::TWN;
  if (s == "fp") return QuantMode::FP;
  throw std::invalid_argument("unknown quantization mode '" + s + "' (expected stq|bc|bwn|twn|fp)");
}

const char* mode_name(QuantMode m) {
  switch (m) {
    case QuantMode::STQ: return "stq";
    case QuantMode::BC: return "bc";
    case QuantMode::BWN: return "bwn";
    case QuantMode::TWN: return "twn";
    case QuantMode::FP: return "fp";
  }
  return "?";
}

namespace {

constexpr float kMuFloor = 1e-6f;
constexpr double kBetaInit = 3.0 * kPi / 8.0;

// He-initialized quantization state shared by conv and dense layers.
QuantLayerState init_state(Shape wshape, int64_t fan_in, QuantMode mode, bool quantize,
                           bool per_filter_mu, Rng& rng) {
  QuantLayerState st;
  st.mode = mode;
  st.quantize = quantize;
  st.sigma_init = std::sqrt(2.0f / static_cast<float>(fan_in));
  int64_t filters = wshape[0];
  st.weight = Tensor::randn(std::move(wshape), rng, st.sigma_init);
  st.weight.set_requires_grad(true);
  st.bias = Tensor::zeros({filters});
  st.bias.set_requires_grad(true);
  st.delta = 0.2f * st.sigma_init;
  if (mode == QuantMode::STQ && quantize) {
    int64_t block = st.weight.numel() / filters;
    std::span<const float> w = st.weight.data();
    if (per_filter_mu) {
      std::vector<float> mu(filters);
      for (int64_t f = 0; f < filters; ++f) {
        float s = 0.0f;
        for (int64_t i = 0; i < block; ++i) s += std::fabs(w[f * block + i]);
        mu[f] = std::max(kMuFloor, s / static_cast<float>(block));
      }
      st.mu = Tensor::from_data({filters}, std::move(mu));
    } else {
      st.mu = Tensor::scalar(std::max(kMuFloor, bwn_scale(w)));
    }
    st.mu.set_requires_grad(true);
    st.beta = Tensor::scalar(static_cast<float>(kBetaInit));
    st.beta.set_requires_grad(true);
  }
  return st;
}

}  // namespace

Tensor QuantLayerState::train_weight() const {
  switch (effective_mode()) {
    case QuantMode::FP:
      return weight;
    case QuantMode::STQ:
      return ste_quantize(weight, CodeFn::Ternary, delta, mu);
    case QuantMode::BC:
      return ste_quantize(weight, CodeFn::Sign, 0.0f, Tensor::scalar(1.0f));
    case QuantMode::BWN: {
      float m;
      {
        NoGradGuard ng;
        m = bwn_scale(weight);
      }
      return ste_quantize(weight, CodeFn::Sign, 0.0f, Tensor::scalar(std::max(kMuFloor, m)));
    }
    case QuantMode::TWN: {
      TwnParams p;
      {
        NoGradGuard ng;
        p = twn_threshold_and_scale(weight);
      }
      return ste_quantize(weight, CodeFn::Ternary, p.delta, Tensor::scalar(std::max(kMuFloor, p.mu)));
    }
  }
  throw std::logic_error("train_weight: unhandled mode");
}

TernaryCodes QuantLayerState::export_codes(int depth_bits) const {
  if (effective_mode() == QuantMode::FP)
    throw std::logic_error("export_codes: full-precision layer has no codes");
  if (depth_bits == 1) return sign_binarize(weight);
  if (depth_bits != 2) throw std::invalid_argument("export_codes: depth must be 1 or 2 bits");
  switch (effective_mode()) {
    case QuantMode::STQ:
      return threshold_ternarize(weight, delta);
    case QuantMode::TWN:
      return threshold_ternarize(weight, twn_threshold_and_scale(weight).delta);
    default:
      // Binary-mode layers exported at 2 bits keep their sign codes.
      return sign_binarize(weight);
  }
}

std::vector<float> QuantLayerState::export_scales(int depth_bits) const {
  (void)depth_bits;
  switch (effective_mode()) {
    case QuantMode::FP:
      return {};
    case QuantMode::STQ: {
      std::span<const float> m = mu.data();
      return std::vector<float>(m.begin(), m.end());
    }
    case QuantMode::BC:
      return {1.0f};
    case QuantMode::BWN:
      return {std::max(kMuFloor, bwn_scale(weight))};
    case QuantMode::TWN:
      return {std::max(kMuFloor, twn_threshold_and_scale(weight).mu)};
  }
  return {};
}

QuantConv2d::QuantConv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, int padding,
                         QuantMode mode, bool quantize, bool per_filter_mu, Rng& rng)
    : stride(stride), padding(padding) {
  state = init_state({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, mode, quantize,
                     per_filter_mu, rng);
}

Tensor QuantConv2d::forward(const Tensor& x, bool) {
  return conv2d(x, state.train_weight(), state.bias, stride, padding);
}

void QuantConv2d::collect_params(std::vector<ParamRef>& out) {
  out.push_back({state.weight, ParamKind::Weight});
  out.push_back({state.bias, ParamKind::Bias});
  if (state.mu.defined()) out.push_back({state.mu, ParamKind::Mu});
  if (state.beta.defined()) out.push_back({state.beta, ParamKind::Beta});
}

QuantDense::QuantDense(int64_t in_features, int64_t out_features, QuantMode mode, bool quantize,
                       bool per_filter_mu, Rng& rng) {
  state = init_state({out_features, in_features}, in_features, mode, quantize, per_filter_mu, rng);
}

Tensor QuantDense::forward(const Tensor& x, bool) {
  return linear(x, state.train_weight(), state.bias);
}

void QuantDense::collect_params(std::vector<ParamRef>& out) {
  out.push_back({state.weight, ParamKind::Weight});
  out.push_back({state.bias, ParamKind::Bias});
  if (state.mu.defined()) out.push_back({state.mu, ParamKind::Mu});
  if (state.beta.defined()) out.push_back({state.beta, ParamKind::Beta});
}

BatchNormLayer::BatchNormLayer(int64_t channels)
    : gamma(Tensor::full({channels}, 1.0f)),
      beta(Tensor::zeros({channels})),
      running_mean(channels, 0.0f),
      running_var(channels, 1.0f) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

Tensor BatchNormLayer::forward(const Tensor& x, bool training) {
  return batchnorm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void BatchNormLayer::collect_params(std::vector<ParamRef>& out) {
  out.push_back({gamma, ParamKind::BnGamma});
  out.push_back({beta, ParamKind::BnBeta});
}

Tensor Model::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& layer : layers) h = layer->forward(h, training);
  return h;
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  for (auto& layer : layers) layer->collect_params(out);
  return out;
}

std::vector<QuantLayerState*> Model::quant_states() {
  std::vector<QuantLayerState*> out;
  for (auto& layer : layers)
    if (QuantLayerState* st = layer->quant_state()) out.push_back(st);
  return out;
}

std::vector<Layer*> Model::weight_layers() {
  std::vector<Layer*> out;
  for (auto& layer : layers)
    if (layer->quant_state()) out.push_back(layer.get());
  return out;
}

int64_t ModelSpec::weight_layer_count() const {
  int64_t n = 0;
  for (const LayerSpec& l : layers)
    if (l.kind == LayerSpec::Kind::Conv || l.kind == LayerSpec::Kind::Dense) ++n;
  return n;
}

ModelSpec build_lenet5(QuantMode mode) {
  using K = LayerSpec::Kind;
  ModelSpec spec;
  spec.name = "lenet5";
  spec.mode = mode;
  spec.layers = {
      {K::Conv, 6, 5, 1, 2, true},
      {K::Relu},
      {K::MaxPool, 0, 2, 2, 0, true},
      {K::Conv, 16, 5, 1, 0, true},
      {K::Relu},
      {K::MaxPool, 0, 2, 2, 0, true},
      {K::Flatten},
      {K::Dense, 120},
      {K::Relu},
      {K::Dense, 84},
      {K::Relu},
      {K::Dense, 10},
  };
  return spec;
}

ModelSpec build_vgg7(QuantMode mode, const Vgg7Options& opt) {
  using K = LayerSpec::Kind;
  if (opt.conv_widths.size() != 6)
    throw std::invalid_argument("build_vgg7: expects 6 convolution widths");
  ModelSpec spec;
  spec.name = "vgg7";
  spec.mode = mode;
  for (size_t i = 0; i < 6; ++i) {
    int64_t width = std::max<int64_t>(
        1, static_cast<int64_t>(std::lround(static_cast<double>(opt.conv_widths[i]) * opt.width_factor)));
    spec.layers.push_back({K::Conv, width, 3, 1, 1, opt.quantize_all});
    spec.layers.push_back({K::BatchNorm});
    spec.layers.push_back({K::Relu});
    if (i % 2 == 1) spec.layers.push_back({K::MaxPool, 0, 2, 2, 0, true});
  }
  spec.layers.push_back({K::Flatten});
  spec.layers.push_back({K::Dense, opt.num_classes, 0, 1, 0, opt.quantize_all});
  return spec;
}

Model instantiate(const ModelSpec& spec, const Shape& input_chw, Rng& rng) {
  if (input_chw.size() != 3)
    throw std::invalid_argument("instantiate: input shape must be [C,H,W], got " + shape_str(input_chw));
  Model model;
  int64_t c = input_chw[0], h = input_chw[1], w = input_chw[2];
  bool flat = false;
  int64_t features = 0;
  for (const LayerSpec& l : spec.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv: {
        if (flat) throw std::invalid_argument("instantiate: conv after flatten");
        model.layers.push_back(std::make_unique<QuantConv2d>(c, l.out, l.kernel, l.stride, l.padding,
                                                             spec.mode, l.quantize, spec.per_filter_mu, rng));
        c = l.out;
        h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
        w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
        break;
      }
      case LayerSpec::Kind::Dense: {
        int64_t in = flat ? features : c * h * w;
        if (!flat) {
          model.layers.push_back(std::make_unique<FlattenLayer>());
          flat = true;
        }
        model.layers.push_back(
            std::make_unique<QuantDense>(in, l.out, spec.mode, l.quantize, spec.per_filter_mu, rng));
        features = l.out;
        break;
      }
      case LayerSpec::Kind::MaxPool:
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
        model.layers.push_back(std::make_unique<MaxPool2dLayer>(l.kernel, l.stride));
        break;
      case LayerSpec::Kind::Relu:
        model.layers.push_back(std::make_unique<ReluLayer>());
        break;
      case LayerSpec::Kind::Flatten:
        if (!flat) {
          features = c * h * w;
          flat = true;
          model.layers.push_back(std::make_unique<FlattenLayer>());
        }
        break;
      case LayerSpec::Kind::BatchNorm:
        if (flat) throw std::invalid_argument("instantiate: batchnorm after flatten unsupported");
        model.layers.push_back(std::make_unique<BatchNormLayer>(c));
        break;
    }
    if (h <= 0 || w <= 0)
      throw std::invalid_argument("instantiate: spatial size collapsed to zero in " + spec.name);
  }
  return model;
}

}  // namespace stq
