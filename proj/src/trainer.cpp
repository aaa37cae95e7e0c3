// SPDX-License-Identifier: Apache-2.0
#include "stq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stq {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr > 0.0f)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(lr_drop_factor > 1.0f)) throw std::invalid_argument("TrainConfig: lr_drop_factor must be > 1");
  if (!(weight_decay >= 0.0f)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (hist_bins < 3) throw std::invalid_argument("TrainConfig: hist_bins must be >= 3");
  reg.validate();
}

Tensor total_objective(Model& model, const Tensor& x, const std::vector<int>& targets,
                       const TrainConfig& cfg) {
  Tensor logits = model.forward(x, true);
  Tensor loss = nll_loss(log_softmax(logits), targets);
  if (cfg.reg.lambda > 0.0) {
    for (QuantLayerState* st : model.quant_states()) {
      if (st->effective_mode() != QuantMode::STQ) continue;
      loss = add(loss, reg_layer_op(st->weight, st->mu, st->beta, cfg.reg));
    }
  }
  return loss;
}

std::vector<int> decide_depths(Model& model, double depth_delta) {
  std::vector<int> depths;
  for (QuantLayerState* st : model.quant_states()) {
    switch (st->effective_mode()) {
      case QuantMode::FP: depths.push_back(32); break;
      case QuantMode::BC:
      case QuantMode::BWN: depths.push_back(1); break;
      case QuantMode::TWN: depths.push_back(2); break;
      case QuantMode::STQ:
        depths.push_back(static_cast<double>(st->beta.item()) >= depth_delta ? 1 : 2);
        break;
    }
  }
  return depths;
}

std::string format_depth_string(const std::vector<int>& depths) {
  std::string s;
  for (size_t i = 0; i < depths.size(); ++i) {
    if (i) s += "-";
    s += std::to_string(depths[i]);
  }
  return s;
}

double compression_ratio(Model& model, const std::vector<int>& depths) {
  std::vector<QuantLayerState*> states = model.quant_states();
  if (states.size() != depths.size())
    throw std::invalid_argument("compression_ratio: " + std::to_string(depths.size()) + " depths for " +
                                std::to_string(states.size()) + " weight layers");
  double full_bits = 0.0, quant_bits = 0.0;
  for (size_t i = 0; i < states.size(); ++i) {
    double w = static_cast<double>(states[i]->weight_count());
    full_bits += w * 32.0;
    quant_bits += w * static_cast<double>(depths[i]);
  }
  return full_bits / quant_bits;
}

void adam_step(std::vector<ParamRef>& params, AdamState& state, float lr, float weight_decay) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(static_cast<size_t>(params[i].tensor.numel()), 0.0f);
      state.v[i].assign(static_cast<size_t>(params[i].tensor.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                " slots for " + std::to_string(params.size()) + " parameters");
  state.t += 1;
  float b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
  float corr1 = 1.0f / (1.0f - static_cast<float>(std::pow(state.beta1, static_cast<double>(state.t))));
  float corr2 = 1.0f / (1.0f - static_cast<float>(std::pow(state.beta2, static_cast<double>(state.t))));
  float eps = static_cast<float>(state.eps);
  for (size_t i = 0; i < params.size(); ++i) {
    ParamRef& p = params[i];
    Tensor g = p.tensor.grad();
    std::span<const float> gd = g.data();
    std::span<float> w = p.tensor.raw_data();
    if (state.m[i].size() != w.size())
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " changed size");
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    bool decay = weight_decay > 0.0f && p.kind == ParamKind::Weight;
    for (size_t j = 0; j < w.size(); ++j) {
      float gj = gd[j];
      if (decay) gj += weight_decay * w[j];
      m[j] = b1 * m[j] + (1.0f - b1) * gj;
      v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
      float mhat = m[j] * corr1;
      float vhat = v[j] * corr2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

namespace {

void assemble_batch(const Dataset& ds, const std::vector<int64_t>& order, int64_t start, int64_t count,
                    std::vector<float>& images, std::vector<int>& labels) {
  int64_t isize = ds.image_size();
  images.resize(static_cast<size_t>(count * isize));
  labels.resize(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    int64_t src = order[static_cast<size_t>(start + i)];
    const float* sp = ds.images.data() + src * isize;
    std::copy(sp, sp + isize, images.data() + i * isize);
    labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
  }
}

int64_t argmax_row(const float* row, int64_t k) {
  int64_t best = 0;
  for (int64_t i = 1; i < k; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

double evaluate_impl(Model& model, const Dataset& ds, int batch_size) {
  NoGradGuard ng;
  int64_t correct = 0;
  std::vector<float> images;
  std::vector<int> labels;
  std::vector<int64_t> order(static_cast<size_t>(ds.n));
  std::iota(order.begin(), order.end(), 0);
  for (int64_t start = 0; start < ds.n; start += batch_size) {
    int64_t count = std::min<int64_t>(batch_size, ds.n - start);
    assemble_batch(ds, order, start, count, images, labels);
    Tensor x = Tensor::from_data({count, ds.channels, ds.height, ds.width}, images);
    Tensor logits = model.forward(x, false);
    int64_t k = logits.dim(1);
    const float* p = logits.data().data();
    for (int64_t i = 0; i < count; ++i)
      if (argmax_row(p + i * k, k) == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.n);
}

// Temporarily replaces a quantized layer's latent weights with the exported
// quantized values (and disables quantization) so evaluation sees exactly
// what a decoded model file computes with.
class ExportSwap {
 public:
  ExportSwap(QuantLayerState* st, int depth) : st_(st) {
    if (st->effective_mode() == QuantMode::FP) return;
    saved_weight_ = st->weight;
    saved_quantize_ = st->quantize;
    TernaryCodes codes = st->export_codes(depth);
    std::vector<float> scales = st->export_scales(depth);
    Tensor materialized = materialize_codes(codes, scales);
    st->weight = materialized;
    st->quantize = false;
    swapped_ = true;
  }
  ~ExportSwap() {
    if (swapped_) {
      st_->weight = saved_weight_;
      st_->quantize = saved_quantize_;
    }
  }
  ExportSwap(const ExportSwap&) = delete;
  ExportSwap& operator=(const ExportSwap&) = delete;

 private:
  QuantLayerState* st_;
  Tensor saved_weight_;
  bool saved_quantize_ = false;
  bool swapped_ = false;
};

LayerHistogram make_histogram(const QuantLayerState& st, int layer, int epoch, int bins) {
  LayerHistogram h;
  h.layer = layer;
  h.epoch = epoch;
  double r = 4.0 * static_cast<double>(st.sigma_init);
  if (!(r > 0.0)) r = 1.0;
  h.lo = -r;
  h.hi = r;
  h.counts.assign(static_cast<size_t>(bins), 0);
  double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (float v : st.weight.data()) {
    int64_t b = static_cast<int64_t>(std::floor((static_cast<double>(v) - h.lo) / width));
    b = std::clamp<int64_t>(b, 0, bins - 1);
    h.counts[static_cast<size_t>(b)]++;
  }
  return h;
}

}  // namespace

double evaluate(Model& model, const Dataset& ds, int batch_size) {
  return evaluate_impl(model, ds, batch_size);
}

double evaluate_exported(Model& model, const Dataset& ds, int batch_size,
                         const std::vector<int>& depths) {
  std::vector<QuantLayerState*> states = model.quant_states();
  if (states.size() != depths.size())
    throw std::invalid_argument("evaluate_exported: depth count mismatch");
  std::vector<std::unique_ptr<ExportSwap>> swaps;
  swaps.reserve(states.size());
  for (size_t i = 0; i < states.size(); ++i)
    swaps.push_back(std::make_unique<ExportSwap>(states[i], depths[i]));
  return evaluate_impl(model, ds, batch_size);
}

void throw_divergence(int epoch, int batch, double loss) {
  throw std::runtime_error("training diverged: loss " + std::to_string(loss) + " at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch));
}

TrainingReport train_model(Model& model, const Dataset& train, const Dataset& test,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (train.n == 0) throw std::invalid_argument("train_model: empty training set");

  TrainingReport report;
  report.mode = mode_name(cfg.mode);
  report.seed = cfg.seed;

  std::vector<ParamRef> params = model.params();
  std::vector<QuantLayerState*> states = model.quant_states();
  AdamState adam;

  Rng shuffle_rng = Rng(cfg.seed).fork(1);
  Rng augment_rng = Rng(cfg.seed).fork(2);

  int64_t n_train = train.n;
  if (cfg.train_subset > 0) n_train = std::min<int64_t>(cfg.train_subset, n_train);
  std::vector<int64_t> order(static_cast<size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);

  std::vector<int> hist_epochs = cfg.hist_epochs;
  if (hist_epochs.empty()) hist_epochs = {0, cfg.epochs / 2, cfg.epochs - 1};

  bool decay_mode = cfg.mode == QuantMode::BC || cfg.mode == QuantMode::BWN || cfg.mode == QuantMode::TWN;
  float wd = decay_mode ? cfg.weight_decay : 0.0f;
  bool clip_bc = cfg.mode == QuantMode::BC && cfg.clip_latent;
  float beta_min = static_cast<float>(cfg.reg.beta_min);
  float beta_max = static_cast<float>(cfg.reg.beta_max);

  std::vector<float> batch_images;
  std::vector<int> batch_labels;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    float lr = cfg.lr;
    for (int d : cfg.lr_drop_epochs)
      if (epoch >= d) lr /= cfg.lr_drop_factor;

    shuffle(order.data(), order.size(), shuffle_rng);

    double loss_sum = 0.0;
    int64_t seen = 0;
    int batch_index = 0;
    for (int64_t start = 0; start < n_train; start += cfg.batch_size, ++batch_index) {
      int64_t count = std::min<int64_t>(cfg.batch_size, n_train - start);
      assemble_batch(train, order, start, count, batch_images, batch_labels);
      if (cfg.augment)
        augment_batch(batch_images, count, train.channels, train.height, train.width, augment_rng);
      Tensor x = Tensor::from_data({count, train.channels, train.height, train.width}, batch_images);

      for (ParamRef& p : params) p.tensor.zero_grad();
      Tensor loss = total_objective(model, x, batch_labels, cfg);
      double loss_v = static_cast<double>(loss.item());
      if (!std::isfinite(loss_v)) throw_divergence(epoch, batch_index, loss_v);
      backward(loss);
      adam_step(params, adam, lr, wd);

      for (ParamRef& p : params) {
        if (p.kind == ParamKind::Beta) {
          for (float& b : p.tensor.raw_data()) b = std::clamp(b, beta_min, beta_max);
        } else if (p.kind == ParamKind::Mu) {
          for (float& m : p.tensor.raw_data()) m = std::max(m, 1e-6f);
        } else if (clip_bc && p.kind == ParamKind::Weight) {
          for (float& w : p.tensor.raw_data()) w = std::clamp(w, -1.0f, 1.0f);
        }
      }

      loss_sum += loss_v * static_cast<double>(count);
      seen += count;
    }

    bool eval_now = (epoch % cfg.eval_every == 0) || epoch == cfg.epochs - 1;
    double val_acc = eval_now ? evaluate(model, test, cfg.batch_size) : -1.0;
    if (eval_now) report.best_val_acc = std::max(report.best_val_acc, val_acc);
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(seen), val_acc, lr});

    if (cfg.mode == QuantMode::STQ) {
      std::vector<double> betas;
      for (QuantLayerState* st : states)
        if (st->beta.defined()) betas.push_back(static_cast<double>(st->beta.item()));
      report.beta_by_epoch.push_back(std::move(betas));
    }

    if (std::find(hist_epochs.begin(), hist_epochs.end(), epoch) != hist_epochs.end())
      for (size_t i = 0; i < states.size(); ++i)
        report.histograms.push_back(make_histogram(*states[i], static_cast<int>(i), epoch, cfg.hist_bins));
  }

  report.depths = decide_depths(model, cfg.reg.depth_delta);
  report.depth_string = format_depth_string(report.depths);
  report.compression = compression_ratio(model, report.depths);
  report.final_acc = evaluate_exported(model, test, cfg.batch_size, report.depths);

  std::vector<Layer*> wlayers = model.weight_layers();
  for (size_t i = 0; i < states.size(); ++i) {
    QuantLayerState* st = states[i];
    LayerSummary s;
    s.kind = wlayers[i]->kind();
    s.weights = st->weight_count();
    s.depth = report.depths[i];
    s.beta = st->beta.defined() ? static_cast<double>(st->beta.item()) : 0.0;
    if (st->effective_mode() != QuantMode::FP) {
      std::vector<float> scales = st->export_scales(report.depths[i]);
      if (!scales.empty()) {
        double sum = 0.0;
        s.mu_min = s.mu_max = scales[0];
        for (float m : scales) {
          sum += m;
          s.mu_min = std::min<double>(s.mu_min, m);
          s.mu_max = std::max<double>(s.mu_max, m);
        }
        s.mu_mean = sum / static_cast<double>(scales.size());
      }
      int64_t dead = 0;
      for (float w : st->weight.data())
        if (std::fabs(w) <= st->delta) ++dead;
      s.zero_fraction = static_cast<double>(dead) / static_cast<double>(st->weight_count());
    }
    report.layer_summaries.push_back(std::move(s));
  }
  return report;
}

}  // namespace stq
