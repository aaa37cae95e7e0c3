// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "stq/dataio.hpp"
#include "stq/layers.hpp"
#include "stq/regularizer.hpp"

namespace stq {

struct TrainConfig {
  QuantMode mode = QuantMode::STQ;
  int epochs = 60;
  int batch_size = 64;
  float lr = 0.01f;
  std::vector<int> lr_drop_epochs = {15, 30};
  float lr_drop_factor = 10.0f;
  float weight_decay = 1e-4f;  // L2 on latent weights, BC/BWN/TWN only
  RegularizerConfig reg;
  uint64_t seed = 1;
  bool clip_latent = true;  // clamp BC latents to [-1,1] after each step
  int train_subset = 0;     // 0 = use the full training split
  int eval_every = 1;
  bool augment = false;
  std::vector<int> hist_epochs;  // empty = {0, epochs/2, epochs-1}
  int hist_bins = 81;

  void validate() const;
};

struct EpochStats {
  int epoch;
  double train_loss;
  double val_acc;  // negative when evaluation was skipped this epoch
  double lr;
};

struct LayerHistogram {
  int layer;
  int epoch;
  double lo, hi;  // fixed per-layer range; outliers land in the edge bins
  std::vector<int64_t> counts;
};

struct LayerSummary {
  std::string kind;
  int64_t weights = 0;
  int depth = 32;
  double beta = 0.0;  // NaN-free: 0 for layers without a shape parameter
  double mu_mean = 0.0, mu_min = 0.0, mu_max = 0.0;
  double zero_fraction = 0.0;  // fraction of latents inside the dead zone |w| <= delta
};

struct TrainingReport {
  std::string model_name, mode;
  uint64_t seed = 0;
  std::vector<EpochStats> epochs;
  std::vector<std::vector<double>> beta_by_epoch;  // [epoch][quantized layer], STQ only
  std::vector<int> depths;                         // bits per weight layer (1/2/32)
  std::string depth_string;
  double compression = 1.0;
  double best_val_acc = 0.0;
  double final_acc = 0.0;  // export-quantized weights, eval mode
  std::vector<LayerHistogram> histograms;
  std::vector<LayerSummary> layer_summaries;
};

// Cross-entropy on the batch plus the layer regularizers (STQ-mode layers
// with lambda > 0); lambda_l = lambda / #W_l.
Tensor total_objective(Model& model, const Tensor& x, const std::vector<int>& targets,
                       const TrainConfig& cfg);

// Per weight layer: 1 bit when beta >= delta, else 2; unquantized layers
// report 32. Baseline modes have fixed depths (BC/BWN 1, TWN 2).
std::vector<int> decide_depths(Model& model, double depth_delta);
std::string format_depth_string(const std::vector<int>& depths);

// sum(#W_l * 32) / sum(#W_l * n_l) over weight layers.
double compression_ratio(Model& model, const std::vector<int>& depths);

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;
};

// Standard Adam with bias correction; weight_decay adds wd*w to the gradient
// of ParamKind::Weight entries only.
void adam_step(std::vector<ParamRef>& params, AdamState& state, float lr, float weight_decay);

// Top-1 accuracy, evaluation mode (no taping, running batchnorm statistics).
double evaluate(Model& model, const Dataset& ds, int batch_size);

// Accuracy with every quantized layer's weights replaced by its exported
// codes times scales (the numbers a decoded model file computes with).
double evaluate_exported(Model& model, const Dataset& ds, int batch_size,
                         const std::vector<int>& depths);

[[noreturn]] void throw_divergence(int epoch, int batch, double loss);

TrainingReport train_model(Model& model, const Dataset& train, const Dataset& test,
                           const TrainConfig& cfg);

}  // namespace stq
