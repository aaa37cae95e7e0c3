// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "stq/trainer.hpp"

namespace stq {

// One run's configuration, parsed from a "key = value" text file
// ('#' starts a comment). Unknown keys are rejected; every key has a
// documented default, and the fully resolved set is echoed into the run
// directory.
struct RunSettings {
  std::string model = "lenet5";    // lenet5 | vgg7
  std::string mode = "stq";        // stq | bc | bwn | twn | fp
  std::string dataset = "mnist";   // mnist | cifar10
  std::string data_dir = "data";
  std::string out_dir = "runs";
  uint64_t seed = 1;
  int epochs = 60;
  int batch_size = 64;
  double lr = 0.01;
  std::string lr_drop_epochs = "15,30";  // comma list, may be empty
  double lr_drop_factor = 10.0;
  double weight_decay = 1e-4;  // applied in bc/bwn/twn modes only
  double lambda = 0.1;
  double gamma = 0.01;
  double delta = 1.55;  // depth decision threshold on beta
  double beta_min = kPi / 4 + 1e-3;
  double beta_max = kPi / 2 - 1e-3;
  std::string tie_policy = "scale";  // scale | slope
  bool gamma_per_layer = false;
  bool per_filter_mu = true;
  std::string clip_latent = "auto";  // auto (bc only) | on | off
  int train_subset = 0;              // 0 = full training split
  int eval_every = 1;
  std::string augment = "auto";  // auto (cifar10 only) | on | off
  std::string hist_epochs = "auto";  // auto | comma list of epoch indices
  int hist_bins = 81;
  double vgg_width_factor = 1.0;
};

RunSettings parse_run_config(const std::string& text);
RunSettings load_run_config(const std::string& path);

// Canonical echo; parsing it back reproduces the same settings.
std::string serialize_run_config(const RunSettings& s);

// FNV-1a of the canonical serialization, for run directory names.
uint64_t config_hash(const RunSettings& s);

TrainConfig to_train_config(const RunSettings& s);
ModelSpec to_model_spec(const RunSettings& s);
Shape dataset_input_shape(const std::string& dataset);

}  // namespace stq
