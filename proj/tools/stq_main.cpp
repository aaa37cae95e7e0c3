// SPDX-License-Identifier: Apache-2.0
//
// stq: train, evaluate and report on mixed binary/ternary quantized networks.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "stq/dataio.hpp"
#include "stq/packed_model.hpp"
#include "stq/report_io.hpp"
#include "stq/run_config.hpp"

namespace {

using namespace stq;

std::string timestamp_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

std::pair<Dataset, Dataset> load_dataset(const std::string& dataset, const std::string& dir) {
  if (dataset == "mnist") return load_mnist(dir);
  if (dataset == "cifar10") return load_cifar10(dir);
  throw std::runtime_error("unknown dataset '" + dataset + "'");
}

int cmd_train(const std::string& config_path, const std::optional<std::string>& data_dir,
              const std::optional<std::string>& out_dir, const std::optional<uint64_t>& seed) {
  RunSettings settings = load_run_config(config_path);
  if (data_dir) settings.data_dir = *data_dir;
  if (out_dir) settings.out_dir = *out_dir;
  if (seed) settings.seed = *seed;

  char hash_buf[20];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(config_hash(settings)));
  std::string run_dir = settings.out_dir + "/" + timestamp_now() + "-" + std::string(hash_buf).substr(0, 8);
  std::filesystem::create_directories(run_dir);
  std::cout << "run_dir: " << run_dir << "\n";

  {
    std::ofstream echo(run_dir + "/config_resolved.cfg");
    echo << serialize_run_config(settings);
  }

  auto [train, test] = load_dataset(settings.dataset, settings.data_dir);
  TrainConfig cfg = to_train_config(settings);
  ModelSpec spec = to_model_spec(settings);
  Rng init_rng = Rng(cfg.seed).fork(0);
  Model model = instantiate(spec, dataset_input_shape(settings.dataset), init_rng);

  TrainingReport report = train_model(model, train, test, cfg);
  report.model_name = settings.model;

  write_report_files(report, run_dir);
  PackedModel pm = pack_model(model, report.depths);
  write_packed_file(pm, run_dir + "/model.stqw");

  std::cout << "best_val_acc: " << report.best_val_acc << "\n";
  std::cout << "final_acc: " << report.final_acc << "\n";
  std::cout << "depth_string: " << report.depth_string << "\n";
  std::cout << "compression_ratio: " << report.compression << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, const std::string& split) {
  PackedModel pm = read_packed_file(model_path);
  Model model = unpack_to_model(pm);
  // The layer geometry implies the dataset: 1 input channel (or 784 input
  // features) is MNIST, 3 channels (or 3072 features) CIFAR-10.
  const Shape& first = pm.layers.at(0).shape;
  int64_t in_dim = first.size() == 4 ? first[1] : first[1];
  std::string dataset;
  if (first.size() == 4)
    dataset = in_dim == 1 ? "mnist" : "cifar10";
  else
    dataset = in_dim == 784 ? "mnist" : "cifar10";
  auto [train, test] = load_dataset(dataset, data_dir);
  const Dataset& ds = split == "train" ? train : test;
  double acc = evaluate(model, ds, 256);
  std::cout << "dataset: " << dataset << "\n";
  std::cout << "split: " << split << "\n";
  std::cout << "top1_accuracy: " << acc << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir) {
  write_report_summaries(run_dir);
  std::cout << "wrote " << run_dir << "/summary.csv and histogram CSVs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Smart ternary quantization toolkit"};
  app.require_subcommand(1);

  std::string config_path, model_path, split = "test", run_dir;
  std::optional<std::string> data_dir_opt, out_dir_opt;
  std::optional<uint64_t> seed_opt;
  std::string data_dir = "data";

  CLI::App* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "Run configuration file")->required();
  train->add_option("--data-dir", data_dir_opt, "Dataset directory (overrides config)");
  train->add_option("--out-dir", out_dir_opt, "Output base directory (overrides config)");
  train->add_option("--seed", seed_opt, "Random seed (overrides config)");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a packed model");
  eval->add_option("--model", model_path, "Packed model file")->required();
  eval->add_option("--data-dir", data_dir, "Dataset directory");
  eval->add_option("--split", split, "Dataset split (train|test)")
      ->check(CLI::IsMember({"train", "test"}));

  CLI::App* report = app.add_subcommand("report", "Regenerate summary tables from a run directory");
  report->add_option("--out-dir", run_dir, "Run directory containing report.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(config_path, data_dir_opt, out_dir_opt, seed_opt);
    if (eval->parsed()) return cmd_eval(model_path, data_dir, split);
    if (report->parsed()) return cmd_report(run_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
