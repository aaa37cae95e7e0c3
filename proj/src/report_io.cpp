// SPDX-License-Identifier: Apache-2.0
#include "stq/report_io.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace stq {

namespace {

using nlohmann::json;

json histogram_to_json(const LayerHistogram& h) {
  return json{{"layer", h.layer}, {"epoch", h.epoch}, {"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing artifact: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_histogram_csvs(const TrainingReport& r, const std::string& run_dir) {
  for (const LayerHistogram& h : r.histograms) {
    double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
    std::ostringstream os;
    os << "bin_left,bin_right,count\n";
    for (size_t b = 0; b < h.counts.size(); ++b)
      os << h.lo + width * static_cast<double>(b) << "," << h.lo + width * static_cast<double>(b + 1) << ","
         << h.counts[b] << "\n";
    write_text(run_dir + "/hist_layer" + std::to_string(h.layer) + "_epoch" + std::to_string(h.epoch) + ".csv",
               os.str());
  }
}

}  // namespace

std::string report_to_json(const TrainingReport& r) {
  json j;
  j["model"] = r.model_name;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["depths"] = r.depths;
  j["depth_string"] = r.depth_string;
  j["compression_ratio"] = r.compression;
  j["best_val_acc"] = r.best_val_acc;
  j["final_acc"] = r.final_acc;
  j["epochs"] = json::array();
  for (const EpochStats& e : r.epochs)
    j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_acc", e.val_acc}, {"lr", e.lr}});
  j["beta_by_epoch"] = r.beta_by_epoch;
  j["histograms"] = json::array();
  for (const LayerHistogram& h : r.histograms) j["histograms"].push_back(histogram_to_json(h));
  j["layers"] = json::array();
  for (const LayerSummary& s : r.layer_summaries)
    j["layers"].push_back({{"kind", s.kind},
                           {"weights", s.weights},
                           {"depth", s.depth},
                           {"beta", s.beta},
                           {"mu_mean", s.mu_mean},
                           {"mu_min", s.mu_min},
                           {"mu_max", s.mu_max},
                           {"zero_fraction", s.zero_fraction}});
  return j.dump(2);
}

TrainingReport report_from_json(const std::string& text) {
  json j = json::parse(text);
  TrainingReport r;
  r.model_name = j.at("model").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.depths = j.at("depths").get<std::vector<int>>();
  r.depth_string = j.at("depth_string").get<std::string>();
  r.compression = j.at("compression_ratio").get<double>();
  r.best_val_acc = j.at("best_val_acc").get<double>();
  r.final_acc = j.at("final_acc").get<double>();
  for (const json& e : j.at("epochs"))
    r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_acc").get<double>(),
                        e.at("lr").get<double>()});
  r.beta_by_epoch = j.at("beta_by_epoch").get<std::vector<std::vector<double>>>();
  for (const json& h : j.at("histograms")) {
    LayerHistogram lh;
    lh.layer = h.at("layer").get<int>();
    lh.epoch = h.at("epoch").get<int>();
    lh.lo = h.at("lo").get<double>();
    lh.hi = h.at("hi").get<double>();
    lh.counts = h.at("counts").get<std::vector<int64_t>>();
    r.histograms.push_back(std::move(lh));
  }
  for (const json& s : j.at("layers")) {
    LayerSummary ls;
    ls.kind = s.at("kind").get<std::string>();
    ls.weights = s.at("weights").get<int64_t>();
    ls.depth = s.at("depth").get<int>();
    ls.beta = s.at("beta").get<double>();
    ls.mu_mean = s.at("mu_mean").get<double>();
    ls.mu_min = s.at("mu_min").get<double>();
    ls.mu_max = s.at("mu_max").get<double>();
    ls.zero_fraction = s.at("zero_fraction").get<double>();
    r.layer_summaries.push_back(std::move(ls));
  }
  return r;
}

void write_report_files(const TrainingReport& r, const std::string& run_dir) {
  std::filesystem::create_directories(run_dir);
  write_text(run_dir + "/report.json", report_to_json(r));

  std::ostringstream metrics;
  metrics << "epoch,train_loss,val_acc,lr\n";
  for (const EpochStats& e : r.epochs)
    metrics << e.epoch << "," << e.train_loss << "," << e.val_acc << "," << e.lr << "\n";
  write_text(run_dir + "/metrics.csv", metrics.str());

  std::ostringstream beta;
  beta << "epoch";
  for (size_t l = 0; r.beta_by_epoch.size() && l < r.beta_by_epoch[0].size(); ++l) beta << ",beta_layer" << l;
  beta << "\n";
  for (size_t e = 0; e < r.beta_by_epoch.size(); ++e) {
    beta << e;
    for (double b : r.beta_by_epoch[e]) beta << "," << b;
    beta << "\n";
  }
  write_text(run_dir + "/beta_trajectory.csv", beta.str());

  write_histogram_csvs(r, run_dir);
}

void write_report_summaries(const std::string& run_dir) {
  TrainingReport r = report_from_json(read_text(run_dir + "/report.json"));
  std::ostringstream os;
  os << "layer,kind,weights,beta,depth,mu_mean,mu_min,mu_max,zero_fraction\n";
  for (size_t i = 0; i < r.layer_summaries.size(); ++i) {
    const LayerSummary& s = r.layer_summaries[i];
    os << i << "," << s.kind << "," << s.weights << "," << s.beta << "," << s.depth << "," << s.mu_mean << ","
       << s.mu_min << "," << s.mu_max << "," << s.zero_fraction << "\n";
  }
  write_text(run_dir + "/summary.csv", os.str());
  write_histogram_csvs(r, run_dir);
}

}  // namespace stq
