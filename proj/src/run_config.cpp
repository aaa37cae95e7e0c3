// SPDX-License-Identifier: Apache-2.0
#include "stq/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stq {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return i;
  } catch (...) {
    throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

struct Field {
  std::function<void(RunSettings&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunSettings&)> get;
};

const std::map<std::string, Field>& schema() {
  static const std::map<std::string, Field> s = [] {
    std::map<std::string, Field> m;
    auto str = [&m](const char* key, std::string RunSettings::* f) {
      m[key] = {[f](RunSettings& r, const std::string&, const std::string& v) { r.*f = v; },
                [f](const RunSettings& r) { return r.*f; }};
    };
    auto num = [&m](const char* key, double RunSettings::* f) {
      m[key] = {[f](RunSettings& r, const std::string& k, const std::string& v) { r.*f = parse_double(k, v); },
                [f](const RunSettings& r) { return fmt_double(r.*f); }};
    };
    auto integer = [&m](const char* key, int RunSettings::* f) {
      m[key] = {[f](RunSettings& r, const std::string& k, const std::string& v) {
                  r.*f = static_cast<int>(parse_int(k, v));
                },
                [f](const RunSettings& r) { return std::to_string(r.*f); }};
    };
    auto boolean = [&m](const char* key, bool RunSettings::* f) {
      m[key] = {[f](RunSettings& r, const std::string& k, const std::string& v) { r.*f = parse_bool(k, v); },
                [f](const RunSettings& r) { return r.*f ? std::string("true") : std::string("false"); }};
    };
    str("model", &RunSettings::model);
    str("mode", &RunSettings::mode);
    str("dataset", &RunSettings::dataset);
    str("data_dir", &RunSettings::data_dir);
    str("out_dir", &RunSettings::out_dir);
    m["seed"] = {[](RunSettings& r, const std::string& k, const std::string& v) {
                   r.seed = static_cast<uint64_t>(parse_int(k, v));
                 },
                 [](const RunSettings& r) { return std::to_string(r.seed); }};
    integer("epochs", &RunSettings::epochs);
    integer("batch_size", &RunSettings::batch_size);
    num("lr", &RunSettings::lr);
    str("lr_drop_epochs", &RunSettings::lr_drop_epochs);
    num("lr_drop_factor", &RunSettings::lr_drop_factor);
    num("weight_decay", &RunSettings::weight_decay);
    num("lambda", &RunSettings::lambda);
    num("gamma", &RunSettings::gamma);
    num("delta", &RunSettings::delta);
    num("beta_min", &RunSettings::beta_min);
    num("beta_max", &RunSettings::beta_max);
    str("tie_policy", &RunSettings::tie_policy);
    boolean("gamma_per_layer", &RunSettings::gamma_per_layer);
    boolean("per_filter_mu", &RunSettings::per_filter_mu);
    str("clip_latent", &RunSettings::clip_latent);
    integer("train_subset", &RunSettings::train_subset);
    integer("eval_every", &RunSettings::eval_every);
    str("augment", &RunSettings::augment);
    str("hist_epochs", &RunSettings::hist_epochs);
    integer("hist_bins", &RunSettings::hist_bins);
    num("vgg_width_factor", &RunSettings::vgg_width_factor);
    return m;
  }();
  return s;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(parse_int(key, item)));
  }
  return out;
}

}  // namespace

RunSettings parse_run_config(const std::string& text) {
  RunSettings s;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) + " is not 'key = value': " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    auto it = schema().find(key);
    if (it == schema().end())
      throw std::invalid_argument("config: unknown key '" + key + "' on line " + std::to_string(line_no));
    it->second.set(s, key, value);
  }
  return s;
}

RunSettings load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string serialize_run_config(const RunSettings& s) {
  std::ostringstream os;
  for (const auto& [key, field] : schema()) os << key << " = " << field.get(s) << "\n";
  return os.str();
}

uint64_t config_hash(const RunSettings& s) {
  std::string text = serialize_run_config(s);
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

TrainConfig to_train_config(const RunSettings& s) {
  TrainConfig cfg;
  cfg.mode = parse_mode(s.mode);
  cfg.epochs = s.epochs;
  cfg.batch_size = s.batch_size;
  cfg.lr = static_cast<float>(s.lr);
  cfg.lr_drop_epochs = parse_int_list("lr_drop_epochs", s.lr_drop_epochs);
  cfg.lr_drop_factor = static_cast<float>(s.lr_drop_factor);
  cfg.weight_decay = static_cast<float>(s.weight_decay);
  cfg.reg.lambda = s.lambda;
  cfg.reg.gamma = s.gamma;
  cfg.reg.depth_delta = s.delta;
  cfg.reg.beta_min = s.beta_min;
  cfg.reg.beta_max = s.beta_max;
  if (s.tie_policy == "scale")
    cfg.reg.tie = TiePolicy::ScaleArm;
  else if (s.tie_policy == "slope")
    cfg.reg.tie = TiePolicy::SlopeArm;
  else
    throw std::invalid_argument("config: tie_policy must be scale or slope, got '" + s.tie_policy + "'");
  cfg.reg.gamma_per_layer = s.gamma_per_layer;
  cfg.seed = s.seed;
  if (s.clip_latent == "auto")
    cfg.clip_latent = true;  // takes effect in BC mode only
  else
    cfg.clip_latent = parse_bool("clip_latent", s.clip_latent);
  cfg.train_subset = s.train_subset;
  cfg.eval_every = s.eval_every;
  if (s.augment == "auto")
    cfg.augment = s.dataset == "cifar10";
  else
    cfg.augment = parse_bool("augment", s.augment);
  if (s.hist_epochs != "auto") cfg.hist_epochs = parse_int_list("hist_epochs", s.hist_epochs);
  cfg.hist_bins = s.hist_bins;
  return cfg;
}

ModelSpec to_model_spec(const RunSettings& s) {
  QuantMode mode = parse_mode(s.mode);
  ModelSpec spec;
  if (s.model == "lenet5") {
    spec = build_lenet5(mode);
  } else if (s.model == "vgg7") {
    Vgg7Options opt;
    opt.width_factor = s.vgg_width_factor;
    spec = build_vgg7(mode, opt);
  } else {
    throw std::invalid_argument("config: unknown model '" + s.model + "' (expected lenet5|vgg7)");
  }
  spec.per_filter_mu = s.per_filter_mu;
  return spec;
}

Shape dataset_input_shape(const std::string& dataset) {
  if (dataset == "mnist") return {1, 28, 28};
  if (dataset == "cifar10") return {3, 32, 32};
  throw std::invalid_argument("unknown dataset '" + dataset + "' (expected mnist|cifar10)");
}

}  // namespace stq
