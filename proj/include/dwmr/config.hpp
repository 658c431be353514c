#pragma once

// Flat dotted-key JSON configuration. Every key has a default; unknown keys
// are rejected. Keys whose default depends on the benchmark ("auto") are
// resolved after all files/overrides are merged.

#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmr/common.hpp"

namespace dwmr {

class Config {
 public:
  Config() : values_(documented_defaults()) {}

  static nlohmann::json documented_defaults() {
    nlohmann::json d;
    d["benchmark"] = "puzzle";          // puzzle | iceslider
    d["family"] = "dwmr";               // dwmr | ae | bvae | deepcubeai | dwmr_ae | dwmr_bvae
    d["variant"] = "two_step";          // two_step | fully_differentiable | straight_through
    d["seed"] = 0;
    d["epochs"] = "auto";               // 40 puzzle / 20 iceslider
    d["batch_size"] = 256;
    d["k"] = "auto";                    // 64 puzzle / 192 iceslider
    d["lr.encoder"] = 1e-3;
    d["lr.predictor"] = 1e-3;
    d["lr.decoder"] = 1e-3;
    d["tau"] = 0.9;
    d["loss.lambda_var"] = 25.0;
    d["loss.lambda_cor"] = 5.0;
    d["loss.lambda_cos"] = 5.0;
    d["loss.lambda_loc"] = 1.0;
    d["loss.lambda_rec"] = 10.0;
    d["loss.lambda_kl"] = 1.0;
    d["loss.gamma"] = 0.45;
    d["loss.window_l"] = 1;
    d["loss.window_u"] = 6;
    d["loss.cos_sample_triplets"] = "auto";  // 0 = full contraction; 20000 on iceslider
    d["loss.two_step_b_input"] = "soft";     // soft | straight_through
    d["loss.bvae_temperature"] = 1.0;
    d["schedule.lr_enc"] = 1.0;
    d["schedule.lr_pred"] = 1.0;
    d["schedule.lr_dec"] = 1.0;
    d["schedule.tau"] = 1.0;
    d["schedule.lambda_var"] = 1.0;
    d["schedule.lambda_cor"] = 1.0;
    d["schedule.lambda_cos"] = 1.0;
    d["schedule.lambda_loc"] = 1.0;
    d["schedule.lambda_rec"] = 1.0;
    d["schedule.lambda_kl"] = 1.0;
    d["model.enc_widths"] = {16, 32, 32, 64, 64};
    d["model.enc_hidden"] = 96;
    d["model.pred_hidden"] = 128;
    d["model.pred_channels"] = 32;
    d["model.groups"] = 4;
    d["data.dir"] = "";                 // empty: --data flag, then DWMR_DATA_DIR, then ./data
    d["data.noisy"] = false;
    d["data.noise_std"] = 0.5;
    d["data.noise_as_variance"] = false;  // read the 0.5 as a variance instead
    d["data.puzzle_traj_len"] = 100;
    d["data.digit_source"] = "auto";    // auto | idx | synthetic
    d["data.synthetic_pool"] = 200;
    d["data.idx_images"] = "train-images-idx3-ubyte";
    d["data.idx_labels"] = "train-labels-idx1-ubyte";
    d["data.train_size"] = "auto";      // 30000 / 40000
    d["data.val_size"] = "auto";        // 6000 / 10000
    d["data.test_size"] = "auto";       // 6000 / 10000
    d["probe.epochs"] = 15;
    d["probe.lr"] = 0.01;
    d["probe.weight_decay"] = 0.001;
    d["probe.batch_size"] = 256;
    d["eval.split"] = "test";           // test | val
    d["eval.checkpoint"] = "";          // empty: newest ckpt_epochNNN.bin under --out
    d["train.resume"] = "";             // checkpoint to continue from
    d["train.metrics_per_step"] = false;
    d["train.checkpoint_every"] = 1;
    d["train.ema_identity"] = false;    // ablation: copy the target from the encoder each step
    d["ablate.component"] = "";         // var | cor | cos | loc | ema
    d["sweep.budget"] = 24;
    d["sweep.final_seeds"] = 10;
    d["report.families"] = {"dwmr", "dwmr_ae", "dwmr_bvae", "ae", "bvae", "deepcubeai"};
    return d;
  }

  void apply_json(const nlohmann::json& j, const std::string& origin) {
    if (!j.is_object()) throw ConfigError(cat(origin, ": config must be a JSON object"));
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!values_.contains(it.key()))
        throw ConfigError(cat(origin, ": unknown config key '", it.key(), "'"));
      values_[it.key()] = it.value();
    }
  }

  void apply_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(cat("cannot open config file ", path));
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError(cat(path, " is not valid JSON"));
    apply_json(j, path);
  }

  // --set key=value; the value is parsed as JSON when possible, else a string
  void apply_override(const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(cat("--set expects key=value, got '", kv, "'"));
    const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
    nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
    if (v.is_discarded()) v = raw;
    nlohmann::json patch;
    patch[key] = v;
    apply_json(patch, "--set");
  }

  // pins the benchmark-dependent "auto" defaults, then validates
  void finalize() {
    const std::string bench = str("benchmark");
    if (bench != "puzzle" && bench != "iceslider")
      throw ConfigError(cat("benchmark must be puzzle or iceslider, got '", bench, "'"));
    const bool puzzle = bench == "puzzle";
    auto fill = [&](const char* key, int value) {
      if (values_[key].is_string() && values_[key] == "auto") values_[key] = value;
    };
    fill("epochs", puzzle ? 40 : 20);
    fill("k", puzzle ? 64 : 192);
    fill("loss.cos_sample_triplets", puzzle ? 0 : 20000);
    fill("data.train_size", puzzle ? 30000 : 40000);
    fill("data.val_size", puzzle ? 6000 : 10000);
    fill("data.test_size", puzzle ? 6000 : 10000);
    validate();
  }

  bool has_auto(const std::string& key) const {
    return values_.at(key).is_string() && values_.at(key) == "auto";
  }

  double num(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_number()) throw ConfigError(cat("config key '", key, "' must be a number"));
    return v.get<double>();
  }
  int integer(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_number_integer()) throw ConfigError(cat("config key '", key, "' must be an integer"));
    return v.get<int>();
  }
  std::string str(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_string()) throw ConfigError(cat("config key '", key, "' must be a string"));
    return v.get<std::string>();
  }
  bool boolean(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_boolean()) throw ConfigError(cat("config key '", key, "' must be a boolean"));
    return v.get<bool>();
  }
  std::vector<std::string> str_list(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_array()) throw ConfigError(cat("config key '", key, "' must be an array"));
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(cat("config key '", key, "' must hold strings"));
      out.push_back(e.get<std::string>());
    }
    return out;
  }
  std::vector<int> int_list(const std::string& key) const {
    const auto& v = values_.at(key);
    if (!v.is_array()) throw ConfigError(cat("config key '", key, "' must be an array"));
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer())
        throw ConfigError(cat("config key '", key, "' must hold integers"));
      out.push_back(e.get<int>());
    }
    return out;
  }
  void set(const std::string& key, const nlohmann::json& v) {
    if (!values_.contains(key)) throw ConfigError(cat("unknown config key '", key, "'"));
    values_[key] = v;
  }
  const nlohmann::json& json() const { return values_; }

  // dataset root: explicit config, then DWMR_DATA_DIR, then ./data
  std::string data_dir() const {
    std::string dir = str("data.dir");
    if (!dir.empty()) return dir;
    if (const char* env = std::getenv("DWMR_DATA_DIR")) return env;
    return "data";
  }

 private:
  void require(bool ok, const std::string& msg) const {
    if (!ok) throw ConfigError(msg);
  }

  void validate() const {
    const std::string family = str("family");
    require(family == "dwmr" || family == "ae" || family == "bvae" || family == "deepcubeai" ||
                family == "dwmr_ae" || family == "dwmr_bvae",
            cat("unknown model family '", family, "'"));
    const std::string variant = str("variant");
    require(variant == "two_step" || variant == "fully_differentiable" ||
                variant == "straight_through",
            cat("unknown training variant '", variant, "'"));
    const std::string b_input = str("loss.two_step_b_input");
    require(b_input == "soft" || b_input == "straight_through",
            cat("loss.two_step_b_input must be soft or straight_through, got '", b_input, "'"));
    require(integer("batch_size") >= 2, "batch_size must be at least 2");
    const double tau = num("tau");
    require(tau > 0.0 && tau < 1.0, cat("tau must lie in (0,1), got ", tau));
    const double gamma = num("loss.gamma");
    require(gamma > 0.0 && gamma <= 0.5, cat("loss.gamma must lie in (0, 0.5], got ", gamma));
    for (const char* key : {"loss.lambda_var", "loss.lambda_cor", "loss.lambda_cos",
                            "loss.lambda_loc", "loss.lambda_rec", "loss.lambda_kl"})
      require(num(key) >= 0.0, cat(key, " must be non-negative"));
    const int k = integer("k"), L = integer("loss.window_l"), U = integer("loss.window_u");
    require(1 <= L && L <= U && U <= k,
            cat("locality window needs 1 <= L <= U <= K, got L=", L, " U=", U, " K=", k));
    for (const char* key :
         {"schedule.lr_enc", "schedule.lr_pred", "schedule.lr_dec", "schedule.tau",
          "schedule.lambda_var", "schedule.lambda_cor", "schedule.lambda_cos",
          "schedule.lambda_loc", "schedule.lambda_rec", "schedule.lambda_kl"}) {
      const double f = num(key);
      require(f >= 0.9 && f <= 1.1, cat(key, " must lie in [0.9, 1.1], got ", f));
    }
    for (const char* key : {"epochs", "data.train_size", "data.val_size", "data.test_size"})
      require(integer(key) > 0, cat(key, " must be positive"));
    const std::string split = str("eval.split");
    require(split == "test" || split == "val",
            cat("eval.split must be test or val, got '", split, "'"));
    const std::string digits = str("data.digit_source");
    require(digits == "auto" || digits == "idx" || digits == "synthetic",
            cat("data.digit_source must be auto, idx or synthetic, got '", digits, "'"));
    const std::string component = str("ablate.component");
    require(component.empty() || component == "var" || component == "cor" || component == "cos" ||
                component == "loc" || component == "ema",
            cat("ablate.component must be one of var, cor, cos, loc, ema; got '", component, "'"));
  }

  nlohmann::json values_;
};

}  // namespace dwmr
