#pragma once

// Orchestration on top of the trainer and probes: dataset generation,
// train/eval runs, random-search sweeps with validation-imagination
// selection, the component ablations, and mean-±-std report tables.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmr/config.hpp"
#include "dwmr/dataset.hpp"
#include "dwmr/mnist.hpp"
#include "dwmr/probe.hpp"
#include "dwmr/trainer.hpp"

namespace dwmr {

inline std::string split_path(const std::string& dir, const std::string& split) {
  return dir + "/dataset_" + split + ".bin";
}

inline Dataset load_split(const std::string& dir, const std::string& split) {
  const std::string path = split_path(dir, split);
  check(std::filesystem::exists(path),
        cat("dataset file ", path, " not found; run gen-data first"));
  return read_dataset(path);
}

inline ProbeSettings probe_settings(const Config& c) {
  ProbeSettings ps;
  ps.epochs = c.integer("probe.epochs");
  ps.lr = c.num("probe.lr");
  ps.weight_decay = c.num("probe.weight_decay");
  ps.batch_size = c.integer("probe.batch_size");
  ps.seed = uint64_t(c.integer("seed"));
  return ps;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path);
  check(bool(os), cat("cannot write ", path));
  os << j.dump(2) << "\n";
}

// ---- gen-data ----

inline void generate_datasets(const Config& c, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string benchmark = c.str("benchmark");
  const uint64_t seed = uint64_t(c.integer("seed"));
  double noise_std = c.num("data.noise_std");
  if (c.boolean("data.noise_as_variance")) noise_std = std::sqrt(noise_std);

  DigitSource digits;
  const DigitSource* digits_ptr = nullptr;
  if (benchmark == "puzzle") {
    const std::string kind = c.str("data.digit_source");
    const std::string images = c.data_dir() + "/" + c.str("data.idx_images");
    const std::string labels = c.data_dir() + "/" + c.str("data.idx_labels");
    const bool idx_present = fs::exists(images) && fs::exists(labels);
    if (kind == "idx" || (kind == "auto" && idx_present)) {
      check(idx_present, cat("digit_source=idx but ", images, " or ", labels, " is missing"));
      digits = mnist_digit_source(images, labels);
    } else {
      Rng rng = Rng::child(seed, 0xD161Eull);
      digits = synth_glyph_source(rng, c.integer("data.synthetic_pool"));
    }
    digits_ptr = &digits;
  }

  SplitSet splits = build_splits(
      benchmark, c.boolean("data.noisy"), noise_std, {seed, seed + 1, seed + 2},
      {size_t(c.integer("data.train_size")), size_t(c.integer("data.val_size")),
       size_t(c.integer("data.test_size"))},
      digits_ptr, c.integer("data.puzzle_traj_len"));
  write_dataset(split_path(out_dir, "train"), splits.train);
  write_dataset(split_path(out_dir, "val"), splits.val);
  write_dataset(split_path(out_dir, "test"), splits.test);
}

// ---- train / eval ----

inline void run_train(const Config& c, const std::string& out_dir, const std::string& data_dir) {
  const Dataset train_ds = load_split(data_dir, "train");
  Trainer<float> trainer(TrainSettings::from_config(c), train_ds);
  std::filesystem::create_directories(out_dir);
  write_json_file(out_dir + "/config.json", c.json());
  trainer.train(out_dir);
}

inline std::string newest_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string best;
  if (fs::exists(dir))
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("ckpt_epoch", 0) == 0 && name.size() > 4 &&
          name.substr(name.size() - 4) == ".bin" && name > best)
        best = name;
    }
  check(!best.empty(), cat("no ckpt_epochNNN.bin found under ", dir));
  return dir + "/" + best;
}

// fits probes on the training split and writes eval_enc.json / eval_im.json
inline void run_eval(const Config& c, const std::string& out_dir, const std::string& data_dir) {
  const Dataset train_ds = load_split(data_dir, "train");
  const Dataset eval_ds = load_split(data_dir, c.str("eval.split"));
  Trainer<float> holder(TrainSettings::from_config(c), train_ds);
  std::string ckpt = c.str("eval.checkpoint");
  if (ckpt.empty()) ckpt = newest_checkpoint(out_dir);
  holder.restore(ckpt);

  LinearProbe<float> probe = fit_split_probe(holder.model(), train_ds, probe_settings(c));
  const EvalScores enc = eval_encoding(holder.model(), probe, eval_ds);
  const EvalScores im = eval_imagination(holder.model(), probe, eval_ds);
  const std::string family = c.str("family"), variant = c.str("variant");
  const uint64_t seed = uint64_t(c.integer("seed"));
  write_json_file(out_dir + "/eval_enc.json",
                  eval_report(eval_ds.benchmark, eval_ds.noisy, family, variant, seed, "encoding",
                              enc));
  write_json_file(out_dir + "/eval_im.json",
                  eval_report(eval_ds.benchmark, eval_ds.noisy, family, variant, seed,
                              "imagination", im));
}

// ---- sweep ----

// one random search point as dotted-key overrides
inline nlohmann::json sample_sweep_point(Rng& rng) {
  auto log_uniform = [&](double lo, double hi) { return std::exp(rng.uniform(std::log(lo), std::log(hi))); };
  nlohmann::json p;
  p["loss.lambda_var"] = log_uniform(5, 100);
  p["loss.lambda_cor"] = log_uniform(1, 25);
  p["loss.lambda_cos"] = log_uniform(1, 25);
  p["loss.lambda_loc"] = log_uniform(0.2, 5);
  p["loss.lambda_rec"] = log_uniform(1, 50);
  p["loss.lambda_kl"] = log_uniform(0.1, 10);
  p["lr.encoder"] = log_uniform(3e-4, 3e-3);
  p["lr.predictor"] = log_uniform(3e-4, 3e-3);
  p["tau"] = rng.uniform(0.8, 0.99);
  p["loss.gamma"] = rng.uniform(0.3, 0.5);
  const int l = 1 + int(rng.uniform_int(2));
  p["loss.window_l"] = l;
  p["loss.window_u"] = l + 2 + int(rng.uniform_int(5));
  p["schedule.lr_enc"] = rng.uniform(0.9, 1.0);
  p["schedule.lr_pred"] = rng.uniform(0.9, 1.0);
  p["schedule.tau"] = rng.uniform(0.98, 1.02);
  p["schedule.lambda_var"] = rng.uniform(0.95, 1.05);
  return p;
}

// trains, fits a validation probe, returns the validation imagination score
inline double validation_imagination(const Config& c, const std::string& run_dir,
                                     const Dataset& train_ds, const Dataset& val_ds) {
  Trainer<float> trainer(TrainSettings::from_config(c), train_ds);
  std::filesystem::create_directories(run_dir);
  write_json_file(run_dir + "/config.json", c.json());
  trainer.train(run_dir);
  LinearProbe<float> probe = fit_split_probe(trainer.model(), train_ds, probe_settings(c));
  return eval_imagination(trainer.model(), probe, val_ds).mean_f1;
}

// random search selected on validation imagination; the winner is retrained
// and evaluated on the test split across sweep.final_seeds seeds
inline void run_sweep(const Config& base, const std::string& out_dir,
                      const std::string& data_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const Dataset train_ds = load_split(data_dir, "train");
  const Dataset val_ds = load_split(data_dir, "val");
  const Dataset test_ds = load_split(data_dir, "test");

  const int budget = base.integer("sweep.budget");
  Rng rng = Rng::child(uint64_t(base.integer("seed")), 0x5EE9ull);
  nlohmann::json results = nlohmann::json::array();
  int best_index = -1;
  double best_score = -1;
  nlohmann::json best_point;
  for (int i = 0; i < budget; ++i) {
    const nlohmann::json point = sample_sweep_point(rng);
    Config c = base;
    c.apply_json(point, cat("sweep point ", i));
    c.finalize();
    char dirname[32];
    std::snprintf(dirname, sizeof dirname, "point_%02d", i);
    const double score =
        validation_imagination(c, out_dir + "/" + dirname, train_ds, val_ds);
    results.push_back({{"index", i}, {"overrides", point}, {"val_imagination_f1", score}});
    if (score > best_score) {
      best_score = score;
      best_index = i;
      best_point = point;
    }
  }

  // final verdict: retrain the winning point across seeds, score on test
  nlohmann::json finals = nlohmann::json::array();
  const int final_seeds = base.integer("sweep.final_seeds");
  for (int s = 0; s < final_seeds; ++s) {
    Config c = base;
    c.apply_json(best_point, "sweep winner");
    c.set("seed", s);
    c.finalize();
    char dirname[32];
    std::snprintf(dirname, sizeof dirname, "winner_seed%d", s);
    const std::string run_dir = out_dir + "/" + dirname;
    Trainer<float> trainer(TrainSettings::from_config(c), train_ds);
    fs::create_directories(run_dir);
    write_json_file(run_dir + "/config.json", c.json());
    trainer.train(run_dir);
    LinearProbe<float> probe = fit_split_probe(trainer.model(), train_ds, probe_settings(c));
    const EvalScores enc = eval_encoding(trainer.model(), probe, test_ds);
    const EvalScores im = eval_imagination(trainer.model(), probe, test_ds);
    const std::string family = c.str("family"), variant = c.str("variant");
    write_json_file(run_dir + "/eval_enc.json",
                    eval_report(test_ds.benchmark, test_ds.noisy, family, variant, uint64_t(s),
                                "encoding", enc));
    write_json_file(run_dir + "/eval_im.json",
                    eval_report(test_ds.benchmark, test_ds.noisy, family, variant, uint64_t(s),
                                "imagination", im));
    finals.push_back({{"seed", s}, {"test_encoding_f1", enc.mean_f1},
                      {"test_imagination_f1", im.mean_f1}});
  }
  write_json_file(out_dir + "/sweep.json",
                  {{"points", results},
                   {"winner", {{"index", best_index}, {"overrides", best_point},
                               {"val_imagination_f1", best_score}}},
                   {"final", finals}});
}

// ---- ablate ----

// one Table-3-style row: drop a loss term, or pin the target encoder to the
// online one (ema). Empty component runs the base plus all five.
inline void run_ablate(const Config& base, const std::string& out_dir,
                       const std::string& data_dir) {
  const Dataset train_ds = load_split(data_dir, "train");
  const Dataset eval_ds = load_split(data_dir, base.str("eval.split"));
  const std::string chosen = base.str("ablate.component");
  std::vector<std::string> components;
  if (chosen.empty()) components = {"base", "var", "cor", "cos", "loc", "ema"};
  else components = {chosen};

  for (const std::string& comp : components) {
    Config c = base;
    if (comp == "ema") c.set("train.ema_identity", true);
    else if (comp != "base") c.set(cat("loss.lambda_", comp), 0.0);
    c.finalize();
    const std::string run_dir = out_dir + "/ablate_" + comp;
    Trainer<float> trainer(TrainSettings::from_config(c), train_ds);
    std::filesystem::create_directories(run_dir);
    write_json_file(run_dir + "/config.json", c.json());
    trainer.train(run_dir);
    LinearProbe<float> probe = fit_split_probe(trainer.model(), train_ds, probe_settings(c));
    const EvalScores enc = eval_encoding(trainer.model(), probe, eval_ds);
    const EvalScores im = eval_imagination(trainer.model(), probe, eval_ds);
    const std::string family = cat(base.str("family"), comp == "base" ? "" : "-no_" + comp);
    const uint64_t seed = uint64_t(c.integer("seed"));
    write_json_file(run_dir + "/eval_enc.json",
                    eval_report(eval_ds.benchmark, eval_ds.noisy, family, c.str("variant"), seed,
                                "encoding", enc));
    write_json_file(run_dir + "/eval_im.json",
                    eval_report(eval_ds.benchmark, eval_ds.noisy, family, c.str("variant"), seed,
                                "imagination", im));
  }
}

// ---- report ----

namespace detail {

struct ReportKey {
  std::string benchmark, noise, family, variant;
  bool operator<(const ReportKey& o) const {
    return std::tie(benchmark, noise, family, variant) <
           std::tie(o.benchmark, o.noise, o.family, o.variant);
  }
};

inline std::string pad(const std::string& s, size_t w) {
  std::string out = s;
  while (out.size() < w) out += ' ';
  return out;
}

inline std::string mean_std_cell(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double sq = 0;
  for (double x : v) sq += (x - mean) * (x - mean);
  const double std_dev = v.size() > 1 ? std::sqrt(sq / double(v.size() - 1)) : 0.0;
  return cat(std::llround(mean), " ±", std::llround(std_dev));
}

}  // namespace detail

// aggregates every eval_*.json under `dir` into a mean ± std text table
inline std::string build_report_table(const std::string& dir,
                                      const std::vector<std::string>& family_order) {
  namespace fs = std::filesystem;
  std::map<detail::ReportKey, std::map<std::string, std::vector<double>>> groups;
  check(fs::exists(dir), cat("report directory ", dir, " does not exist"));
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("eval_", 0) != 0 || entry.path().extension() != ".json") continue;
    std::ifstream is(entry.path());
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded() || !j.contains("mean_f1") || !j.contains("mode")) continue;
    detail::ReportKey key{j.value("benchmark", "?"), j.value("noise", "?"),
                          j.value("family", "?"), j.value("variant", "?")};
    groups[key][j["mode"].get<std::string>()].push_back(j["mean_f1"].get<double>());
  }
  check(!groups.empty(), cat("no eval_*.json reports found under ", dir));

  auto family_rank = [&](const std::string& f) {
    // declared families first, in order; others after, alphabetically
    for (size_t i = 0; i < family_order.size(); ++i) {
      if (f == family_order[i]) return int(i);
      // ablation rows like "dwmr-no_var" sort right after their base family
      if (f.rfind(family_order[i] + "-", 0) == 0) return int(i);
    }
    return int(family_order.size());
  };

  // sections by (benchmark, noise), rows ordered by the declared family list
  std::vector<detail::ReportKey> keys;
  for (const auto& g : groups) keys.push_back(g.first);
  std::stable_sort(keys.begin(), keys.end(), [&](const auto& a, const auto& b) {
    return std::tie(a.benchmark, a.noise) < std::tie(b.benchmark, b.noise) ||
           (a.benchmark == b.benchmark && a.noise == b.noise &&
            (family_rank(a.family) < family_rank(b.family) ||
             (family_rank(a.family) == family_rank(b.family) &&
              std::tie(a.family, a.variant) < std::tie(b.family, b.variant))));
  });

  std::string out;
  std::string section;
  for (const auto& key : keys) {
    const std::string header = cat("benchmark=", key.benchmark, " noise=", key.noise);
    if (header != section) {
      if (!section.empty()) out += "\n";
      section = header;
      out += header + "\n";
      out += cat(detail::pad("family", 28), detail::pad("encoding", 14), "imagination\n");
    }
    std::string label = key.family;
    if (key.variant != "two_step") label += ":" + key.variant;
    const auto& modes = groups[key];
    auto cell = [&](const char* mode) {
      auto it = modes.find(mode);
      return it == modes.end() ? std::string("-") : detail::mean_std_cell(it->second);
    };
    out += cat(detail::pad(label, 28), detail::pad(cell("encoding"), 14), cell("imagination"),
               "\n");
  }
  return out;
}

inline void run_report(const Config& c, const std::string& out_dir) {
  const std::string table = build_report_table(out_dir, c.str_list("report.families"));
  std::ofstream os(out_dir + "/table.txt");
  check(bool(os), cat("cannot write ", out_dir, "/table.txt"));
  os << table;
}

}  // namespace dwmr
