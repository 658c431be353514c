#include <catch2/catch.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dwmr/checkpoint.hpp"
#include "dwmr/dataset.hpp"
#include "dwmr/mnist.hpp"
#include "dwmr/trainer.hpp"

using namespace dwmr;
using Catch::Matchers::Contains;

namespace {

const DigitSource& test_digits() {
  static DigitSource src = [] {
    Rng rng(123);
    return synth_glyph_source(rng, 8);
  }();
  return src;
}

const Dataset& puzzle16() {
  static Dataset ds = build_split("puzzle", 16, 5, false, 0.5, &test_digits(), 8);
  return ds;
}

const Dataset& puzzle9() {
  static Dataset ds = build_split("puzzle", 9, 11, false, 0.5, &test_digits(), 9);
  return ds;
}

const Dataset& ice4() {
  static Dataset ds = build_split("iceslider", 4, 3, false, 0.5, nullptr, 8);
  return ds;
}

// small model so each step costs microseconds, not seconds
TrainSettings tiny_settings(const std::string& family, const std::string& variant) {
  TrainSettings s;
  s.benchmark = "puzzle";
  s.family = family;
  s.variant = variant;
  s.seed = 7;
  s.epochs = 2;
  s.batch_size = 8;
  s.k = 16;
  s.model.benchmark = "puzzle";
  s.model.k = 16;
  s.model.enc_widths = {4, 4, 6, 6, 8};
  s.model.enc_hidden = 16;
  s.model.pred_hidden = 16;
  s.model.groups = 2;
  s.model.with_decoder = s.needs_decoder();
  return s;
}

std::string fresh_dir(const std::string& leaf) {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "dwmr_trainer_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(bool(is));
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(bool(is));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

std::vector<double> csv_row(const std::string& line) {
  std::vector<double> vals;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
  return vals;
}

// metrics column indices
enum {
  kColEpoch = 0,
  kColStep = 1,
  kColTotal = 2,
  kColPred = 3,
  kColVar = 4,
  kColCor = 5,
  kColCos = 6,
  kColLoc = 7,
  kColRec = 8,
  kColKl = 9,
  kColLrEnc = 13,
  kColLrPred = 14,
  kColTau = 15,
};

std::vector<float> flat(std::vector<NamedTensor<float>> params) {
  std::vector<float> out;
  for (auto& np : params)
    out.insert(out.end(), np.tensor.data().begin(), np.tensor.data().end());
  return out;
}

std::vector<int> batch_indices(int lo, int hi) {
  std::vector<int> idx;
  for (int i = lo; i < hi; ++i) idx.push_back(i);
  return idx;
}

bool has_array_prefix(const std::vector<NamedTensor<float>>& arrays, const std::string& prefix) {
  for (const auto& np : arrays)
    if (np.name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("two-step batches freeze the encoder in the predictor step and step twice") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  Trainer<float> t(s, puzzle16());
  const ScheduledValues h = s.at_epoch(0);

  // one un-instrumented batch so online and target encoders drift apart
  t.run_batch(batch_indices(8, 16), h);

  // widen the gap so the contraction check is far above float rounding
  for (auto& np : t.model().target_params())
    for (auto& v : np.tensor.data()) v += 0.5f;

  const std::vector<float> phi0 = flat(t.model().encoder_params());
  const std::vector<float> psi0 = flat(t.model().predictor_params());
  const std::vector<float> ema0 = flat(t.model().target_params());

  std::string events;
  std::vector<float> phi_a, psi_a, ema_a, phi_b, psi_b, ema_b;
  t.sub_step_hook = [&](char tag) {
    events.push_back(tag);
    if (tag == 'a') {
      phi_a = flat(t.model().encoder_params());
      psi_a = flat(t.model().predictor_params());
      ema_a = flat(t.model().target_params());
    } else {
      phi_b = flat(t.model().encoder_params());
      psi_b = flat(t.model().predictor_params());
      ema_b = flat(t.model().target_params());
    }
  };
  t.run_batch(batch_indices(0, 8), h);

  REQUIRE(events == "ab");

  // predictor-only sub-step: encoder bit-identical, predictor moved
  REQUIRE(phi_a == phi0);
  REQUIRE(psi_a != psi0);

  // joint sub-step moves both
  REQUIRE(phi_b != phi0);
  REQUIRE(psi_b != psi_a);

  // target blends toward the online encoder after every optimizer step
  const double tau = h.tau;
  double gap_before = 0, gap_after = 0;
  for (size_t i = 0; i < phi0.size(); ++i) {
    const double expect = tau * double(ema0[i]) + (1 - tau) * double(phi0[i]);
    REQUIRE(double(ema_a[i]) == Approx(expect).epsilon(1e-6).margin(1e-9));
    gap_before += std::abs(double(ema0[i]) - double(phi0[i]));
    gap_after += std::abs(double(ema_a[i]) - double(phi0[i]));
  }
  REQUIRE(gap_after == Approx(tau * gap_before).epsilon(1e-6));
  for (size_t i = 0; i < phi0.size(); ++i) {
    const double expect = tau * double(ema_a[i]) + (1 - tau) * double(phi_b[i]);
    REQUIRE(double(ema_b[i]) == Approx(expect).epsilon(1e-6).margin(1e-9));
  }

  // two Adam invocations per batch: predictor counts both, encoder only the joint one
  const std::string probe = fresh_dir("two_step_counters") + "/probe.bin";
  t.save(probe);
  const auto arrays = load_checkpoint<float>(probe);
  bool found = false;
  for (const auto& np : arrays) {
    if (np.name != "meta.state") continue;
    found = true;
    REQUIRE(np.tensor.data()[1] == 2.0f);  // encoder steps across 2 batches
    REQUIRE(np.tensor.data()[2] == 4.0f);  // predictor steps
  }
  REQUIRE(found);
}

TEST_CASE("single-step variants take one optimizer step and reach the encoder") {
  for (const std::string variant : {"fully_differentiable", "straight_through"}) {
    TrainSettings s = tiny_settings("dwmr", variant);
    Trainer<float> t(s, puzzle16());
    const std::vector<float> phi0 = flat(t.model().encoder_params());
    const std::vector<float> psi0 = flat(t.model().predictor_params());
    std::string events;
    t.sub_step_hook = [&](char tag) { events.push_back(tag); };
    t.run_batch(batch_indices(0, 8), s.at_epoch(0));
    INFO(variant);
    REQUIRE(events == "j");
    REQUIRE(flat(t.model().encoder_params()) != phi0);
    REQUIRE(flat(t.model().predictor_params()) != psi0);
  }
}

TEST_CASE("identity-target ablation pins the target to the online encoder") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  s.ema_identity = true;
  Trainer<float> t(s, puzzle16());
  t.run_batch(batch_indices(0, 8), s.at_epoch(0));
  REQUIRE(flat(t.model().target_params()) == flat(t.model().encoder_params()));
}

TEST_CASE("identical config and seed reproduce metrics and checkpoints byte for byte") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  const std::string dir_a = fresh_dir("det_a");
  const std::string dir_b = fresh_dir("det_b");
  Trainer<float>(s, puzzle16()).train(dir_a);
  Trainer<float>(s, puzzle16()).train(dir_b);

  REQUIRE(file_bytes(dir_a + "/metrics.csv") == file_bytes(dir_b + "/metrics.csv"));
  REQUIRE(file_bytes(dir_a + "/ckpt_epoch000.bin") ==
          file_bytes(dir_b + "/ckpt_epoch000.bin"));
  REQUIRE(file_bytes(dir_a + "/ckpt_epoch001.bin") ==
          file_bytes(dir_b + "/ckpt_epoch001.bin"));

  TrainSettings s2 = s;
  s2.seed = 8;
  const std::string dir_c = fresh_dir("det_c");
  Trainer<float>(s2, puzzle16()).train(dir_c);
  REQUIRE(file_bytes(dir_a + "/metrics.csv") != file_bytes(dir_c + "/metrics.csv"));
}

TEST_CASE("resuming a checkpoint continues counters and matches the straight run") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  s.epochs = 4;

  const std::string dir_a = fresh_dir("resume_straight");
  Trainer<float>(s, puzzle16()).train(dir_a);

  const std::string dir_b = fresh_dir("resume_split");
  TrainSettings first = s;
  first.epochs = 2;
  Trainer<float>(first, puzzle16()).train(dir_b);

  TrainSettings second = s;
  second.resume = dir_b + "/ckpt_epoch001.bin";
  Trainer<float> t2(second, puzzle16());
  REQUIRE(t2.epochs_done() == 2);
  t2.train(dir_b);

  REQUIRE(file_bytes(dir_a + "/metrics.csv") == file_bytes(dir_b + "/metrics.csv"));
  REQUIRE(file_bytes(dir_a + "/ckpt_epoch003.bin") ==
          file_bytes(dir_b + "/ckpt_epoch003.bin"));
}

TEST_CASE("hyperparameter schedules follow base times factor to the epoch") {
  TrainSettings s = tiny_settings("dwmr", "fully_differentiable");
  s.epochs = 4;
  s.lr_enc = 1e-3;
  s.f_lr_enc = 0.95;
  s.lr_pred = 2e-3;
  s.f_lr_pred = 1.05;
  s.tau = 0.95;
  s.f_tau = 1.1;  // clamps almost immediately
  const std::string dir = fresh_dir("schedules");
  Trainer<float>(s, puzzle16()).train(dir);

  const auto lines = read_lines(dir + "/metrics.csv");
  REQUIRE(lines.size() == 5);
  REQUIRE(lines[0] ==
          "epoch,step,loss_total,loss_pred,loss_var,loss_cor,loss_cos,loss_loc,"
          "loss_rec,loss_kl,mean_bit,mean_bit_std,mean_flips,lr_enc,lr_pred,tau");
  for (int e = 0; e < 4; ++e) {
    const auto row = csv_row(lines[size_t(e) + 1]);
    REQUIRE(row.size() == 16);
    REQUIRE(row[kColEpoch] == double(e));
    REQUIRE(row[kColStep] == double(2 * (e + 1)));  // 16 records / batch 8
    REQUIRE(row[kColLrEnc] == Approx(1e-3 * std::pow(0.95, e)).epsilon(1e-6));
    REQUIRE(row[kColLrPred] == Approx(2e-3 * std::pow(1.05, e)).epsilon(1e-6));
    const double tau = std::min(0.95 * std::pow(1.1, e), 0.9999);
    REQUIRE(row[kColTau] == Approx(tau).epsilon(1e-6));
  }
}

TEST_CASE("per-step metric rows interleave with the epoch summary") {
  TrainSettings s = tiny_settings("dwmr", "fully_differentiable");
  s.epochs = 1;
  s.metrics_per_step = true;
  const std::string dir = fresh_dir("per_step");
  Trainer<float>(s, puzzle16()).train(dir);

  const auto lines = read_lines(dir + "/metrics.csv");
  REQUIRE(lines.size() == 4);  // header, 2 step rows, epoch summary
  REQUIRE(csv_row(lines[1])[kColStep] == 1.0);
  REQUIRE(csv_row(lines[2])[kColStep] == 2.0);
  REQUIRE(csv_row(lines[3])[kColStep] == 2.0);
}

TEST_CASE("families log their own loss components and carry matching checkpoints") {
  auto run_family = [](const std::string& family) {
    TrainSettings s = tiny_settings(family, "fully_differentiable");
    s.epochs = 1;
    const std::string dir = fresh_dir("family_" + family);
    Trainer<float>(s, puzzle16()).train(dir);
    const auto lines = read_lines(dir + "/metrics.csv");
    REQUIRE(lines.size() == 2);
    return std::make_pair(csv_row(lines[1]), load_checkpoint<float>(dir + "/ckpt_epoch000.bin"));
  };

  SECTION("dwmr: regularizers only, no decoder anywhere") {
    const auto [row, arrays] = run_family("dwmr");
    REQUIRE(row[kColPred] > 0);
    REQUIRE(row[kColVar] > 0);
    REQUIRE(row[kColLoc] > 0);
    REQUIRE(row[kColRec] == 0.0);
    REQUIRE(row[kColKl] == 0.0);
    const double total = row[kColPred] + 25 * row[kColVar] + 5 * row[kColCor] +
                         5 * row[kColCos] + 1 * row[kColLoc];
    REQUIRE(row[kColTotal] == Approx(total).epsilon(1e-5));
    REQUIRE_FALSE(has_array_prefix(arrays, "dec."));
    REQUIRE_FALSE(has_array_prefix(arrays, "opt_dec."));
  }
  SECTION("ae: reconstruction only") {
    const auto [row, arrays] = run_family("ae");
    REQUIRE(row[kColRec] > 0);
    REQUIRE(row[kColVar] == 0.0);
    REQUIRE(row[kColCor] == 0.0);
    REQUIRE(row[kColCos] == 0.0);
    REQUIRE(row[kColLoc] == 0.0);
    REQUIRE(row[kColKl] == 0.0);
    REQUIRE(row[kColTotal] == Approx(row[kColPred] + 10 * row[kColRec]).epsilon(1e-5));
    REQUIRE(has_array_prefix(arrays, "dec."));
    REQUIRE(has_array_prefix(arrays, "opt_dec."));
  }
  SECTION("bvae: reconstruction plus a kl pull") {
    const auto [row, arrays] = run_family("bvae");
    REQUIRE(row[kColRec] > 0);
    REQUIRE(row[kColKl] > 0);
    REQUIRE(row[kColVar] == 0.0);
    REQUIRE(row[kColTotal] ==
            Approx(row[kColPred] + 10 * row[kColRec] + row[kColKl]).epsilon(1e-5));
    REQUIRE(has_array_prefix(arrays, "dec."));
  }
  SECTION("dwmr_ae: regularizers and reconstruction together") {
    const auto [row, arrays] = run_family("dwmr_ae");
    REQUIRE(row[kColVar] > 0);
    REQUIRE(row[kColRec] > 0);
    REQUIRE(row[kColKl] == 0.0);
    const double total = row[kColPred] + 25 * row[kColVar] + 5 * row[kColCor] +
                         5 * row[kColCos] + 1 * row[kColLoc] + 10 * row[kColRec];
    REQUIRE(row[kColTotal] == Approx(total).epsilon(1e-5));
    REQUIRE(has_array_prefix(arrays, "dec."));
  }
  SECTION("dwmr_bvae: everything at once") {
    const auto [row, arrays] = run_family("dwmr_bvae");
    REQUIRE(row[kColVar] > 0);
    REQUIRE(row[kColRec] > 0);
    REQUIRE(row[kColKl] > 0);
    REQUIRE(has_array_prefix(arrays, "dec."));
  }
  SECTION("deepcubeai: rounded-input prediction plus reconstruction") {
    const auto [row, arrays] = run_family("deepcubeai");
    REQUIRE(row[kColPred] > 0);
    REQUIRE(row[kColRec] > 0);
    REQUIRE(row[kColVar] == 0.0);
    REQUIRE(row[kColKl] == 0.0);
    REQUIRE(row[kColTotal] == Approx(row[kColPred] + 10 * row[kColRec]).epsilon(1e-5));
    REQUIRE(has_array_prefix(arrays, "dec."));
  }
}

TEST_CASE("zero regularizer weights reduce the objective to the prediction loss") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  s.epochs = 1;
  s.l_var = s.l_cor = s.l_cos = s.l_loc = 0;
  const std::string dir = fresh_dir("zero_weights");
  Trainer<float>(s, puzzle16()).train(dir);
  const auto row = csv_row(read_lines(dir + "/metrics.csv")[1]);
  REQUIRE(row[kColTotal] == row[kColPred]);
  REQUIRE(row[kColVar] == 0.0);
  REQUIRE(row[kColLoc] == 0.0);
}

TEST_CASE("trailing batches below two rows are skipped") {
  TrainSettings s = tiny_settings("dwmr", "fully_differentiable");
  s.epochs = 2;  // 9 records, batch 8: the single-row leftover never trains
  const std::string dir = fresh_dir("tiny_tail");
  Trainer<float>(s, puzzle9()).train(dir);
  const auto lines = read_lines(dir + "/metrics.csv");
  REQUIRE(lines.size() == 3);
  REQUIRE(csv_row(lines[1])[kColStep] == 1.0);
  REQUIRE(csv_row(lines[2])[kColStep] == 2.0);
}

TEST_CASE("the trainer rejects a dataset built for another benchmark") {
  const TrainSettings s = tiny_settings("dwmr", "two_step");
  REQUIRE_THROWS_WITH(Trainer<float>(s, ice4()), Contains("does not match"));
}

TEST_CASE("checkpoints refuse to load into a mismatched model") {
  TrainSettings s = tiny_settings("dwmr", "two_step");
  const std::string path = fresh_dir("mismatch") + "/small.bin";
  Trainer<float>(s, puzzle16()).save(path);

  SECTION("different latent width") {
    TrainSettings wide = s;
    wide.k = 24;
    wide.model.k = 24;
    wide.resume = path;
    REQUIRE_THROWS_WITH(Trainer<float>(wide, puzzle16()), Contains("shape mismatch"));
  }
  SECTION("different benchmark architecture") {
    TrainSettings ice = tiny_settings("dwmr", "two_step");
    ice.benchmark = "iceslider";
    ice.k = 192;
    ice.model = ModelConfig{};
    ice.model.benchmark = "iceslider";
    ice.model.k = 192;
    ice.resume = path;
    REQUIRE_THROWS_WITH(Trainer<float>(ice, ice4()), Contains("checkpoint"));
  }
}
