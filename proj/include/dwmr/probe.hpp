#pragma once

// Linear probes over frozen hard-bit latents, and the encoding/imagination
// evaluation protocol: per-cell macro-F1 (absent classes excluded) and
// per-cell accuracy, reported in percent.
//
// Puzzle probe: one affine map from the K=64 bits to 9 cells x 9 classes.
// IceSlider probe: a 1x1 convolution from the 3x8x8 bit grid to 4 classes per
// cell, realized as a shared affine over the 3 channel bits of each cell.

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dwmr/adam.hpp"
#include "dwmr/dataset.hpp"
#include "dwmr/model.hpp"
#include "dwmr/nn.hpp"
#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

struct ProbeSettings {
  int epochs = 15;
  double lr = 0.01;
  double weight_decay = 0.001;
  int batch_size = 256;
  uint64_t seed = 0;
};

struct CellScore {
  double f1 = 0, acc = 0;  // percent
};

struct EvalScores {
  double mean_f1 = 0, mean_acc = 0;
  std::vector<CellScore> cells;
};

namespace detail {

template <typename T>
Tensor<T> obs_to_tensor(const Dataset& ds, const std::vector<int>& idx, bool next) {
  const size_t sz = ds.obs_size();
  Tensor<T> x = Tensor<T>::zeros({int(idx.size()), ds.obs_c, ds.obs_h, ds.obs_w});
  const std::vector<uint8_t>& src = next ? ds.next_obs : ds.obs;
  T* out = x.ptr();
  for (size_t i = 0; i < idx.size(); ++i) {
    const uint8_t* rec = src.data() + size_t(idx[i]) * sz;
    for (size_t j = 0; j < sz; ++j) out[i * sz + j] = T(rec[j]) / T(255);
  }
  return x;
}

inline std::vector<int> batch_range(size_t start, size_t stop) {
  std::vector<int> idx(stop - start);
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(start + i);
  return idx;
}

}  // namespace detail

// hard bits of the current observations, [count, K] row-major
template <typename T>
std::vector<float> encode_split_bits(ModelBundle<T>& model, const Dataset& ds,
                                     int batch_size = 256) {
  const int k = model.cfg.k;
  std::vector<float> bits(ds.count * size_t(k));
  for (size_t start = 0; start < ds.count; start += size_t(batch_size)) {
    const size_t stop = std::min(ds.count, start + size_t(batch_size));
    const auto idx = detail::batch_range(start, stop);
    Tape<T> tape;
    tape.recording = false;
    const Tensor<T> b = binarize(model.encode(tape, detail::obs_to_tensor<T>(ds, idx, false)));
    for (size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < k; ++c)
        bits[(start + i) * size_t(k) + c] = float(b.data()[i * size_t(k) + c]);
  }
  return bits;
}

// hard bits of the predicted next latents: r(predict(r(p), a)), [count, K]
template <typename T>
std::vector<float> imagine_split_bits(ModelBundle<T>& model, const Dataset& ds,
                                      int batch_size = 256) {
  const int k = model.cfg.k;
  std::vector<float> bits(ds.count * size_t(k));
  for (size_t start = 0; start < ds.count; start += size_t(batch_size)) {
    const size_t stop = std::min(ds.count, start + size_t(batch_size));
    const auto idx = detail::batch_range(start, stop);
    Tape<T> tape;
    tape.recording = false;
    const Tensor<T> b = binarize(model.encode(tape, detail::obs_to_tensor<T>(ds, idx, false)));
    std::vector<uint8_t> acts(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) acts[i] = ds.action[size_t(idx[i])];
    const Tensor<T> a = one_hot_actions<T>(acts);
    const Tensor<T> bhat = binarize(model.predict(tape, b, a, /*training=*/false));
    for (size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < k; ++c)
        bits[(start + i) * size_t(k) + c] = float(bhat.data()[i * size_t(k) + c]);
  }
  return bits;
}

template <typename T>
struct LinearProbe {
  std::string benchmark;
  int k = 0, cells = 0, classes = 0;
  AffineLayer<T> layer;  // the single linear stage

  static LinearProbe init(const std::string& benchmark, int k, Rng& rng) {
    LinearProbe p;
    p.benchmark = benchmark;
    p.k = k;
    if (benchmark == "puzzle") {
      p.cells = 9;
      p.classes = 9;
      p.layer = AffineLayer<T>::init(k, p.cells * p.classes, rng);
    } else {
      check(k == 192, "iceslider probe expects the 3x8x8 latent grid");
      p.cells = 64;
      p.classes = 4;
      p.layer = AffineLayer<T>::init(3, 4, rng);  // 1x1 conv over channel bits
    }
    return p;
  }

  // feature rows for the given records: puzzle [n, K]; ice [n*64, 3]
  Tensor<T> features(const std::vector<float>& bits, const std::vector<int>& idx) const {
    const int n = int(idx.size());
    if (benchmark == "puzzle") {
      Tensor<T> f = Tensor<T>::zeros({n, k});
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c)
          f.ptr()[size_t(i) * k + c] = T(bits[size_t(idx[i]) * k + c]);
      return f;
    }
    Tensor<T> f = Tensor<T>::zeros({n * 64, 3});
    for (int i = 0; i < n; ++i) {
      const float* row = bits.data() + size_t(idx[i]) * k;
      for (int cell = 0; cell < 64; ++cell)
        for (int c = 0; c < 3; ++c) f.ptr()[(size_t(i) * 64 + cell) * 3 + c] = T(row[c * 64 + cell]);
    }
    return f;
  }

  // [n*cells, classes] class-score rows, one row per (record, cell)
  Tensor<T> score_rows(Tape<T>& tape, const Tensor<T>& feat, int n) const {
    Tensor<T> out = layer(tape, feat);
    if (benchmark == "puzzle") return out.reshaped({n * cells, classes});
    return out;  // already one row per cell
  }

  std::vector<int> labels(const std::vector<uint8_t>& truth, const std::vector<int>& idx) const {
    std::vector<int> y(idx.size() * size_t(cells));
    for (size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < cells; ++c)
        y[i * size_t(cells) + c] = int(truth[size_t(idx[i]) * cells + c]);
    return y;
  }

  std::vector<NamedTensor<T>> params() {
    std::vector<NamedTensor<T>> out;
    layer.collect("probe", out);
    return out;
  }
};

// fits the probe on frozen latents with softmax cross-entropy
template <typename T>
void fit_probe(LinearProbe<T>& probe, const std::vector<float>& bits,
               const std::vector<uint8_t>& truth, size_t count, const ProbeSettings& ps) {
  Adam<T> opt(probe.params(), T(ps.lr), T(ps.weight_decay));
  std::vector<int> order(count);
  for (int e = 0; e < ps.epochs; ++e) {
    for (size_t i = 0; i < count; ++i) order[i] = int(i);
    Rng shuffle_rng = Rng::child(ps.seed, 0x9E0BEull + uint64_t(e));
    shuffle_rng.shuffle(order);
    for (size_t start = 0; start < count; start += size_t(ps.batch_size)) {
      const size_t stop = std::min(count, start + size_t(ps.batch_size));
      const std::vector<int> idx(order.begin() + start, order.begin() + stop);
      Tape<T> tape;
      const Tensor<T> feat = probe.features(bits, idx);
      const Tensor<T> rows = probe.score_rows(tape, feat, int(idx.size()));
      Tensor<T> loss = softmax_ce_loss(tape, rows, probe.labels(truth, idx));
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
  }
}

// per-cell confusion -> macro-F1 (classes with no true instances excluded) and
// accuracy, in percent
template <typename T>
EvalScores eval_probe(const LinearProbe<T>& probe, const std::vector<float>& bits,
                      const std::vector<uint8_t>& truth, size_t count, int batch_size = 1024) {
  const int cells = probe.cells, classes = probe.classes;
  // conf[cell][true * classes + pred]
  std::vector<std::vector<int64_t>> conf(cells, std::vector<int64_t>(classes * classes, 0));
  for (size_t start = 0; start < count; start += size_t(batch_size)) {
    const size_t stop = std::min(count, start + size_t(batch_size));
    const auto idx = detail::batch_range(start, stop);
    Tape<T> tape;
    tape.recording = false;
    const Tensor<T> rows = probe.score_rows(tape, probe.features(bits, idx), int(idx.size()));
    const std::vector<int> y = probe.labels(truth, idx);
    for (size_t r = 0; r < y.size(); ++r) {
      const T* s = rows.ptr() + r * size_t(classes);
      int armax = 0;
      for (int c = 1; c < classes; ++c)
        if (s[c] > s[armax]) armax = c;
      conf[r % cells][size_t(y[r]) * classes + armax]++;
    }
  }
  EvalScores out;
  out.cells.resize(cells);
  for (int cell = 0; cell < cells; ++cell) {
    const auto& m = conf[cell];
    int64_t total = 0, correct = 0;
    for (int t = 0; t < classes; ++t)
      for (int p = 0; p < classes; ++p) {
        total += m[size_t(t) * classes + p];
        if (t == p) correct += m[size_t(t) * classes + p];
      }
    double f1_sum = 0;
    int f1_n = 0;
    for (int c = 0; c < classes; ++c) {
      int64_t tp = m[size_t(c) * classes + c], fn = 0, fp = 0;
      for (int o = 0; o < classes; ++o) {
        if (o == c) continue;
        fn += m[size_t(c) * classes + o];
        fp += m[size_t(o) * classes + c];
      }
      if (tp + fn + fp == 0) continue;  // class appears in neither truth nor prediction
      f1_sum += 2.0 * tp / double(2 * tp + fp + fn);
      ++f1_n;
    }
    out.cells[cell].acc = 100.0 * double(correct) / double(total);
    out.cells[cell].f1 = f1_n > 0 ? 100.0 * f1_sum / f1_n : 0.0;
    out.mean_f1 += out.cells[cell].f1;
    out.mean_acc += out.cells[cell].acc;
  }
  out.mean_f1 /= cells;
  out.mean_acc /= cells;
  return out;
}

// full protocol: fit on the fit split's encodings, score the eval split
template <typename T>
EvalScores eval_encoding(ModelBundle<T>& model, LinearProbe<T>& probe, const Dataset& eval_ds) {
  const std::vector<float> bits = encode_split_bits(model, eval_ds);
  return eval_probe(probe, bits, eval_ds.truth, eval_ds.count);
}

template <typename T>
EvalScores eval_imagination(ModelBundle<T>& model, LinearProbe<T>& probe, const Dataset& eval_ds) {
  const std::vector<float> bits = imagine_split_bits(model, eval_ds);
  return eval_probe(probe, bits, eval_ds.truth_next, eval_ds.count);
}

template <typename T>
LinearProbe<T> fit_split_probe(ModelBundle<T>& model, const Dataset& fit_ds,
                               const ProbeSettings& ps) {
  Rng rng = Rng::child(ps.seed, 0x9E0B1ull);
  LinearProbe<T> probe = LinearProbe<T>::init(fit_ds.benchmark, model.cfg.k, rng);
  const std::vector<float> bits = encode_split_bits(model, fit_ds);
  fit_probe(probe, bits, fit_ds.truth, fit_ds.count, ps);
  return probe;
}

inline nlohmann::json eval_report(const std::string& benchmark, bool noisy,
                                  const std::string& family, const std::string& variant,
                                  uint64_t seed, const std::string& mode,
                                  const EvalScores& scores) {
  nlohmann::json per_cell = nlohmann::json::array();
  for (size_t i = 0; i < scores.cells.size(); ++i)
    per_cell.push_back({{"cell", int(i)}, {"f1", scores.cells[i].f1}, {"acc", scores.cells[i].acc}});
  return nlohmann::json{{"benchmark", benchmark},
                        {"noise", noisy ? "noisy" : "clean"},
                        {"family", family},
                        {"variant", variant},
                        {"seed", seed},
                        {"mode", mode},
                        {"mean_f1", scores.mean_f1},
                        {"mean_acc", scores.mean_acc},
                        {"per_cell", per_cell}};
}

}  // namespace dwmr
