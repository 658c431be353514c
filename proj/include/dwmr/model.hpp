#pragma once

// Encoder / EMA target encoder / predictor / optional decoder for both
// benchmarks, plus binarization and the straight-through rounding op.
//
// Puzzle: 5x conv3x3 (same padding, widths 16,32,32,64,64 by default) with
// GroupNorm+ReLU, 2x2 avg-pool after the first three convs (88->44->22->11),
// flatten, 2-layer MLP (hidden 96) to K=64 sigmoid outputs. Predictor is a
// 3-layer MLP (hidden 128) over [p|one-hot action]. Decoder mirrors the
// encoder with nearest-neighbor upsampling + conv3x3 stages.
//
// IceSlider: conv(k4,s4,relu,32ch) then conv(k2,s2,sigmoid,3ch) giving a
// 3x8x8 bit grid (K=192). Predictor concatenates 4 broadcast action channels,
// projects 7->C with a 1x1 conv, runs four residual blocks (batch norm), and
// maps back to 3 channels with a 1x1 conv + sigmoid. Decoder upsamples the
// 3x8x8 grid back to 64x64 RGB.

#include <memory>
#include <string>
#include <vector>

#include "dwmr/envs.hpp"
#include "dwmr/nn.hpp"
#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

// hard bits: b = 1 iff p >= 0.5 (ties round up); detached from the tape
template <typename T>
Tensor<T> binarize(const Tensor<T>& p) {
  Tensor<T> b = Tensor<T>::zeros(p.shape);
  for (size_t i = 0; i < p.size(); ++i) b.data()[i] = p.data()[i] >= T(0.5) ? T(1) : T(0);
  return b;
}

// forward binarize, backward identity (straight-through estimator)
template <typename T>
Tensor<T> st_round(Tape<T>& tape, const Tensor<T>& p) {
  Tensor<T> b = binarize(p);
  if (detail::track(tape, p)) {
    b.set_requires_grad(true);
    tape.record([p, b]() mutable {
      if (!b.has_grad()) return;
      const auto& g = b.grad();
      auto& gp = p.grad();
      for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    });
  }
  return b;
}

// [N] action indices -> [N,4] one-hot rows
template <typename T>
Tensor<T> one_hot_actions(const std::vector<uint8_t>& actions, int n_actions = 4) {
  Tensor<T> a = Tensor<T>::zeros({int(actions.size()), n_actions});
  for (size_t i = 0; i < actions.size(); ++i) {
    check(actions[i] < n_actions, cat("action index ", int(actions[i]), " out of range"));
    a.ptr()[i * size_t(n_actions) + actions[i]] = T(1);
  }
  return a;
}

// ---- puzzle architecture ----

template <typename T>
struct PuzzleEncoder {
  std::vector<Conv2dLayer<T>> convs;
  std::vector<GroupNormLayer<T>> norms;
  AffineLayer<T> fc1, fc2;

  static PuzzleEncoder init(const std::vector<int>& widths, int hidden, int k, int groups,
                            Rng& rng) {
    check(widths.size() == 5, cat("puzzle encoder expects 5 conv widths, got ", widths.size()));
    PuzzleEncoder e;
    int in_c = 1;
    for (int i = 0; i < 5; ++i) {
      e.convs.push_back(Conv2dLayer<T>::init(in_c, widths[i], 3, 1, 1, rng));
      e.norms.push_back(GroupNormLayer<T>::init(widths[i], groups));
      in_c = widths[i];
    }
    e.fc1 = AffineLayer<T>::init(widths[4] * 11 * 11, hidden, rng);
    e.fc2 = AffineLayer<T>::init(hidden, k, rng);
    return e;
  }

  // [N,1,88,88] -> [N,K] pre-sigmoid activations
  Tensor<T> logits(Tape<T>& tape, const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (int i = 0; i < 5; ++i) {
      h = relu(tape, norms[i](tape, convs[i](tape, h)));
      if (i < 3) h = avg_pool2d(tape, h);
    }
    h = h.reshaped({h.shape[0], h.shape[1] * h.shape[2] * h.shape[3]});
    h = relu(tape, fc1(tape, h));
    return fc2(tape, h);
  }

  // [N,1,88,88] -> [N,K]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return sigmoid(tape, logits(tape, x));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(cat(prefix, ".conv", i), out);
      norms[i].collect(cat(prefix, ".gn", i), out);
    }
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

template <typename T>
struct PuzzlePredictor {
  AffineLayer<T> l1, l2, l3;

  static PuzzlePredictor init(int k, int hidden, Rng& rng) {
    PuzzlePredictor p;
    p.l1 = AffineLayer<T>::init(k + kNumActions, hidden, rng);
    p.l2 = AffineLayer<T>::init(hidden, hidden, rng);
    p.l3 = AffineLayer<T>::init(hidden, k, rng);
    return p;
  }

  // latent [N,K], action one-hot [N,4] -> [N,K]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& latent, const Tensor<T>& action) const {
    Tensor<T> h = concat_cols(tape, latent, action);
    h = relu(tape, l1(tape, h));
    h = relu(tape, l2(tape, h));
    return sigmoid(tape, l3(tape, h));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    l1.collect(prefix + ".l1", out);
    l2.collect(prefix + ".l2", out);
    l3.collect(prefix + ".l3", out);
  }
};

template <typename T>
struct PuzzleDecoder {
  AffineLayer<T> fc1, fc2;
  std::vector<Conv2dLayer<T>> convs;   // three upsample stages + output conv
  std::vector<GroupNormLayer<T>> norms;

  static PuzzleDecoder init(const std::vector<int>& enc_widths, int hidden, int k, int groups,
                            Rng& rng) {
    check(enc_widths.size() == 5, "puzzle decoder mirrors a 5-conv encoder");
    PuzzleDecoder d;
    d.fc1 = AffineLayer<T>::init(k, hidden, rng);
    d.fc2 = AffineLayer<T>::init(hidden, enc_widths[4] * 11 * 11, rng);
    // reverse of the pooled encoder widths: 64 -> 32 -> 16 -> 1
    const int w4 = enc_widths[4], w1 = enc_widths[1], w0 = enc_widths[0];
    d.convs.push_back(Conv2dLayer<T>::init(w4, w4, 3, 1, 1, rng));
    d.norms.push_back(GroupNormLayer<T>::init(w4, groups));
    d.convs.push_back(Conv2dLayer<T>::init(w4, w1, 3, 1, 1, rng));
    d.norms.push_back(GroupNormLayer<T>::init(w1, groups));
    d.convs.push_back(Conv2dLayer<T>::init(w1, w0, 3, 1, 1, rng));
    d.norms.push_back(GroupNormLayer<T>::init(w0, groups));
    d.convs.push_back(Conv2dLayer<T>::init(w0, 1, 3, 1, 1, rng));
    return d;
  }

  // [N,K] -> [N,1,88,88]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& p, int base_c) const {
    Tensor<T> h = relu(tape, fc1(tape, p));
    h = relu(tape, fc2(tape, h));
    h = h.reshaped({h.shape[0], base_c, 11, 11});
    for (int i = 0; i < 3; ++i) {
      h = upsample_nearest2(tape, h);
      h = relu(tape, norms[i](tape, convs[i](tape, h)));
    }
    return sigmoid(tape, convs[3](tape, h));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
    for (size_t i = 0; i < convs.size(); ++i) convs[i].collect(cat(prefix, ".conv", i), out);
    for (size_t i = 0; i < norms.size(); ++i) norms[i].collect(cat(prefix, ".gn", i), out);
  }
};

// ---- IceSlider architecture ----

template <typename T>
struct IceEncoder {
  Conv2dLayer<T> conv1, conv2;

  static IceEncoder init(Rng& rng) {
    IceEncoder e;
    e.conv1 = Conv2dLayer<T>::init(3, 32, 4, 4, 0, rng);
    e.conv2 = Conv2dLayer<T>::init(32, 3, 2, 2, 0, rng);
    return e;
  }

  // [N,3,64,64] -> [N,192] pre-sigmoid activations
  Tensor<T> logits(Tape<T>& tape, const Tensor<T>& x) const {
    Tensor<T> h = relu(tape, conv1(tape, x));
    h = conv2(tape, h);
    return h.reshaped({h.shape[0], 3 * 8 * 8});
  }

  // [N,3,64,64] -> [N,192]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return sigmoid(tape, logits(tape, x));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

template <typename T>
struct IcePredictor {
  Conv2dLayer<T> stem, head;
  std::vector<ResidualBlock<T>> blocks;

  static IcePredictor init(int channels, Rng& rng) {
    IcePredictor p;
    p.stem = Conv2dLayer<T>::init(3 + kNumActions, channels, 1, 1, 0, rng);
    for (int i = 0; i < 4; ++i) p.blocks.push_back(ResidualBlock<T>::init(channels, rng));
    p.head = Conv2dLayer<T>::init(channels, 3, 1, 1, 0, rng);
    return p;
  }

  // latent [N,192], action one-hot [N,4] -> [N,192]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& latent, const Tensor<T>& action,
                       bool training) {
    const int n = latent.shape[0];
    Tensor<T> grid = latent.reshaped({n, 3, 8, 8});
    // action channels are constants: broadcast each one-hot entry over 8x8
    Tensor<T> amap = Tensor<T>::zeros({n, kNumActions, 8, 8});
    for (int i = 0; i < n; ++i)
      for (int a = 0; a < kNumActions; ++a) {
        const T v = action.data()[size_t(i) * kNumActions + a];
        T* plane = amap.ptr() + (size_t(i) * kNumActions + a) * 64;
        for (int k = 0; k < 64; ++k) plane[k] = v;
      }
    Tensor<T> h = concat_channels(tape, grid, amap);
    h = relu(tape, stem(tape, h));
    for (auto& block : blocks) h = block(tape, h, training);
    h = sigmoid(tape, head(tape, h));
    return h.reshaped({n, 3 * 8 * 8});
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    stem.collect(prefix + ".stem", out);
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(cat(prefix, ".block", i), out);
    head.collect(prefix + ".head", out);
  }
  void collect_state(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect_state(cat(prefix, ".block", i), out);
  }
};

template <typename T>
struct IceDecoder {
  Conv2dLayer<T> conv1, conv2, conv3;

  static IceDecoder init(Rng& rng) {
    IceDecoder d;
    d.conv1 = Conv2dLayer<T>::init(3, 32, 3, 1, 1, rng);
    d.conv2 = Conv2dLayer<T>::init(32, 32, 3, 1, 1, rng);
    d.conv3 = Conv2dLayer<T>::init(32, 3, 3, 1, 1, rng);
    return d;
  }

  // [N,192] -> [N,3,64,64]
  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& p) const {
    Tensor<T> h = p.reshaped({p.shape[0], 3, 8, 8});
    h = relu(tape, conv1(tape, upsample_nearest2(tape, h)));
    h = relu(tape, conv2(tape, upsample_nearest2(tape, h)));
    return sigmoid(tape, conv3(tape, upsample_nearest2(tape, h)));
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
    conv3.collect(prefix + ".conv3", out);
  }
};

// ---- bundle ----

struct ModelConfig {
  std::string benchmark = "puzzle";
  int k = 64;
  bool with_decoder = false;
  std::vector<int> enc_widths = {16, 32, 32, 64, 64};
  int enc_hidden = 96;
  int pred_hidden = 128;
  int pred_channels = 32;  // IceSlider residual-stack width
  int groups = 4;
};

template <typename T>
struct ModelBundle {
  ModelConfig cfg;
  PuzzleEncoder<T> penc, penc_ema;
  PuzzlePredictor<T> ppred;
  PuzzleDecoder<T> pdec;
  IceEncoder<T> ienc, ienc_ema;
  IcePredictor<T> ipred;
  IceDecoder<T> idec;

  static ModelBundle init(const ModelConfig& cfg, Rng& rng) {
    ModelBundle m;
    m.cfg = cfg;
    if (cfg.benchmark == "puzzle") {
      m.penc = PuzzleEncoder<T>::init(cfg.enc_widths, cfg.enc_hidden, cfg.k, cfg.groups, rng);
      m.penc_ema =
          PuzzleEncoder<T>::init(cfg.enc_widths, cfg.enc_hidden, cfg.k, cfg.groups, rng);
      m.ppred = PuzzlePredictor<T>::init(cfg.k, cfg.pred_hidden, rng);
      if (cfg.with_decoder)
        m.pdec = PuzzleDecoder<T>::init(cfg.enc_widths, cfg.enc_hidden, cfg.k, cfg.groups, rng);
    } else if (cfg.benchmark == "iceslider") {
      check(cfg.k == 192, cat("iceslider latent is the 3x8x8 grid: K must be 192, got ", cfg.k));
      m.ienc = IceEncoder<T>::init(rng);
      m.ienc_ema = IceEncoder<T>::init(rng);
      m.ipred = IcePredictor<T>::init(cfg.pred_channels, rng);
      if (cfg.with_decoder) m.idec = IceDecoder<T>::init(rng);
    } else {
      fail(cat("unknown benchmark '", cfg.benchmark, "'"));
    }
    // the target encoder starts as an exact copy and never carries gradients
    auto src = m.encoder_params(), dst = m.target_params();
    for (size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
                dst[i].tensor.data().begin());
      dst[i].tensor.set_requires_grad(false);
    }
    return m;
  }

  bool puzzle() const { return cfg.benchmark == "puzzle"; }

  Tensor<T> encode(Tape<T>& tape, const Tensor<T>& x) const {
    return puzzle() ? penc(tape, x) : ienc(tape, x);
  }
  Tensor<T> encode_logits(Tape<T>& tape, const Tensor<T>& x) const {
    return puzzle() ? penc.logits(tape, x) : ienc.logits(tape, x);
  }
  // EMA target pass: gradient-free by construction (params never require
  // grad) and kept off the tape entirely
  Tensor<T> encode_target(Tape<T>& tape, const Tensor<T>& x) const {
    NoGrad<T> guard(tape);
    return puzzle() ? penc_ema(tape, x) : ienc_ema(tape, x);
  }
  Tensor<T> predict(Tape<T>& tape, const Tensor<T>& latent, const Tensor<T>& action,
                    bool training) {
    return puzzle() ? ppred(tape, latent, action) : ipred(tape, latent, action, training);
  }
  Tensor<T> decode(Tape<T>& tape, const Tensor<T>& p) const {
    check(cfg.with_decoder, "model has no decoder");
    return puzzle() ? pdec(tape, p, cfg.enc_widths[4]) : idec(tape, p);
  }

  std::vector<NamedTensor<T>> encoder_params() {
    std::vector<NamedTensor<T>> out;
    if (puzzle()) penc.collect("enc", out);
    else ienc.collect("enc", out);
    return out;
  }
  std::vector<NamedTensor<T>> target_params() {
    std::vector<NamedTensor<T>> out;
    if (puzzle()) penc_ema.collect("enc_ema", out);
    else ienc_ema.collect("enc_ema", out);
    return out;
  }
  std::vector<NamedTensor<T>> predictor_params() {
    std::vector<NamedTensor<T>> out;
    if (puzzle()) ppred.collect("pred", out);
    else ipred.collect("pred", out);
    return out;
  }
  std::vector<NamedTensor<T>> decoder_params() {
    std::vector<NamedTensor<T>> out;
    if (!cfg.with_decoder) return out;
    if (puzzle()) pdec.collect("dec", out);
    else idec.collect("dec", out);
    return out;
  }
  // non-trainable buffers (batch-norm running stats)
  std::vector<NamedTensor<T>> state_buffers() {
    std::vector<NamedTensor<T>> out;
    if (!puzzle()) ipred.collect_state("pred", out);
    return out;
  }

  // phi' <- tau*phi' + (1-tau)*phi after every optimizer step
  void ema_update(T tau) {
    auto src = encoder_params(), dst = target_params();
    for (size_t i = 0; i < src.size(); ++i) {
      const T* s = src[i].tensor.ptr();
      T* d = dst[i].tensor.ptr();
      for (size_t k = 0; k < src[i].tensor.size(); ++k) d[k] = tau * d[k] + (T(1) - tau) * s[k];
    }
  }
};

}  // namespace dwmr
