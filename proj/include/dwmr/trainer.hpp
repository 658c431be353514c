#pragma once

// Training loops: the three optimization variants (two_step /
// fully_differentiable / straight_through), the model-family objectives
// (dwmr, ae, bvae, deepcubeai, dwmr_ae, dwmr_bvae), EMA target maintenance,
// exponential epoch-end schedules, per-epoch metrics rows and checkpoints.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dwmr/adam.hpp"
#include "dwmr/checkpoint.hpp"
#include "dwmr/config.hpp"
#include "dwmr/dataset.hpp"
#include "dwmr/losses.hpp"
#include "dwmr/model.hpp"
#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

inline constexpr const char* kMetricsHeader =
    "epoch,step,loss_total,loss_pred,loss_var,loss_cor,loss_cos,loss_loc,"
    "loss_rec,loss_kl,mean_bit,mean_bit_std,mean_flips,lr_enc,lr_pred,tau";

// hyperparameter values in effect during one epoch (base * factor^epoch)
struct ScheduledValues {
  double lr_enc = 0, lr_pred = 0, lr_dec = 0, tau = 0;
  double l_var = 0, l_cor = 0, l_cos = 0, l_loc = 0, l_rec = 0, l_kl = 0;
};

struct TrainSettings {
  std::string benchmark = "puzzle";
  std::string family = "dwmr";
  std::string variant = "two_step";
  std::string b_input = "soft";  // predictor input in the two_step joint step
  uint64_t seed = 0;
  int epochs = 40, batch_size = 256, k = 64;
  double lr_enc = 1e-3, lr_pred = 1e-3, lr_dec = 1e-3, tau = 0.9;
  double l_var = 25, l_cor = 5, l_cos = 5, l_loc = 1, l_rec = 10, l_kl = 1;
  double gamma = 0.45;
  int window_l = 1, window_u = 6;
  int cos_triplets = 0;  // 0 = full contraction
  double bvae_temp = 1.0;
  double f_lr_enc = 1, f_lr_pred = 1, f_lr_dec = 1, f_tau = 1;
  double f_var = 1, f_cor = 1, f_cos = 1, f_loc = 1, f_rec = 1, f_kl = 1;
  bool metrics_per_step = false;
  int checkpoint_every = 1;
  bool ema_identity = false;  // ablation: copy the target from the encoder
  std::string resume;
  ModelConfig model;

  static TrainSettings from_config(const Config& c) {
    TrainSettings s;
    s.benchmark = c.str("benchmark");
    s.family = c.str("family");
    s.variant = c.str("variant");
    s.b_input = c.str("loss.two_step_b_input");
    s.seed = uint64_t(c.integer("seed"));
    s.epochs = c.integer("epochs");
    s.batch_size = c.integer("batch_size");
    s.k = c.integer("k");
    s.lr_enc = c.num("lr.encoder");
    s.lr_pred = c.num("lr.predictor");
    s.lr_dec = c.num("lr.decoder");
    s.tau = c.num("tau");
    s.l_var = c.num("loss.lambda_var");
    s.l_cor = c.num("loss.lambda_cor");
    s.l_cos = c.num("loss.lambda_cos");
    s.l_loc = c.num("loss.lambda_loc");
    s.l_rec = c.num("loss.lambda_rec");
    s.l_kl = c.num("loss.lambda_kl");
    s.gamma = c.num("loss.gamma");
    s.window_l = c.integer("loss.window_l");
    s.window_u = c.integer("loss.window_u");
    s.cos_triplets = c.integer("loss.cos_sample_triplets");
    s.bvae_temp = c.num("loss.bvae_temperature");
    s.f_lr_enc = c.num("schedule.lr_enc");
    s.f_lr_pred = c.num("schedule.lr_pred");
    s.f_lr_dec = c.num("schedule.lr_dec");
    s.f_tau = c.num("schedule.tau");
    s.f_var = c.num("schedule.lambda_var");
    s.f_cor = c.num("schedule.lambda_cor");
    s.f_cos = c.num("schedule.lambda_cos");
    s.f_loc = c.num("schedule.lambda_loc");
    s.f_rec = c.num("schedule.lambda_rec");
    s.f_kl = c.num("schedule.lambda_kl");
    s.metrics_per_step = c.boolean("train.metrics_per_step");
    s.checkpoint_every = c.integer("train.checkpoint_every");
    s.ema_identity = c.boolean("train.ema_identity");
    s.resume = c.str("train.resume");
    s.model.benchmark = s.benchmark;
    s.model.k = s.k;
    s.model.enc_widths = c.int_list("model.enc_widths");
    s.model.enc_hidden = c.integer("model.enc_hidden");
    s.model.pred_hidden = c.integer("model.pred_hidden");
    s.model.pred_channels = c.integer("model.pred_channels");
    s.model.groups = c.integer("model.groups");
    s.model.with_decoder = s.needs_decoder();
    return s;
  }

  bool needs_decoder() const { return family != "dwmr"; }
  bool dwmr_terms() const {
    return family == "dwmr" || family == "dwmr_ae" || family == "dwmr_bvae";
  }
  bool uses_kl() const { return family == "bvae" || family == "dwmr_bvae"; }
  bool uses_noise() const { return uses_kl(); }  // logistic noise at the logits
  bool is_deepcubeai() const { return family == "deepcubeai"; }

  ScheduledValues at_epoch(int epoch) const {
    auto sched = [epoch](double base, double factor) { return base * std::pow(factor, epoch); };
    ScheduledValues h;
    h.lr_enc = sched(lr_enc, f_lr_enc);
    h.lr_pred = sched(lr_pred, f_lr_pred);
    h.lr_dec = sched(lr_dec, f_lr_dec);
    h.tau = std::min(sched(tau, f_tau), 0.9999);
    h.l_var = sched(l_var, f_var);
    h.l_cor = sched(l_cor, f_cor);
    h.l_cos = sched(l_cos, f_cos);
    h.l_loc = sched(l_loc, f_loc);
    h.l_rec = sched(l_rec, f_rec);
    h.l_kl = sched(l_kl, f_kl);
    return h;
  }
};

struct StepStats {
  double total = 0, pred = 0, var = 0, cor = 0, cos = 0, loc = 0, rec = 0, kl = 0;
  double mean_bit = 0, mean_bit_std = 0, mean_flips = 0;

  void accumulate(const StepStats& o) {
    total += o.total; pred += o.pred; var += o.var; cor += o.cor; cos += o.cos;
    loc += o.loc; rec += o.rec; kl += o.kl; mean_bit += o.mean_bit;
    mean_bit_std += o.mean_bit_std; mean_flips += o.mean_flips;
  }
  void divide(double n) {
    total /= n; pred /= n; var /= n; cor /= n; cos /= n; loc /= n; rec /= n;
    kl /= n; mean_bit /= n; mean_bit_std /= n; mean_flips /= n;
  }
};

namespace detail {

inline std::string fmt_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.8g", v);
  return buf;
}

// copies checkpoint arrays into live tensors by name; shapes must match
template <typename T>
void load_named(const std::unordered_map<std::string, const Tensor<T>*>& arrays,
                std::vector<NamedTensor<T>> dst) {
  for (auto& np : dst) {
    auto it = arrays.find(np.name);
    check(it != arrays.end(), cat("checkpoint is missing array '", np.name, "'"));
    check(it->second->shape == np.tensor.shape,
          cat("checkpoint shape mismatch for '", np.name, "': file has ",
              shape_str(it->second->shape), ", model needs ", shape_str(np.tensor.shape)));
    std::copy(it->second->data().begin(), it->second->data().end(), np.tensor.data().begin());
  }
}

}  // namespace detail

template <typename T = float>
class Trainer {
 public:
  Trainer(TrainSettings s, const Dataset& data) : s_(std::move(s)), data_(&data) {
    check(data_->benchmark == s_.benchmark,
          cat("dataset benchmark '", data_->benchmark, "' does not match config '", s_.benchmark,
              "'"));
    Rng init_rng = Rng::child(s_.seed, 0xA11CEull);
    model_ = ModelBundle<T>::init(s_.model, init_rng);
    noise_rng_ = Rng::child(s_.seed, 0xB0153ull);
    opt_enc_ = Adam<T>(model_.encoder_params(), T(s_.lr_enc));
    opt_pred_ = Adam<T>(model_.predictor_params(), T(s_.lr_pred));
    if (s_.model.with_decoder) opt_dec_ = Adam<T>(model_.decoder_params(), T(s_.lr_dec));
    if (!s_.resume.empty()) restore(s_.resume);
  }

  ModelBundle<T>& model() { return model_; }
  const TrainSettings& settings() const { return s_; }
  int epochs_done() const { return done_epochs_; }

  // observation point for tests: called after every optimizer step with
  // 'a' (predictor-only sub-step), 'b' (joint sub-step) or 'j' (single step)
  std::function<void(char)> sub_step_hook;

  void train(const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.csv";
    const bool fresh = done_epochs_ == 0;
    std::ofstream metrics(metrics_path, fresh ? std::ios::trunc : std::ios::app);
    check(bool(metrics), cat("cannot open ", metrics_path, " for writing"));
    if (fresh) metrics << kMetricsHeader << "\n";

    std::vector<int> order(data_->count);
    for (int e = done_epochs_; e < s_.epochs; ++e) {
      const ScheduledValues h = s_.at_epoch(e);
      for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
      Rng shuffle_rng = Rng::child(s_.seed, 0x5AFF1Eull + uint64_t(e));
      shuffle_rng.shuffle(order);

      StepStats epoch_stats;
      int batches = 0;
      for (size_t start = 0; start < order.size(); start += size_t(s_.batch_size)) {
        const size_t stop = std::min(order.size(), start + size_t(s_.batch_size));
        if (stop - start < 2) continue;  // batch statistics need at least two rows
        const std::vector<int> idx(order.begin() + start, order.begin() + stop);
        const StepStats st = run_batch(idx, h);
        epoch_stats.accumulate(st);
        ++batches;
        ++global_step_;
        if (s_.metrics_per_step) write_row(metrics, e, st, h);
      }
      check(batches > 0, "epoch produced no batches; dataset too small for batch_size");
      epoch_stats.divide(double(batches));
      write_row(metrics, e, epoch_stats, h);
      metrics.flush();
      done_epochs_ = e + 1;
      if ((e + 1) % s_.checkpoint_every == 0 || e + 1 == s_.epochs) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_epoch%03d.bin", e);
        save(out_dir + "/" + name);
      }
    }
  }

  void save(const std::string& path) {
    std::vector<NamedTensor<T>> arrays;
    for (auto& np : model_.encoder_params()) arrays.push_back(np);
    for (auto& np : model_.target_params()) arrays.push_back(np);
    for (auto& np : model_.predictor_params()) arrays.push_back(np);
    for (auto& np : model_.decoder_params()) arrays.push_back(np);
    for (auto& np : model_.state_buffers()) arrays.push_back({"buf." + np.name, np.tensor});
    opt_enc_.collect_state("opt_enc.", arrays);
    opt_pred_.collect_state("opt_pred.", arrays);
    if (s_.model.with_decoder) opt_dec_.collect_state("opt_dec.", arrays);
    Tensor<T> meta = Tensor<T>::from({4}, {T(done_epochs_), T(opt_enc_.step_count()),
                                           T(opt_pred_.step_count()),
                                           T(s_.model.with_decoder ? opt_dec_.step_count() : 0)});
    meta.set_requires_grad(false);
    arrays.push_back({"meta.state", meta});
    arrays.push_back({"meta.step", Tensor<T>::scalar(T(global_step_))});
    save_checkpoint(path, arrays);
  }

  void restore(const std::string& path) {
    const std::vector<NamedTensor<T>> arrays = load_checkpoint<T>(path);
    std::unordered_map<std::string, const Tensor<T>*> by_name;
    for (const auto& np : arrays) by_name[np.name] = &np.tensor;
    detail::load_named(by_name, model_.encoder_params());
    detail::load_named(by_name, model_.target_params());
    detail::load_named(by_name, model_.predictor_params());
    detail::load_named(by_name, model_.decoder_params());
    for (auto& np : model_.state_buffers()) {
      auto it = by_name.find("buf." + np.name);
      check(it != by_name.end(), cat("checkpoint is missing buffer '", np.name, "'"));
      check(it->second->shape == np.tensor.shape, cat("buffer shape mismatch for ", np.name));
      std::copy(it->second->data().begin(), it->second->data().end(), np.tensor.data().begin());
    }
    for (const auto& np : arrays) {
      for (const char* prefix : {"opt_enc.", "opt_pred.", "opt_dec."}) {
        if (np.name.rfind(prefix, 0) != 0) continue;
        const std::string inner = np.name.substr(std::string(prefix).size());
        std::vector<T> values(np.tensor.data().begin(), np.tensor.data().end());
        if (std::string(prefix) == "opt_enc.") opt_enc_.load_moment(inner, values);
        else if (std::string(prefix) == "opt_pred.") opt_pred_.load_moment(inner, values);
        else opt_dec_.load_moment(inner, values);
      }
    }
    auto meta = by_name.find("meta.state");
    check(meta != by_name.end(), "checkpoint is missing meta.state");
    check(meta->second->size() == 4, "meta.state must hold 4 values");
    const T* ms = meta->second->ptr();
    done_epochs_ = int(ms[0]);
    opt_enc_.set_step_count(int64_t(ms[1]));
    opt_pred_.set_step_count(int64_t(ms[2]));
    if (s_.model.with_decoder) opt_dec_.set_step_count(int64_t(ms[3]));
    auto step = by_name.find("meta.step");
    check(step != by_name.end(), "checkpoint is missing meta.step");
    global_step_ = int64_t(step->second->item());
  }

  // one training step on an explicit index set; exposed for instrumentation
  StepStats run_batch(const std::vector<int>& idx, const ScheduledValues& h) {
    const Tensor<T> x = batch_obs(idx, false);
    const Tensor<T> xn = batch_obs(idx, true);
    std::vector<uint8_t> acts(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) acts[i] = data_->action[size_t(idx[i])];
    const Tensor<T> a = one_hot_actions<T>(acts);

    opt_enc_.lr = T(h.lr_enc);
    opt_pred_.lr = T(h.lr_pred);
    opt_dec_.lr = T(h.lr_dec);

    Tape<T> tape;
    // encoder forward once; reused by the joint step
    Tensor<T> p_clean, p_train;
    if (s_.uses_noise()) {
      const Tensor<T> logits = model_.encode_logits(tape, x);
      p_clean = sigmoid(tape, logits);
      p_train = binary_concrete_sample(tape, logits, noise_rng_, T(s_.bvae_temp));
    } else {
      p_clean = model_.encode(tape, x);
      p_train = p_clean;
    }
    const Tensor<T> b = binarize(p_clean);
    const Tensor<T> bprime = binarize(model_.encode_target(tape, xn));
    Tensor<T> pprime;  // online encoding of the next observation
    if (s_.is_deepcubeai()) pprime = model_.encode(tape, xn);

    StepStats st;
    diagnostics(p_clean, b, bprime, st);

    if (s_.variant == "two_step") {
      {
        // (a) predictor-only update on detached hard bits; its own tape so the
        // replay cannot touch encoder closures
        Tape<T> tape_a;
        const Tensor<T> phat_a = model_.predict(tape_a, b, a, true);
        Tensor<T> la = bce_loss(tape_a, phat_a, bprime);
        tape_a.backward(la);
        opt_pred_.step();
        opt_pred_.zero_grad();
        post_step_ema(h);
        if (sub_step_hook) sub_step_hook('a');
      }
      // (b) joint update of encoder, predictor (and decoder when present)
      Tensor<T> pin = s_.b_input == "soft" ? p_train : st_round(tape, p_train);
      const Tensor<T> phat = model_.predict(tape, pin, a, true);
      Tensor<T> total = objective(tape, p_clean, p_train, phat, bprime, pprime, x, xn, h, st);
      tape.backward(total);
      step_all();
      post_step_ema(h);
      if (sub_step_hook) sub_step_hook('b');
    } else {
      Tensor<T> pin = s_.variant == "straight_through" ? st_round(tape, p_train) : p_train;
      const Tensor<T> phat = model_.predict(tape, pin, a, true);
      Tensor<T> total = objective(tape, p_clean, p_train, phat, bprime, pprime, x, xn, h, st);
      tape.backward(total);
      step_all();
      post_step_ema(h);
      if (sub_step_hook) sub_step_hook('j');
    }
    return st;
  }

 private:
  void step_all() {
    opt_enc_.step();
    opt_pred_.step();
    if (s_.model.with_decoder) opt_dec_.step();
    opt_enc_.zero_grad();
    opt_pred_.zero_grad();
    if (s_.model.with_decoder) opt_dec_.zero_grad();
  }

  void post_step_ema(const ScheduledValues& h) {
    if (s_.ema_identity) {
      auto src = model_.encoder_params(), dst = model_.target_params();
      for (size_t i = 0; i < src.size(); ++i)
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(),
                  dst[i].tensor.data().begin());
    } else {
      model_.ema_update(T(h.tau));
    }
  }

  // family objective; the dwmr regularizers see p of the current observations
  Tensor<T> objective(Tape<T>& tape, const Tensor<T>& p_clean, const Tensor<T>& p_train,
                      const Tensor<T>& phat, const Tensor<T>& bprime, const Tensor<T>& pprime,
                      const Tensor<T>& x, const Tensor<T>& xn, const ScheduledValues& h,
                      StepStats& st) {
    Tensor<T> total;
    if (s_.is_deepcubeai()) {
      total = bit_round_pred_loss(tape, pprime, phat);
    } else {
      total = bce_loss(tape, phat, bprime);
    }
    st.pred = double(total.item());

    if (s_.dwmr_terms()) {
      if (h.l_var != 0) {
        Tensor<T> t = var_loss(tape, p_clean, T(s_.gamma));
        st.var = double(t.item());
        total = add(tape, total, scale(tape, t, T(h.l_var)));
      }
      if (h.l_cor != 0) {
        Tensor<T> t = cor_loss(tape, p_clean);
        st.cor = double(t.item());
        total = add(tape, total, scale(tape, t, T(h.l_cor)));
      }
      if (h.l_cos != 0) {
        Tensor<T> t = cos_loss(tape, p_clean, s_.cos_triplets, &noise_rng_);
        st.cos = double(t.item());
        total = add(tape, total, scale(tape, t, T(h.l_cos)));
      }
      if (h.l_loc != 0) {
        Tensor<T> t = loc_loss(tape, p_clean, bprime, s_.window_l, s_.window_u);
        st.loc = double(t.item());
        total = add(tape, total, scale(tape, t, T(h.l_loc)));
      }
    }
    if (s_.model.with_decoder && h.l_rec != 0) {
      Tensor<T> rec;
      if (s_.is_deepcubeai()) {
        Tensor<T> r1 = mse_loss(tape, model_.decode(tape, p_clean), x);
        Tensor<T> r2 = mse_loss(tape, model_.decode(tape, pprime), xn);
        rec = add(tape, scale(tape, r1, T(0.5)), scale(tape, r2, T(0.5)));
      } else {
        rec = mse_loss(tape, model_.decode(tape, p_train), x);
      }
      st.rec = double(rec.item());
      total = add(tape, total, scale(tape, rec, T(h.l_rec)));
    }
    if (s_.uses_kl() && h.l_kl != 0) {
      Tensor<T> t = kl_loss(tape, p_clean);
      st.kl = double(t.item());
      total = add(tape, total, scale(tape, t, T(h.l_kl)));
    }
    st.total = double(total.item());
    return total;
  }

  void diagnostics(const Tensor<T>& p, const Tensor<T>& b, const Tensor<T>& bprime,
                   StepStats& st) const {
    const int n = p.shape[0], k = p.shape[1];
    double bit_sum = 0, flips = 0;
    for (size_t i = 0; i < b.size(); ++i) {
      bit_sum += double(b.data()[i]);
      flips += std::abs(double(b.data()[i]) - double(bprime.data()[i]));
    }
    st.mean_bit = bit_sum / double(n * k);
    st.mean_flips = flips / double(n);
    double std_sum = 0;
    for (int c = 0; c < k; ++c) {
      double mu = 0;
      for (int r = 0; r < n; ++r) mu += double(p.data()[size_t(r) * k + c]);
      mu /= n;
      double var = 0;
      for (int r = 0; r < n; ++r) {
        const double d = double(p.data()[size_t(r) * k + c]) - mu;
        var += d * d;
      }
      std_sum += std::sqrt(var / n);
    }
    st.mean_bit_std = std_sum / k;
  }

  Tensor<T> batch_obs(const std::vector<int>& idx, bool next) const {
    const size_t sz = data_->obs_size();
    Tensor<T> x = Tensor<T>::zeros(
        {int(idx.size()), data_->obs_c, data_->obs_h, data_->obs_w});
    const std::vector<uint8_t>& src = next ? data_->next_obs : data_->obs;
    T* out = x.ptr();
    for (size_t i = 0; i < idx.size(); ++i) {
      const uint8_t* rec = src.data() + size_t(idx[i]) * sz;
      for (size_t j = 0; j < sz; ++j) out[i * sz + j] = T(rec[j]) / T(255);
    }
    return x;
  }

  void write_row(std::ofstream& os, int epoch, const StepStats& st, const ScheduledValues& h) {
    using detail::fmt_metric;
    os << epoch << ',' << global_step_ << ',' << fmt_metric(st.total) << ','
       << fmt_metric(st.pred) << ',' << fmt_metric(st.var) << ',' << fmt_metric(st.cor) << ','
       << fmt_metric(st.cos) << ',' << fmt_metric(st.loc) << ',' << fmt_metric(st.rec) << ','
       << fmt_metric(st.kl) << ',' << fmt_metric(st.mean_bit) << ','
       << fmt_metric(st.mean_bit_std) << ',' << fmt_metric(st.mean_flips) << ','
       << fmt_metric(h.lr_enc) << ',' << fmt_metric(h.lr_pred) << ',' << fmt_metric(h.tau)
       << "\n";
  }

  TrainSettings s_;
  const Dataset* data_;
  ModelBundle<T> model_;
  Adam<T> opt_enc_, opt_pred_, opt_dec_;
  Rng noise_rng_{0};  // concrete-noise and triplet-sampling draws, consumed in batch order
  int done_epochs_ = 0;
  int64_t global_step_ = 0;
};

}  // namespace dwmr
