#pragma once

// Reverse-mode automatic differentiation on dense n-d arrays.
//
// A Tensor<T> is a cheap handle: copies share the underlying value buffer and
// gradient cell. Primitives record their backward closure on a Tape; calling
// tape.backward(loss) seeds d(loss)/d(loss) = 1 and replays the closures in
// reverse recording order, which is a reverse topological order of the
// define-by-run graph. Gradient buffers are allocated lazily on first
// accumulation, so replaying an op whose output never received a gradient is
// a no-op.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dwmr/common.hpp"

namespace dwmr {

template <typename T>
struct GradCell {
  std::vector<T> v;  // empty until the first accumulation
  // the flag lives in the shared cell so disabling gradients through any
  // handle (e.g. a collected parameter list) is seen by every other handle
  bool enabled = true;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.shape = shape;
    t.data_ = std::make_shared<std::vector<T>>(numel(shape), T(0));
    return t;
  }

  static Tensor full(const Shape& shape, T value) {
    Tensor t = zeros(shape);
    for (auto& x : *t.data_) x = value;
    return t;
  }

  static Tensor from(const Shape& shape, std::vector<T> values) {
    check(values.size() == numel(shape),
          cat("tensor: ", values.size(), " values for shape ", shape_str(shape)));
    Tensor t;
    t.shape = shape;
    t.data_ = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return bool(data_); }

  // Tensor is a handle: copies share storage, so accessors hand out mutable
  // references even through const handles (backward closures capture by value).
  std::vector<T>& data() const { return *data_; }
  T* ptr() const { return data_->data(); }
  T item() const {
    check(size() == 1, cat("item: tensor has shape ", shape_str(shape)));
    return (*data_)[0];
  }

  bool requires_grad() const { return gcell_ && gcell_->enabled; }
  void set_requires_grad(bool on) {
    if (on) {
      if (!gcell_) gcell_ = std::make_shared<GradCell<T>>();
      gcell_->enabled = true;
    } else if (gcell_) {
      gcell_->enabled = false;
      gcell_->v.clear();
    }
  }

  bool has_grad() const { return requires_grad() && !gcell_->v.empty(); }

  // gradient buffer, allocated (zeroed) on first use
  std::vector<T>& grad() const {
    check(requires_grad(), "grad: tensor does not require gradients");
    if (gcell_->v.empty()) gcell_->v.assign(size(), T(0));
    return gcell_->v;
  }

  void zero_grad() {
    if (gcell_) gcell_->v.clear();
  }

  // view with the same storage and gradient cell; no tape record needed
  Tensor reshaped(const Shape& new_shape) const {
    check(numel(new_shape) == size(),
          cat("reshape: ", shape_str(shape), " -> ", shape_str(new_shape)));
    Tensor t = *this;
    t.shape = new_shape;
    return t;
  }

  // same values, no gradient tracking
  Tensor detached() const {
    Tensor t = *this;
    t.gcell_.reset();
    return t;
  }

  // deep copy of values (fresh storage, no gradient cell)
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  Shape shape;

 private:
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<GradCell<T>> gcell_;
};

template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    if (recording) ops_.push_back(std::move(backward_fn));
  }

  // seeds d(loss)/d(loss) = 1 and replays every recorded op once, in reverse
  void backward(Tensor<T>& loss) {
    check(loss.size() == 1, cat("backward: loss has shape ", shape_str(loss.shape)));
    check(loss.requires_grad(), "backward: loss is detached from the tape");
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void clear() { ops_.clear(); }
  size_t size() const { return ops_.size(); }

  bool recording = true;

 private:
  std::vector<std::function<void()>> ops_;
};

// RAII gradient-free section (used for the EMA target encoder and evaluation)
template <typename T>
struct NoGrad {
  explicit NoGrad(Tape<T>& t) : tape(t), saved(t.recording) { tape.recording = false; }
  ~NoGrad() { tape.recording = saved; }
  Tape<T>& tape;
  bool saved;
};

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
bool track(const Tape<T>& tape, const Tensor<T>& a) {
  return tape.recording && a.requires_grad();
}
template <typename T>
bool track(const Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return tape.recording && (a.requires_grad() || b.requires_grad());
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape == b.shape,
        cat(op, ": shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
}

}  // namespace detail

// ---- elementwise primitives ----

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (detail::track(tape, a, b)) {
    y.set_requires_grad(true);
    tape.record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] - b.data()[i];
  if (detail::track(tape, a, b)) {
    y.set_requires_grad(true);
    tape.record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (detail::track(tape, a, b)) {
    y.set_requires_grad(true);
    tape.record([a, b, y]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T c) {
  Tensor<T> y = Tensor<T>::zeros(a.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * c;
  if (detail::track(tape, a)) {
    y.set_requires_grad(true);
    tape.record([a, y, c]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return y;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (x.data()[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      auto& gx = x.grad();
      for (size_t i = 0; i < g.size(); ++i) {
        const T s = y.data()[i];
        gx[i] += g[i] * s * (T(1) - s);
      }
    });
  }
  return y;
}

// ---- matrix primitives ----

// y[N,O] = x[N,I] * w[I,O]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
  check(x.shape.size() == 2 && w.shape.size() == 2 && x.shape[1] == w.shape[0],
        cat("matmul: incompatible shapes ", shape_str(x.shape), " x ", shape_str(w.shape)));
  const int n = x.shape[0], in = x.shape[1], out = w.shape[1];
  Tensor<T> y = Tensor<T>::zeros({n, out});
  detail::MatMap<T>(y.ptr(), n, out).noalias() =
      detail::ConstMatMap<T>(x.ptr(), n, in) * detail::ConstMatMap<T>(w.ptr(), in, out);
  if (detail::track(tape, x, w)) {
    y.set_requires_grad(true);
    tape.record([x, w, y, n, in, out]() mutable {
      if (!y.has_grad()) return;
      detail::ConstMatMap<T> gy(y.grad().data(), n, out);
      if (x.requires_grad()) {
        detail::MatMap<T>(x.grad().data(), n, in).noalias() +=
            gy * detail::ConstMatMap<T>(w.ptr(), in, out).transpose();
      }
      if (w.requires_grad()) {
        detail::MatMap<T>(w.grad().data(), in, out).noalias() +=
            detail::ConstMatMap<T>(x.ptr(), n, in).transpose() * gy;
      }
    });
  }
  return y;
}

// ---- shape primitives ----

// concatenate along the last-but-(rank-2) "feature" axis for 2-d tensors
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape.size() == 2 && b.shape.size() == 2 && a.shape[0] == b.shape[0],
        cat("concat_cols: ", shape_str(a.shape), " | ", shape_str(b.shape)));
  const int n = a.shape[0], ca = a.shape[1], cb = b.shape[1];
  Tensor<T> y = Tensor<T>::zeros({n, ca + cb});
  for (int i = 0; i < n; ++i) {
    T* row = y.ptr() + size_t(i) * (ca + cb);
    const T* ra = a.ptr() + size_t(i) * ca;
    const T* rb = b.ptr() + size_t(i) * cb;
    std::copy(ra, ra + ca, row);
    std::copy(rb, rb + cb, row + ca);
  }
  if (detail::track(tape, a, b)) {
    y.set_requires_grad(true);
    tape.record([a, b, y, n, ca, cb]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      for (int i = 0; i < n; ++i) {
        const T* row = g.data() + size_t(i) * (ca + cb);
        if (a.requires_grad()) {
          auto& ga = a.grad();
          for (int j = 0; j < ca; ++j) ga[size_t(i) * ca + j] += row[j];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (int j = 0; j < cb; ++j) gb[size_t(i) * cb + j] += row[ca + j];
        }
      }
    });
  }
  return y;
}

// concatenate [N,C1,H,W] and [N,C2,H,W] along the channel axis
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  check(a.shape.size() == 4 && b.shape.size() == 4 && a.shape[0] == b.shape[0] &&
            a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
        cat("concat_channels: ", shape_str(a.shape), " | ", shape_str(b.shape)));
  const int n = a.shape[0], ca = a.shape[1], cb = b.shape[1];
  const size_t hw = size_t(a.shape[2]) * a.shape[3];
  Tensor<T> y = Tensor<T>::zeros({n, ca + cb, a.shape[2], a.shape[3]});
  for (int i = 0; i < n; ++i) {
    T* dst = y.ptr() + size_t(i) * (ca + cb) * hw;
    std::copy(a.ptr() + size_t(i) * ca * hw, a.ptr() + size_t(i + 1) * ca * hw, dst);
    std::copy(b.ptr() + size_t(i) * cb * hw, b.ptr() + size_t(i + 1) * cb * hw, dst + ca * hw);
  }
  if (detail::track(tape, a, b)) {
    y.set_requires_grad(true);
    tape.record([a, b, y, n, ca, cb, hw]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      for (int i = 0; i < n; ++i) {
        const T* src = g.data() + size_t(i) * (ca + cb) * hw;
        if (a.requires_grad()) {
          auto& ga = a.grad();
          for (size_t j = 0; j < ca * hw; ++j) ga[size_t(i) * ca * hw + j] += src[j];
        }
        if (b.requires_grad()) {
          auto& gb = b.grad();
          for (size_t j = 0; j < cb * hw; ++j) gb[size_t(i) * cb * hw + j] += src[ca * hw + j];
        }
      }
    });
  }
  return y;
}

// detach from the tape: values shared, zero gradient propagated upstream
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detached();
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(Tape<T>& tape, const Tensor<T>& x) {
  T acc = T(0);
  for (const T v : x.data()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean_all(Tape<T>& tape, const Tensor<T>& x) {
  const T inv = T(1) / T(x.size());
  T acc = T(0);
  for (const T v : x.data()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc * inv);
  if (detail::track(tape, x)) {
    y.set_requires_grad(true);
    tape.record([x, y, inv]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] * inv;
      auto& gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

// ---- reduction losses ----

// mean binary cross-entropy; predictions clamped to [eps, 1-eps]
template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape("bce", pred, target);
  const T eps = T(1e-7);
  const size_t n = pred.size();
  const T inv = T(1) / T(n);
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) {
    const T p = std::min(std::max(pred.data()[i], eps), T(1) - eps);
    const T t = target.data()[i];
    acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
  }
  Tensor<T> y = Tensor<T>::scalar(acc * inv);
  if (detail::track(tape, pred, target)) {
    y.set_requires_grad(true);
    tape.record([pred, target, y, eps, inv, n]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] * inv;
      for (size_t i = 0; i < n; ++i) {
        const T raw = pred.data()[i];
        const T p = std::min(std::max(raw, eps), T(1) - eps);
        const T t = target.data()[i];
        if (pred.requires_grad() && raw > eps && raw < T(1) - eps)
          pred.grad()[i] += g * (-t / p + (T(1) - t) / (T(1) - p));
        if (target.requires_grad())
          target.grad()[i] += g * (std::log(T(1) - p) - std::log(p));
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mse_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape("mse", pred, target);
  const size_t n = pred.size();
  const T inv = T(1) / T(n);
  T acc = T(0);
  for (size_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(acc * inv);
  if (detail::track(tape, pred, target)) {
    y.set_requires_grad(true);
    tape.record([pred, target, y, inv, n]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] * inv;
      for (size_t i = 0; i < n; ++i) {
        const T d = pred.data()[i] - target.data()[i];
        if (pred.requires_grad()) pred.grad()[i] += g * T(2) * d;
        if (target.requires_grad()) target.grad()[i] -= g * T(2) * d;
      }
    });
  }
  return y;
}

// mean cross-entropy over rows of [R,C] logits against integer class labels
template <typename T>
Tensor<T> softmax_ce_loss(Tape<T>& tape, const Tensor<T>& logits, const std::vector<int>& labels) {
  check(logits.shape.size() == 2, cat("softmax_ce: logits shape ", shape_str(logits.shape)));
  const int rows = logits.shape[0], cols = logits.shape[1];
  check(int(labels.size()) == rows,
        cat("softmax_ce: ", labels.size(), " labels for ", rows, " rows"));
  for (int label : labels)
    check(label >= 0 && label < cols, cat("softmax_ce: class index ", label, " out of range [0, ",
                                          cols, ")"));
  // probs cached for the backward pass
  auto probs = std::make_shared<std::vector<T>>(size_t(rows) * cols);
  T acc = T(0);
  for (int r = 0; r < rows; ++r) {
    const T* row = logits.ptr() + size_t(r) * cols;
    T mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const T logz = std::log(z) + mx;
    for (int c = 0; c < cols; ++c) (*probs)[size_t(r) * cols + c] = std::exp(row[c] - logz);
    acc += logz - row[labels[r]];
  }
  Tensor<T> y = Tensor<T>::scalar(acc / T(rows));
  if (detail::track(tape, logits)) {
    y.set_requires_grad(true);
    tape.record([logits, y, probs, labels, rows, cols]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] / T(rows);
      auto& gx = logits.grad();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          gx[size_t(r) * cols + c] +=
              g * ((*probs)[size_t(r) * cols + c] - (labels[r] == c ? T(1) : T(0)));
    });
  }
  return y;
}

}  // namespace dwmr
