#pragma once

// Adam with bias correction and optional decoupled weight decay. Moment
// buffers are keyed by parameter name so they can round-trip through
// checkpoints.

#include <cmath>
#include <string>
#include <vector>

#include "dwmr/nn.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<NamedTensor<T>> params, T lr = T(1e-3), T weight_decay = T(0),
                T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr(lr), weight_decay(weight_decay), beta1_(beta1),
        beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.size(), T(0));
      v_[i].assign(params_[i].tensor.size(), T(0));
    }
  }

  // applies one update from the accumulated gradients; parameters without a
  // gradient buffer are left untouched (their moments do not advance)
  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, T(t_));
    const T bc2 = T(1) - std::pow(beta2_, T(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i].tensor;
      if (!p.has_grad()) continue;
      auto& g = p.grad();
      for (T gv : g)
        check(std::isfinite(gv), cat("adam: non-finite gradient for parameter ", params_[i].name));
      for (size_t k = 0; k < g.size(); ++k) {
        m_[i][k] = beta1_ * m_[i][k] + (T(1) - beta1_) * g[k];
        v_[i][k] = beta2_ * v_[i][k] + (T(1) - beta2_) * g[k] * g[k];
      }
      T* pd = p.ptr();
      for (size_t k = 0; k < g.size(); ++k) {
        const T mhat = m_[i][k] / bc1;
        const T vhat = v_[i][k] / bc2;
        pd[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * pd[k]);
      }
    }
  }

  void zero_grad() {
    for (auto& np : params_) np.tensor.zero_grad();
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }

  // moment buffers exposed for checkpointing, named <param>.m / <param>.v
  void collect_state(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> m = Tensor<T>::zeros(params_[i].tensor.shape);
      Tensor<T> v = Tensor<T>::zeros(params_[i].tensor.shape);
      std::copy(m_[i].begin(), m_[i].end(), m.ptr());
      std::copy(v_[i].begin(), v_[i].end(), v.ptr());
      out.push_back({prefix + params_[i].name + ".m", m});
      out.push_back({prefix + params_[i].name + ".v", v});
    }
  }
  void load_moment(const std::string& name, const std::vector<T>& values) {
    for (size_t i = 0; i < params_.size(); ++i) {
      if (name == params_[i].name + ".m") {
        check(values.size() == m_[i].size(), cat("adam: size mismatch loading ", name));
        m_[i] = values;
        return;
      }
      if (name == params_[i].name + ".v") {
        check(values.size() == v_[i].size(), cat("adam: size mismatch loading ", name));
        v_[i] = values;
        return;
      }
    }
    fail(cat("adam: unknown moment buffer ", name));
  }

  T lr = T(1e-3);
  T weight_decay = T(0);  // decoupled: p -= lr * wd * p, applied with the update

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  int64_t t_ = 0;
};

}  // namespace dwmr
