#pragma once

// Training objectives. The regularized world-model loss is
//   L = L_pred + l_var*L_var + l_cor*L_cor + l_cos*L_cos + l_loc*L_loc
// with the prediction weight fixed at 1; the regularizers all act on the
// probabilities of the first observation in each batch. Baseline objectives
// (reconstruction, KL to Bernoulli(0.5), the bit-rounding world model) live
// here too.
//
// Batch standardization uses the population standard deviation with eps=1e-6
// added to the denominator (a balanced {0,1} column maps to exactly +/-1 up
// to eps). The correlation matrix divides by N-1; third-order moments are
// plain means over the batch. Each loss is a fused primitive with a
// hand-derived backward, validated against finite differences in the tests.
// Reductions accumulate in double even when training in single precision.

#include <cmath>
#include <memory>
#include <vector>

#include "dwmr/model.hpp"
#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

inline constexpr double kNormEps = 1e-6;  // standardization denominator
inline constexpr double kVarEps = 1e-6;   // inside the variance sqrt

namespace detail {

// per-column mean and population std of a [N,K] matrix
template <typename T>
void column_stats(const Tensor<T>& p, std::vector<T>& mean, std::vector<T>& sigma) {
  const int n = p.shape[0], k = p.shape[1];
  mean.assign(k, T(0));
  sigma.assign(k, T(0));
  std::vector<double> acc(k, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) acc[j] += double(p.ptr()[size_t(i) * k + j]);
  for (int j = 0; j < k; ++j) mean[j] = T(acc[j] / n);
  std::fill(acc.begin(), acc.end(), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const double d = double(p.ptr()[size_t(i) * k + j]) - double(mean[j]);
      acc[j] += d * d;
    }
  for (int j = 0; j < k; ++j) sigma[j] = T(std::sqrt(acc[j] / n));
}

}  // namespace detail

// columnwise (x - mean) / (population std + eps); N >= 2 required
template <typename T>
Tensor<T> normalize_batch(Tape<T>& tape, const Tensor<T>& p) {
  check(p.shape.size() == 2 && p.shape[0] >= 2,
        cat("normalize_batch: need a [N>=2, K] batch, got ", shape_str(p.shape)));
  const int n = p.shape[0], k = p.shape[1];
  auto mean = std::make_shared<std::vector<T>>();
  auto sigma = std::make_shared<std::vector<T>>();
  detail::column_stats(p, *mean, *sigma);
  Tensor<T> y = Tensor<T>::zeros(p.shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      y.ptr()[size_t(i) * k + j] =
          (p.ptr()[size_t(i) * k + j] - (*mean)[j]) / ((*sigma)[j] + T(kNormEps));
  if (detail::track(tape, p)) {
    y.set_requires_grad(true);
    tape.record([p, y, mean, sigma, n, k]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      auto& gp = p.grad();
      for (int j = 0; j < k; ++j) {
        const T s = (*sigma)[j], d = s + T(kNormEps);
        double gbar = 0, b = 0;  // mean of g and sum of g*y over the column
        for (int i = 0; i < n; ++i) {
          gbar += double(g[size_t(i) * k + j]);
          b += double(g[size_t(i) * k + j]) * double(y.ptr()[size_t(i) * k + j]);
        }
        gbar /= n;
        // d/dp of (p - mu)/(sigma + eps); the sigma term vanishes for a
        // constant column (subgradient 0 at sigma = 0)
        const T proj = s > T(0) ? T(b / (double(n) * double(s))) : T(0);
        for (int i = 0; i < n; ++i)
          gp[size_t(i) * k + j] +=
              (g[size_t(i) * k + j] - T(gbar)) / d - proj * y.ptr()[size_t(i) * k + j];
      }
    });
  }
  return y;
}

// (1/K) sum_k max(0, gamma - sqrt(Var_k + 1e-6)), population variance
template <typename T>
Tensor<T> var_loss(Tape<T>& tape, const Tensor<T>& p, T gamma) {
  check(p.shape.size() == 2 && p.shape[0] >= 2,
        cat("var_loss: need a [N>=2, K] batch, got ", shape_str(p.shape)));
  const int n = p.shape[0], k = p.shape[1];
  auto mean = std::make_shared<std::vector<T>>();
  auto sigma = std::make_shared<std::vector<T>>();
  detail::column_stats(p, *mean, *sigma);
  double acc = 0;
  for (int j = 0; j < k; ++j) {
    const double st = std::sqrt(double((*sigma)[j]) * double((*sigma)[j]) + kVarEps);
    acc += std::max(0.0, double(gamma) - st);
  }
  Tensor<T> y = Tensor<T>::scalar(T(acc / k));
  if (detail::track(tape, p)) {
    y.set_requires_grad(true);
    tape.record([p, y, mean, sigma, gamma, n, k]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      auto& gp = p.grad();
      for (int j = 0; j < k; ++j) {
        const T st = T(std::sqrt(double((*sigma)[j]) * double((*sigma)[j]) + kVarEps));
        if (gamma <= st) continue;  // hinge inactive
        const T coef = -g / (T(k) * T(n) * st);
        for (int i = 0; i < n; ++i)
          gp[size_t(i) * k + j] += coef * (p.ptr()[size_t(i) * k + j] - (*mean)[j]);
      }
    });
  }
  return y;
}

// mean |C_ij| over i != j with C = pt^T pt / (N-1), pt already standardized
template <typename T>
Tensor<T> cor_from_normalized(Tape<T>& tape, const Tensor<T>& pt) {
  const int n = pt.shape[0], k = pt.shape[1];
  if (k < 2) return Tensor<T>::scalar(T(0));
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  detail::ConstMatMap<T> ptm(pt.ptr(), n, k);
  Mat c = (ptm.transpose() * ptm) / T(n - 1);
  double acc = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      if (i != j) acc += std::abs(double(c(i, j)));
  Tensor<T> y = Tensor<T>::scalar(T(acc / (double(k) * (k - 1))));
  if (detail::track(tape, pt)) {
    y.set_requires_grad(true);
    auto cptr = std::make_shared<Mat>(std::move(c));
    tape.record([pt, y, cptr, n, k]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      Mat s = Mat::Zero(k, k);
      const T scale = g / (T(k) * T(k - 1));
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
          if (i != j) s(i, j) = (*cptr)(i, j) > T(0) ? scale : ((*cptr)(i, j) < T(0) ? -scale : T(0));
      // dL/dpt = pt (S + S^T) / (N-1), and S is symmetric here
      detail::ConstMatMap<T> ptm(pt.ptr(), n, k);
      detail::MatMap<T>(pt.grad().data(), n, k).noalias() += ptm * (T(2) / T(n - 1)) * s;
    });
  }
  return y;
}

// mean |M_ijk| over ordered distinct triplets, M_ijk = mean_n of the triple
// product; with sample_count > 0 an unbiased estimate over that many
// uniformly drawn distinct triplets (rng required)
template <typename T>
Tensor<T> cos_from_normalized(Tape<T>& tape, const Tensor<T>& pt, int sample_count = 0,
                              Rng* rng = nullptr) {
  const int n = pt.shape[0], k = pt.shape[1];
  if (k < 3) return Tensor<T>::scalar(T(0));
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  detail::ConstMatMap<T> ptm(pt.ptr(), n, k);

  if (sample_count > 0) {
    check(rng != nullptr, "cos_loss: sampled estimator needs a generator");
    auto triplets = std::make_shared<std::vector<std::array<int, 3>>>();
    triplets->reserve(sample_count);
    for (int s = 0; s < sample_count; ++s) {
      const int i = int(rng->uniform_int(k));
      int j = int(rng->uniform_int(k - 1));
      if (j >= i) ++j;
      int l = int(rng->uniform_int(k - 2));
      for (int skip : {std::min(i, j), std::max(i, j)})
        if (l >= skip) ++l;
      triplets->push_back({i, j, l});
    }
    auto moments = std::make_shared<std::vector<T>>(sample_count);
    double acc = 0;
    for (int s = 0; s < sample_count; ++s) {
      const auto& t = (*triplets)[s];
      double m = 0;
      for (int r = 0; r < n; ++r)
        m += double(pt.ptr()[size_t(r) * k + t[0]]) * double(pt.ptr()[size_t(r) * k + t[1]]) *
             double(pt.ptr()[size_t(r) * k + t[2]]);
      m /= n;
      (*moments)[s] = T(m);
      acc += std::abs(m);
    }
    Tensor<T> y = Tensor<T>::scalar(T(acc / sample_count));
    if (detail::track(tape, pt)) {
      y.set_requires_grad(true);
      tape.record([pt, y, triplets, moments, n, k, sample_count]() mutable {
        if (!y.has_grad()) return;
        const T g = y.grad()[0];
        auto& gp = pt.grad();
        for (int s = 0; s < sample_count; ++s) {
          const T m = (*moments)[s];
          if (m == T(0)) continue;
          const auto& t = (*triplets)[s];
          const T coef = g * (m > T(0) ? T(1) : T(-1)) / (T(sample_count) * T(n));
          for (int r = 0; r < n; ++r) {
            const T a = pt.ptr()[size_t(r) * k + t[0]], b = pt.ptr()[size_t(r) * k + t[1]],
                    c = pt.ptr()[size_t(r) * k + t[2]];
            gp[size_t(r) * k + t[0]] += coef * b * c;
            gp[size_t(r) * k + t[1]] += coef * a * c;
            gp[size_t(r) * k + t[2]] += coef * a * b;
          }
        }
      });
    }
    return y;
  }

  // full contraction, slice by slice: M_i = (pt .* pt[:,i])^T pt / N
  const double count = double(k) * (k - 1) * (k - 2);
  double acc = 0;
  {
    Mat w(n, k), mi(k, k);
    for (int i = 0; i < k; ++i) {
      w = ptm.array().colwise() * ptm.col(i).array();
      mi.noalias() = (w.transpose() * ptm) / T(n);
      for (int j = 0; j < k; ++j) {
        if (j == i) continue;
        for (int l = 0; l < k; ++l)
          if (l != i && l != j) acc += std::abs(double(mi(j, l)));
      }
    }
  }
  Tensor<T> y = Tensor<T>::scalar(T(acc / count));
  if (detail::track(tape, pt)) {
    y.set_requires_grad(true);
    tape.record([pt, y, n, k, count]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      detail::ConstMatMap<T> ptm(pt.ptr(), n, k);
      detail::MatMap<T> gp(pt.grad().data(), n, k);
      // dL/dpt[:,c] = (3/N) * rowwise quadratic form with the sign slice S_c;
      // M is symmetric in its indices so the three index positions of c
      // contribute equally
      Mat w(n, k), mc(k, k), s(k, k), u(n, k);
      const T scale = g * T(3) / (T(count) * T(n));
      for (int c = 0; c < k; ++c) {
        w = ptm.array().colwise() * ptm.col(c).array();
        mc.noalias() = (w.transpose() * ptm) / T(n);
        s.setZero();
        for (int j = 0; j < k; ++j) {
          if (j == c) continue;
          for (int l = 0; l < k; ++l)
            if (l != c && l != j && mc(j, l) != T(0))
              s(j, l) = mc(j, l) > T(0) ? scale : -scale;
        }
        u.noalias() = ptm * s;  // S_c symmetric
        gp.col(c) += (u.array() * ptm.array()).rowwise().sum().matrix();
      }
    });
  }
  return y;
}

// convenience forms over raw probabilities
template <typename T>
Tensor<T> cor_loss(Tape<T>& tape, const Tensor<T>& p) {
  if (p.shape[1] < 2) return Tensor<T>::scalar(T(0));
  return cor_from_normalized(tape, normalize_batch(tape, p));
}
template <typename T>
Tensor<T> cos_loss(Tape<T>& tape, const Tensor<T>& p, int sample_count = 0, Rng* rng = nullptr) {
  if (p.shape[1] < 3) return Tensor<T>::scalar(T(0));
  return cos_from_normalized(tape, normalize_batch(tape, p), sample_count, rng);
}

// locality window [L, U] flips per action, expressed on the soft Hamming
// distance d_n = (1/(0.75K)) sum_k |p-b'| gated to entries with |p-b'| > 0.5;
// penalty = mean_n max(0, |d_n - m| - w)^2 with m=(L+U)/2K, w=(U-L)/2K
template <typename T>
Tensor<T> loc_loss(Tape<T>& tape, const Tensor<T>& p, const Tensor<T>& bprime, int L, int U) {
  detail::check_same_shape("loc_loss", p, bprime);
  const int n = p.shape[0], k = p.shape[1];
  check(1 <= L && L <= U && U <= k, cat("loc_loss: window [", L, ",", U, "] invalid for K=", k));
  const T m = T(L + U) / T(2 * k), w = T(U - L) / T(2 * k);
  const T inv_norm = T(1) / (T(0.75) * T(k));
  auto dist = std::make_shared<std::vector<T>>(n);
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    double d = 0;
    for (int j = 0; j < k; ++j) {
      const double e = std::abs(double(p.ptr()[size_t(i) * k + j]) -
                                double(bprime.ptr()[size_t(i) * k + j]));
      if (e > 0.5) d += e;
    }
    d *= double(inv_norm);
    (*dist)[i] = T(d);
    const double r = std::abs(d - double(m)) - double(w);
    if (r > 0) acc += r * r;
  }
  Tensor<T> y = Tensor<T>::scalar(T(acc / n));
  if (detail::track(tape, p)) {
    y.set_requires_grad(true);
    tape.record([p, bprime, y, dist, m, w, inv_norm, n, k]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      auto& gp = p.grad();
      for (int i = 0; i < n; ++i) {
        const T d = (*dist)[i];
        const T r = std::abs(d - m) - w;
        if (r <= T(0)) continue;
        // d(max(0,r)^2)/dd = 2r * sign(d - m); the 0.5 indicator is a
        // constant gate, so gradient flows only through active |p - b'| terms
        const T dd = (g / T(n)) * T(2) * r * (d >= m ? T(1) : T(-1)) * inv_norm;
        for (int j = 0; j < k; ++j) {
          const T e = p.ptr()[size_t(i) * k + j] - bprime.ptr()[size_t(i) * k + j];
          if (std::abs(e) > T(0.5)) gp[size_t(i) * k + j] += dd * (e > T(0) ? T(1) : T(-1));
        }
      }
    });
  }
  return y;
}

// mean KL(Bernoulli(p) || Bernoulli(0.5)) per bit, p clamped to [1e-7, 1-1e-7]
template <typename T>
Tensor<T> kl_loss(Tape<T>& tape, const Tensor<T>& p) {
  const T eps = T(1e-7);
  const size_t n = p.size();
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    const double v = std::min(std::max(double(p.ptr()[i]), double(eps)), 1.0 - double(eps));
    acc += v * std::log(2.0 * v) + (1.0 - v) * std::log(2.0 * (1.0 - v));
  }
  Tensor<T> y = Tensor<T>::scalar(T(acc / double(n)));
  if (detail::track(tape, p)) {
    y.set_requires_grad(true);
    tape.record([p, y, eps, n]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] / T(n);
      auto& gp = p.grad();
      for (size_t i = 0; i < n; ++i) {
        const T raw = p.ptr()[i];
        if (raw <= eps || raw >= T(1) - eps) continue;  // clamped: constant
        gp[i] += g * T(std::log(double(raw) / (1.0 - double(raw))));
      }
    });
  }
  return y;
}

// reparameterized Binary-Concrete relaxation: logistic noise on the logits
// before the sigmoid; differentiable w.r.t. the logits with the noise frozen
template <typename T>
Tensor<T> binary_concrete_sample(Tape<T>& tape, const Tensor<T>& logits, Rng& rng,
                                 T temperature = T(1)) {
  check(temperature > T(0), "binary_concrete: temperature must be positive");
  Tensor<T> y = Tensor<T>::zeros(logits.shape);
  for (size_t i = 0; i < logits.size(); ++i) {
    double u = rng.uniform();
    u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
    const double noise = std::log(u) - std::log1p(-u);
    y.ptr()[i] = T(1) / (T(1) + T(std::exp(-(double(logits.ptr()[i]) + noise) /
                                           double(temperature))));
  }
  if (detail::track(tape, logits)) {
    y.set_requires_grad(true);
    tape.record([logits, y, temperature]() mutable {
      if (!y.has_grad()) return;
      const auto& g = y.grad();
      auto& gl = logits.grad();
      for (size_t i = 0; i < g.size(); ++i) {
        const T s = y.ptr()[i];
        gl[i] += g[i] * s * (T(1) - s) / temperature;
      }
    });
  }
  return y;
}

// bit-rounding world-model objective: both prediction directions rounded,
// each matched against the stop-gradient of the other side
//   0.5*MSE(r(p'), sg(r(phat'))) + 0.5*MSE(phat', sg(r(p')))
template <typename T>
Tensor<T> bit_round_pred_loss(Tape<T>& tape, const Tensor<T>& pprime, const Tensor<T>& phatprime) {
  Tensor<T> r_target = st_round(tape, pprime);
  Tensor<T> r_pred = st_round(tape, phatprime);
  Tensor<T> t1 = mse_loss(tape, r_target, r_pred.detached());
  Tensor<T> t2 = mse_loss(tape, phatprime, r_target.detached());
  return add(tape, scale(tape, t1, T(0.5)), scale(tape, t2, T(0.5)));
}

}  // namespace dwmr
