#pragma once

// Central-difference gradient checking for the reverse-mode tape. The loss
// builder is re-run from scratch for every probe so it must be a pure
// function of the parameter values.

#include <cmath>
#include <functional>
#include <vector>

#include "dwmr/tensor.hpp"

namespace dwmr {

template <typename T>
struct GradCheckResult {
  T max_rel_err = T(0);
  T max_abs_err = T(0);
  int worst_param = -1;
  size_t worst_index = 0;
};

// params: leaf tensors with requires_grad set; f builds the scalar loss on the
// given tape from the current parameter values.
template <typename T>
GradCheckResult<T> gradcheck(std::vector<Tensor<T>>& params,
                             const std::function<Tensor<T>(Tape<T>&)>& f, T h = T(1e-5),
                             T abs_floor = T(1e-8)) {
  // analytic pass
  for (auto& p : params) p.zero_grad();
  Tape<T> tape;
  Tensor<T> loss = f(tape);
  tape.backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<T>(p.size(), T(0)));

  auto eval = [&]() {
    Tape<T> t;
    t.recording = false;
    return f(t).item();
  };

  GradCheckResult<T> res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    T* data = params[pi].ptr();
    for (size_t k = 0; k < params[pi].size(); ++k) {
      const T saved = data[k];
      data[k] = saved + h;
      const T up = eval();
      data[k] = saved - h;
      const T down = eval();
      data[k] = saved;
      const T numeric = (up - down) / (T(2) * h);
      const T a = analytic[pi][k];
      const T abs_err = std::abs(a - numeric);
      const T rel = abs_err / std::max(std::max(std::abs(a), std::abs(numeric)), abs_floor);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = int(pi);
        res.worst_index = k;
      }
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
    }
  }
  return res;
}

}  // namespace dwmr
