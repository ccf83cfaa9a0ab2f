#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vcgpt/ops.hpp"
#include "vcgpt/rng.hpp"
#include "vcgpt/tensor.hpp"

namespace vcgpt::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

/// Fixed random projection so a tensor-valued op yields a scalar loss whose
/// gradient exercises every output element.
inline Tensor weighted_sum(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

struct GradCheckResult {
  double worst_rel = 0.0;
  std::size_t checked = 0;
  std::string where;
};

/// Compares the tape gradient of `loss_fn` for every element (or `max_per_tensor`
/// evenly spaced elements) of each input against central differences with
/// step h. Error metric: |a - n| / (max(|a|, |n|) + floor).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                  double h = 1e-5, std::size_t max_per_tensor = 0, double floor = 1e-6) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_fn());
  }
  GradCheckResult r;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t n = t.numel();
    const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = t.data()[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradScope ng;
        t.data()[i] = saved + h;
        plus = loss_fn().item();
        t.data()[i] = saved - h;
        minus = loss_fn().item();
        t.data()[i] = saved;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double rel = std::abs(analytic[i] - numeric) / (std::max(std::abs(analytic[i]), std::abs(numeric)) + floor);
      ++r.checked;
      if (rel > r.worst_rel) {
        r.worst_rel = rel;
        r.where = "input " + std::to_string(ti) + " element " + std::to_string(i) + ": analytic " +
                  std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return r;
}

}  // namespace vcgpt::testing
