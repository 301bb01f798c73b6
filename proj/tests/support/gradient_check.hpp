#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "crepair/ops.hpp"
#include "crepair/tensor.hpp"

namespace crepair::testing {

// Central-difference gradient verification. `forward` must rebuild its graph
// from the live values of `inputs` on every call and return a scalar. Returns
// the worst relative error across all elements of all inputs.
inline double max_grad_rel_error(const std::function<Tensor()>& forward,
                                 std::vector<Tensor>& inputs,
                                 double step = 1e-5) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = forward();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) analytic.push_back(t.grad());

  double worst = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    t.set_requires_grad(false);  // plain value evaluation below
    double* data = t.data_mut();
    for (std::int64_t i = 0; i < t.size(); ++i) {
      double saved = data[i];
      data[i] = saved + step;
      double fp = forward().item();
      data[i] = saved - step;
      double fm = forward().item();
      data[i] = saved;
      double fd = (fp - fm) / (2.0 * step);
      double an = analytic[ti][static_cast<std::size_t>(i)];
      double denom = std::max({std::fabs(fd), std::fabs(an), 1e-4});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
    t.set_requires_grad(true);
  }
  return worst;
}

}  // namespace crepair::testing
