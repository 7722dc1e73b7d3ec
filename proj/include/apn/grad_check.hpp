#pragma once

#include <functional>

#include "apn/tensor.hpp"

namespace apn {

// Central finite-difference check of reverse-mode gradients. `f` must be a
// deterministic scalar-valued function of one tensor; the check runs it twice
// on identical inputs and refuses to proceed if the values differ. Returns
// max over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x0, double eps) {
  detail::check(eps > 0, "grad_check: eps must be positive");
  const Shape shape = x0.shape();
  const std::vector<double> base = x0.value();

  auto probe = Tensor<double>::from_data(shape, base).set_requires_grad(true);
  Tensor<double> y = f(probe);
  detail::check(y.size() == 1, "grad_check: f must return a scalar");
  {
    auto again = Tensor<double>::from_data(shape, base).set_requires_grad(true);
    if (f(again).item() != y.item())
      throw std::runtime_error("grad_check: f is not deterministic across evaluations");
  }

  std::vector<double> analytic(base.size(), 0.0);
  if (y.requires_grad()) {
    y.backward();
    if (probe.has_grad()) analytic = probe.grad();
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> lo = base, hi = base;
    hi[i] += eps;
    lo[i] -= eps;
    const double yp = f(Tensor<double>::from_data(shape, hi)).item();
    const double ym = f(Tensor<double>::from_data(shape, lo)).item();
    const double numeric = (yp - ym) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace apn
