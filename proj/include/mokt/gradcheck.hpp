#pragma once

#include <cmath>
#include <functional>

#include "mokt/tensor.hpp"

namespace mokt {

// Central-difference gradient of a scalar-valued function at x:
//   g_i = (f(x + h e_i) - f(x - h e_i)) / (2h)
// f must be a pure function of the tensor's values; it is evaluated with
// recording off. x is perturbed in place and restored.
template <typename S>
Tensor<S> finite_diff_grad(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                           Tensor<S> x, S h) {
  NoGradGuard guard;
  Tensor<S> g = Tensor<S>::zeros(x.shape());
  auto& xv = x.mutable_values();
  auto& gv = g.mutable_values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    S orig = xv[i];
    xv[i] = orig + h;
    S fp = f(x).item();
    xv[i] = orig - h;
    S fm = f(x).item();
    xv[i] = orig;
    gv[i] = (fp - fm) / (S(2) * h);
  }
  return g;
}

// Relative error between an analytic and a numeric gradient coordinate:
// |a - n| / max(|a| + |n|, floor). The floor keeps near-zero coordinates from
// amplifying finite-difference noise into spurious failures.
template <typename S>
S rel_err(S a, S n, S floor = S(1e-3)) {
  return std::abs(a - n) / std::max(std::abs(a) + std::abs(n), floor);
}

template <typename S>
S max_rel_err(const Tensor<S>& analytic, const Tensor<S>& numeric,
              S floor = S(1e-3)) {
  check(analytic.shape() == numeric.shape(), "max_rel_err: shape mismatch");
  S worst = S(0);
  for (std::int64_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, rel_err(analytic[i], numeric[i], floor));
  return worst;
}

}  // namespace mokt
