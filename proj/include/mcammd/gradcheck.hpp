#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>

#include "mcammd/autodiff.hpp"

namespace mcammd {

// Compares reverse-mode gradients of `f` against central differences
// (f(w+h) - f(w-h)) / 2h for every entry of every tensor in `params`, and
// returns max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
//
// `f` must rebuild its graph from the current parameter values on every call
// and be deterministic (reseed any RNG inside it). Parameters are perturbed in
// place and restored. Points where f is not differentiable (relu at 0, a kink
// like |w| at 0) are unsupported: the two estimates legitimately disagree.
inline double finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                double h = 1e-5) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  auto evaluate = [&f] {
    const double v = f().item();
    if (!std::isfinite(v)) throw EvaluationError("finite_diff_check: f returned " + std::to_string(v));
    return v;
  };

  const Tensor loss = f();
  if (!std::isfinite(loss.item())) {
    throw EvaluationError("finite_diff_check: f returned " + std::to_string(loss.item()));
  }
  const GradientMap grads = backward(loss);

  double worst = 0.0;
  for (auto& p : params) {
    const auto it = grads.find(p.id());
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double analytic = it == grads.end() ? 0.0 : it->second.at(i);
      const double saved = w[i];
      double up = 0.0, down = 0.0;
      try {
        w[i] = saved + h;
        up = evaluate();
        w[i] = saved - h;
        down = evaluate();
      } catch (...) {
        w[i] = saved;
        throw;
      }
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mcammd
