#pragma once

// Central-difference verification of reverse-mode gradients. The directional
// probes re-run the full forward under NoGrad, so the check is independent of
// every backward formula it validates.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pcdt/adam.hpp"
#include "pcdt/tensor.hpp"

namespace pcdt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool ok(double tol = 1e-4) const { return max_rel_error <= tol; }
};

// Checks d(loss)/d(param) for every coordinate of every listed tensor.
// `loss_fn` must rebuild the graph from current parameter values each call.
inline GradCheckResult grad_check_params(
    const std::function<Tensor()>& loss_fn,
    std::vector<std::pair<std::string, Tensor>> checked, double h = 1e-5) {
  for (auto& [name, t] : checked) {
    if (!t.requires_grad())
      throw ContractError("grad_check: " + name + " does not require grad");
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(checked.size());
  for (auto& [name, t] : checked) {
    if (!t.grad_allocated())
      throw ContractError("grad_check: no gradient reached " + name);
    analytic.push_back(t.grad_vector());
    t.zero_grad();
  }

  GradCheckResult res;
  for (std::size_t pi = 0; pi < checked.size(); ++pi) {
    Tensor& t = checked[pi].second;
    double* p = t.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = p[i];
      double f_plus, f_minus;
      {
        NoGradGuard ng;
        p[i] = saved + h;
        f_plus = loss_fn().scalar();
        p[i] = saved - h;
        f_minus = loss_fn().scalar();
        p[i] = saved;
      }
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("grad_check: non-finite evaluation at " +
                           checked[pi].first + "[" + std::to_string(i) + "]");
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = checked[pi].first;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

// Spec-shaped convenience: scalar function of a single tensor input.
inline GradCheckResult grad_check(
    const std::function<Tensor(const Tensor&)>& f, Tensor x,
    double h = 1e-5) {
  x.set_requires_grad(true);
  return grad_check_params([&] { return f(x); }, {{"x", x}}, h);
}

inline GradCheckResult grad_check_params(const std::function<Tensor()>& loss_fn,
                                         NamedParams& params,
                                         double h = 1e-5) {
  std::vector<std::pair<std::string, Tensor>> checked;
  for (auto& [name, t] : params) checked.emplace_back(name, t);
  return grad_check_params(loss_fn, std::move(checked), h);
}

}  // namespace pcdt
