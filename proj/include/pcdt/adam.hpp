#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pcdt/tensor.hpp"

namespace pcdt {

// Ordered collection of named parameter tensors. Order is insertion order and
// fixes the update, checkpoint, and seed-consumption sequence.
class NamedParams {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    for (auto& [n, _] : entries_)
      if (n == name) throw ContractError("NamedParams: duplicate name " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  Tensor& at(const std::string& name) {
    for (auto& [n, t] : entries_)
      if (n == name) return t;
    throw ContractError("NamedParams: unknown name " + name);
  }
  const Tensor& at(const std::string& name) const {
    return const_cast<NamedParams*>(this)->at(name);
  }
  bool contains(const std::string& name) const {
    for (auto& [n, _] : entries_)
      if (n == name) return true;
    return false;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (auto& [_, t] : entries_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct AdamState {
  long long step_count = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Per-parameter moment buffers, index-aligned with the NamedParams order.
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState for_params(const NamedParams& params, double lr) {
    AdamState s;
    s.learning_rate = lr;
    for (auto& [_, t] : params) {
      s.first_moment.emplace_back(t.numel(), 0.0);
      s.second_moment.emplace_back(t.numel(), 0.0);
    }
    return s;
  }
};

// Bias-corrected Adam update. Requires a populated gradient for every
// parameter; zeroes gradients afterwards (the only place that does).
inline void adam_step(NamedParams& params, AdamState& state) {
  if (state.first_moment.size() != params.size())
    throw ContractError("adam_step: state does not match parameter list");
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  std::size_t idx = 0;
  for (auto& [name, t] : params) {
    if (!t.grad_allocated())
      throw ContractError("adam_step: missing gradient for " + name);
    std::vector<double>& m = state.first_moment[idx];
    std::vector<double>& v = state.second_moment[idx];
    if (m.size() != t.numel())
      throw ContractError("adam_step: moment shape mismatch for " + name);
    double* p = t.data();
    double* g = t.grad();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    if (!all_finite(p, t.numel()))
      throw NumericError("adam_step: non-finite parameter " + name);
    t.zero_grad();
    ++idx;
  }
}

}  // namespace pcdt
