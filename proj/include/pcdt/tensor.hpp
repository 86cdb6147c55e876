#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "pcdt/common.hpp"
#include "pcdt/rng.hpp"

namespace pcdt {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw DimensionError("shape dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Finiteness scan: x*0 is +-0 for finite x and NaN for inf/NaN, so the
// accumulator ends at 0 iff every element is finite. Single pass, vectorizes.
inline bool all_finite(const double* p, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += p[i] * 0.0;
  return acc == 0.0;
}

class Tensor;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first touch, same length as data
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::size_t numel() const { return data ? data->size() : 0; }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double* grad_ptr() {
    if (grad.size() != data->size()) grad.assign(data->size(), 0.0);
    return grad.data();
  }
};

// Grad mode: ops record the tape only while enabled. Thread-local so frozen
// networks can run forward concurrently without touching shared state.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    std::size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data = std::make_shared<std::vector<double>>(n, value);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("from_data: value count does not match shape " +
                           shape_str(shape));
    if (!all_finite(values.data(), values.size()))
      throw NumericError("from_data: non-finite input");
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::make_shared<std::vector<double>>(std::move(values));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->numel(); }

  double* data() { return impl_->ptr(); }
  const double* data() const { return impl_->ptr(); }
  double value_at(std::size_t i) const { return (*impl_->data)[i]; }
  double scalar() const {
    if (numel() != 1) throw DimensionError("scalar(): tensor is not scalar");
    return (*impl_->data)[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool grad_allocated() const {
    return impl_->grad.size() == impl_->data->size();
  }
  double* grad() { return impl_->grad_ptr(); }
  const std::vector<double>& grad_vector() const {
    if (!grad_allocated())
      throw ContractError("grad_vector: gradient not populated");
    return impl_->grad;
  }
  void zero_grad() {
    if (grad_allocated())
      std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void drop_grad() { impl_->grad.clear(); }

  // Shares the value buffer, drops the tape edge.
  Tensor detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = false;
    return Tensor(std::move(impl));
  }

  Tensor reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw DimensionError("reshape: element count mismatch " +
                           shape_str(impl_->shape) + " -> " +
                           shape_str(new_shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(new_shape);
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad && grad_enabled();
    if (impl->requires_grad) {
      impl->parents = {*this};
      impl->backward_fn = [](detail::TensorImpl& self) {
        Tensor& p = self.parents[0];
        if (!p.requires_grad()) return;
        double* pg = p.grad();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.numel(); ++i) pg[i] += g[i];
      };
    }
    return Tensor(std::move(impl));
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // requires_grad tensor reachable through the tape; zeroing is the
  // optimizer's job.
  void backward() {
    if (numel() != 1) throw ContractError("backward: root must be scalar");
    std::vector<detail::TensorImpl*> order;
    topo_collect(order);
    impl_->grad_ptr()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::TensorImpl* node = *it;
      if (node->backward_fn) {
        for (Tensor& p : node->parents)
          if (p.requires_grad()) p.impl_->grad_ptr();  // ensure allocated
        node->backward_fn(*node);
      }
    }
  }

  detail::TensorImpl* impl() const { return impl_.get(); }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  void topo_collect(std::vector<detail::TensorImpl*>& order) {
    std::unordered_set<detail::TensorImpl*> visited;
    // Iterative DFS, post-order.
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::TensorImpl* child = node->parents[next].impl_.get();
        ++next;
        if (child && !visited.count(child)) {
          visited.insert(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

// Builds an op result: checks finiteness of the forward value and records the
// tape edge when grad mode is on and any parent wants gradients.
inline Tensor make_op_result(Shape shape, std::vector<double> values,
                             std::vector<Tensor> parents,
                             std::function<void(TensorImpl&)> backward,
                             const char* op_name) {
  if (!all_finite(values.data(), values.size()))
    throw NumericError(std::string(op_name) + ": non-finite result");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<std::vector<double>>(std::move(values));
  bool need = false;
  if (grad_mode_flag())
    for (const Tensor& p : parents)
      if (p.requires_grad()) need = true;
  impl->requires_grad = need;
  if (need) {
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward);
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

}  // namespace pcdt
