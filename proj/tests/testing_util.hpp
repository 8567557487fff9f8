#pragma once

#include <functional>
#include <vector>

#include "dupmn/rng.hpp"
#include "dupmn/tensor.hpp"

namespace dupmn::testing {

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  return Tensor::from(shape, random_values(numel(shape), rng, lo, hi), requires_grad);
}

/// Central finite-difference gradient check. `build` maps fresh leaf tensors
/// to a scalar loss; the oracle never looks at the backward pass it verifies,
/// it only re-runs forward math at perturbed inputs.
inline double max_fd_rel_error(
    const std::function<Tensor(const std::vector<Tensor>&)>& build,
    const std::vector<Shape>& shapes, const std::vector<std::vector<double>>& values,
    double eps = 1e-5) {
  std::vector<Tensor> leaves;
  leaves.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    leaves.push_back(Tensor::from(shapes[i], values[i], /*requires_grad=*/true));
  }
  const Tensor loss = build(leaves);
  backward(loss);

  const auto loss_at = [&](const std::vector<std::vector<double>>& vals) {
    NoGradGuard no_grad;
    std::vector<Tensor> fresh;
    fresh.reserve(shapes.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      fresh.push_back(Tensor::from(shapes[i], vals[i]));
    }
    return build(fresh).value();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& analytic = leaves[i].has_grad() ? leaves[i].grad()
                                                : std::vector<double>(numel(shapes[i]), 0.0);
    for (std::size_t j = 0; j < analytic.size(); ++j) {
      auto plus = values;
      auto minus = values;
      plus[i][j] += eps;
      minus[i][j] -= eps;
      const double numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * eps);
      const double denom = std::max(std::abs(analytic[j]) + std::abs(numeric), 1e-6);
      const double rel = std::abs(analytic[j] - numeric) / denom;
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

inline double max_fd_rel_error(const std::function<Tensor(const std::vector<Tensor>&)>& build,
                               const std::vector<Shape>& shapes, Rng& rng, double eps = 1e-5) {
  std::vector<std::vector<double>> values;
  values.reserve(shapes.size());
  for (const Shape& s : shapes) values.push_back(random_values(numel(s), rng));
  return max_fd_rel_error(build, shapes, values, eps);
}

/// Finite-difference check against live parameter tensors: `build` rebuilds
/// the forward graph from the same leaves, so perturbing a leaf in place and
/// re-running gives the numeric derivative.
inline double max_fd_rel_error_params(const std::function<Tensor()>& build,
                                      const std::vector<Tensor*>& params, double eps = 1e-5) {
  for (Tensor* p : params) p->zero_grad();
  const Tensor loss = build();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) {
    analytic.push_back(p->has_grad() ? p->grad() : std::vector<double>(p->size(), 0.0));
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i]->mutable_values();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double original = data[j];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        data[j] = original + eps;
        plus = build().value();
        data[j] = original - eps;
        minus = build().value();
        data[j] = original;
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[i][j];
      const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-6);
      const double rel = std::abs(a - numeric) / denom;
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace dupmn::testing
