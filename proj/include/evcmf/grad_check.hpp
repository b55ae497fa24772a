#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "evcmf/param_store.hpp"

namespace evcmf {

struct GradCheckOptions {
  double eps = 1e-6;
  /// Elements checked per parameter tensor; 0 checks all of them.
  std::size_t max_elements_per_param = 0;
  std::uint64_t seed = 0;
};

struct ParamGradError {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares reverse-mode gradients of a scalar function of the parameters
/// against central differences (f(p + eps) - f(p - eps)) / (2 eps).
inline GradCheckReport grad_check(ParamStore<double>& params,
                                  const std::function<Tensor<double>(const ParamStore<double>&)>& f,
                                  const GradCheckOptions& options = {}) {
  if (!(options.eps >= 1e-6 && options.eps <= 1e-3)) {
    throw ConfigError("grad_check: eps must lie in [1e-6, 1e-3]");
  }
  auto evaluate = [&]() {
    NoGradGuard guard;
    const double v = f(params).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };

  params.zero_grad();
  const Tensor<double> out = f(params);
  if (!std::isfinite(out.item())) throw NumericError("grad_check: objective is not finite");
  out.backward();

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& param = params.tensor(p);
    std::vector<double> analytic(param.size(), 0.0);
    if (param.has_grad()) std::copy(param.grad().begin(), param.grad().end(), analytic.begin());

    std::vector<std::size_t> indices(param.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_elements_per_param && indices.size() > options.max_elements_per_param) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(options.max_elements_per_param);
      std::sort(indices.begin(), indices.end());
    }

    ParamGradError entry{params.names()[p], indices.size()};
    auto values = param.mutable_data();
    for (auto i : indices) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double plus = evaluate();
      values[i] = saved - options.eps;
      const double minus = evaluate();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = relative_error(analytic[i], numeric);
      if (err >= entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.analytic_at_worst = analytic[i];
        entry.numeric_at_worst = numeric;
      }
    }
    report.params.push_back(entry);
  }
  return report;
}

}  // namespace evcmf
