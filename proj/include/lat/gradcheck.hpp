#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lat/tensor.hpp"

namespace lat {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Error per entry is |a - n| / max(1, |a|, |n|).
inline GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                         double eps = 1e-5) {
  if (eps <= 0) throw ContractError("finite_diff_check: eps must be positive");
  for (auto& p : params) p.zero_grad();
  Tensor loss = f();
  bool any_grad = loss.requires_grad();
  std::vector<std::vector<double>> analytic(params.size());
  if (any_grad) backward(loss);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].has_grad()) {
      analytic[k].assign(params[k].grad().begin(), params[k].grad().end());
    } else {
      analytic[k].assign(params[k].numel(), 0.0);
    }
    params[k].zero_grad();
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto vals = params[k].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double orig = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = orig + eps;
        fp = f().item();
        vals[i] = orig - eps;
        fm = f().item();
      }
      vals[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[k][i];
      double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.entries_checked;
    }
  }
  return result;
}

}  // namespace lat
