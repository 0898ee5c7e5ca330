#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lat/tensor.hpp"

namespace lat {

struct AdamConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// Bias-corrected Adam over a fixed list of parameters. Gradients are read
/// from the tensors and reset once consumed.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)) {
    state_.config = config;
    for (const auto& p : params_) {
      state_.first_moment.emplace_back(p.numel(), 0.0);
      state_.second_moment.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    // Validate every gradient before touching any parameter.
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) {
        if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient");
      }
    }
    ++state_.step_count;
    const auto& c = state_.config;
    double t = static_cast<double>(state_.step_count);
    double bc1 = 1.0 - std::pow(c.beta1, t);
    double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = p.mutable_values();
      auto& m1 = state_.first_moment[k];
      auto& m2 = state_.second_moment[k];
      for (std::size_t i = 0; i < v.size(); ++i) {
        m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * g[i];
        m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * g[i] * g[i];
        double mhat = m1[i] / bc1;
        double vhat = m2[i] / bc2;
        v[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamState& state() const { return state_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

}  // namespace lat
