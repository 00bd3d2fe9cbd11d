#pragma once

// RMSprop with per-parameter accumulators:
//   acc <- decay * acc + (1 - decay) * g^2
//   p   <- p - lr * g / (sqrt(acc) + eps)

#include <cmath>
#include <vector>

#include "ctrlnerf/autodiff.hpp"
#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

template <typename S>
class RmsProp {
 public:
  RmsProp(std::vector<ad::Tensor<S>> params, S lr, S decay = S(0.99), S eps = S(1e-8))
      : params_(std::move(params)), lr_(lr), decay_(decay), eps_(eps) {
    acc_.reserve(params_.size());
    for (const auto& p : params_) acc_.emplace_back(p.numel(), S(0));
  }

  // Apply one update from the gradients currently stored on the parameters,
  // then clear them. A parameter with no gradient means the loss did not
  // reach it — a wiring bug, so it throws rather than silently skipping.
  void step() {
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad())
        throw ContractViolation("RmsProp::step: parameter " + std::to_string(p.id()) +
                                " has no gradient");
      auto g = p.grad();
      auto v = p.values_mut();
      auto& acc = acc_[k];
      for (size_t i = 0; i < v.size(); ++i) {
        acc[i] = decay_ * acc[i] + (S(1) - decay_) * g[i] * g[i];
        v[i] -= lr_ * g[i] / (std::sqrt(acc[i]) + eps_);
        if (!std::isfinite(v[i])) throw NumericError("RmsProp::step: non-finite parameter");
      }
      p.zero_grad();
    }
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<ad::Tensor<S>>& params() const { return params_; }
  std::vector<std::vector<S>>& accumulators() { return acc_; }
  S lr() const { return lr_; }
  void set_lr(S lr) { lr_ = lr; }

 private:
  std::vector<ad::Tensor<S>> params_;
  std::vector<std::vector<S>> acc_;
  S lr_, decay_, eps_;
};

}  // namespace ctrlnerf
