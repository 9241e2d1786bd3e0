#pragma once

#include <vector>

#include "lungtriage/nn/tensor.hpp"

namespace lungtriage::nn {

/// Stochastic gradient descent with heavy-ball momentum:
///   v <- momentum * v + g;  w <- w - lr * v
/// Non-trainable parameters (batch-norm running statistics) are skipped.
template <typename T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, double learning_rate, double momentum)
      : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
    velocity_.reserve(params_.size());
    for (auto* p : params_) velocity_.emplace_back(p->trainable ? p->size() : 0, T(0));
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    const T lr = static_cast<T>(lr_);
    const T mu = static_cast<T>(momentum_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      if (!p->trainable) continue;
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p->size(); ++i) {
        v[i] = mu * v[i] + p->grad[i];
        p->value[i] -= lr * v[i];
      }
    }
  }

  double learning_rate() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  ParameterList<T> params_;
  double lr_;
  double momentum_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace lungtriage::nn
