#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lungtriage/nn/tensor.hpp"
#include "lungtriage/rng.hpp"

namespace lungtriage::testing {

struct GradientProbe {
  std::string parameter;
  std::size_t index = 0;
  double numeric = 0.0;
  double analytic = 0.0;
  double relative = 0.0;
};

inline double relative_difference(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares analytic parameter gradients of `loss(model.forward(x))` with central differences
/// at `count` random trainable entries. `loss` writes dL/doutput when its pointer is non-null.
/// Entries whose gradient magnitude is below `min_magnitude` sit under the finite-difference
/// noise floor and are redrawn.
template <class Model>
std::vector<GradientProbe> check_network_gradients(
    Model& model, const nn::Tensor<double>& x,
    const std::function<double(const nn::Tensor<double>&, nn::Tensor<double>*)>& loss, int count, std::uint64_t seed,
    double step = 1e-7, double min_magnitude = 1e-5) {
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  nn::Tensor<double> g;
  loss(model.forward(x), &g);
  model.backward(g);

  std::vector<nn::Parameter<double>*> trainable;
  for (auto* p : params)
    if (p->trainable) trainable.push_back(p);
  Rng rng(seed);
  std::vector<GradientProbe> out;
  while (static_cast<int>(out.size()) < count) {
    auto* p = trainable[rng.uniform_int(0, static_cast<int>(trainable.size()) - 1)];
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p->size()) - 1));
    if (std::abs(p->grad[i]) < min_magnitude) continue;
    const double orig = p->value[i];
    p->value[i] = orig + step;
    const double lp = loss(model.forward(x), nullptr);
    p->value[i] = orig - step;
    const double lm = loss(model.forward(x), nullptr);
    p->value[i] = orig;
    GradientProbe probe{p->name, i, (lp - lm) / (2.0 * step), p->grad[i], 0.0};
    probe.relative = relative_difference(probe.numeric, probe.analytic, min_magnitude);
    out.push_back(probe);
  }
  return out;
}

inline double worst_relative(const std::vector<GradientProbe>& probes) {
  double w = 0.0;
  for (const auto& p : probes) w = std::max(w, p.relative);
  return w;
}

}  // namespace lungtriage::testing
