#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "lungtriage/types.hpp"

namespace lungtriage::nn {

/// (batch, channels, depth, height, width). 2D feature maps use depth 1.
using Dims = std::array<int, 5>;

inline std::size_t numel(const Dims& d) {
  std::size_t n = 1;
  for (int v : d) n *= static_cast<std::size_t>(v);
  return n;
}

std::string dims_string(const Dims& d);

/// Dense NCDHW tensor, row-major (w fastest).
template <typename T>
struct Tensor {
  Dims dims{0, 0, 0, 0, 0};
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Dims d, T fill = T(0)) : dims(d), data(numel(d), fill) {}

  int batch() const { return dims[0]; }
  int channels() const { return dims[1]; }
  int depth() const { return dims[2]; }
  int height() const { return dims[3]; }
  int width() const { return dims[4]; }
  std::size_t spatial() const { return static_cast<std::size_t>(dims[2]) * dims[3] * dims[4]; }
  std::size_t sample_size() const { return spatial() * static_cast<std::size_t>(dims[1]); }
  std::size_t size() const { return data.size(); }

  T* sample(int n) { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
  const T* sample(int n) const { return data.data() + static_cast<std::size_t>(n) * sample_size(); }
  T* channel(int n, int c) { return sample(n) + static_cast<std::size_t>(c) * spatial(); }
  const T* channel(int n, int c) const { return sample(n) + static_cast<std::size_t>(c) * spatial(); }
};

/// Trainable weight or persistent buffer (e.g. batch-norm running statistics).
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool train = true) : name(std::move(n)), shape(std::move(s)), trainable(train) {
    std::size_t count = 1;
    for (int v : shape) count *= static_cast<std::size_t>(v);
    value.assign(count, T(0));
    if (trainable) grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Channel concatenation [a, b] per sample.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Inverse of concat_channels for gradients.
template <typename T>
void split_channels(const Tensor<T>& g, int channels_a, Tensor<T>& ga, Tensor<T>& gb);

}  // namespace lungtriage::nn
