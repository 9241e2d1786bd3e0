#pragma once

#include <array>
#include <string>

#include "lungtriage/nn/tensor.hpp"
#include "lungtriage/rng.hpp"

namespace lungtriage::nn {

using Triple = std::array<int, 3>;

// Every layer exposes:
//   infer(x) const  - inference; no state is touched, safe to call concurrently.
//   forward(x)      - training pass; caches what backward() needs.
//   backward(dy)    - accumulates parameter gradients and returns dL/dx.

/// N-d convolution over (depth, height, width); 2D convolutions use a depth kernel of 1.
/// Weight layout (out, in, kd, kh, kw). Stride-1 "same" convolutions run as shifted
/// GEMMs over a zero-padded grid; everything else goes through im2col.
template <typename T>
class Conv {
 public:
  Conv() = default;
  Conv(std::string name, int in_channels, int out_channels, Triple kernel, Triple stride, Triple pad, bool bias);

  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

  /// Fan-in scaled normal init (He), bias zero.
  void init(Rng& rng);
  void collect(ParameterList<T>& out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const Triple& kernel() const { return kernel_; }
  const Triple& stride() const { return stride_; }
  Dims output_dims(const Dims& in) const;

 private:
  bool same_padding() const;
  void check_input(const Tensor<T>& x) const;

  int in_ = 0;
  int out_ = 0;
  Triple kernel_{1, 1, 1};
  Triple stride_{1, 1, 1};
  Triple pad_{0, 0, 0};
  bool has_bias_ = false;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> cached_input_;
};

/// Batch normalization over (batch, spatial) per channel. Running statistics use
/// momentum 0.1 and the unbiased batch variance.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::string name, int channels);

  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParameterList<T>& out);

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

 private:
  int channels_ = 0;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Parameter<T> running_mean_;
  Parameter<T> running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU {
 public:
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Tensor<T> cached_output_;
};

/// Max pooling; ties resolve to the first element in scan order.
template <typename T>
class MaxPool {
 public:
  MaxPool() = default;
  MaxPool(Triple kernel, Triple stride, Triple pad) : kernel_(kernel), stride_(stride), pad_(pad) {}

  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  Dims output_dims(const Dims& in) const;

 private:
  Tensor<T> run(const Tensor<T>& x, std::vector<std::size_t>* argmax) const;

  Triple kernel_{2, 2, 2};
  Triple stride_{2, 2, 2};
  Triple pad_{0, 0, 0};
  Dims input_dims_{};
  std::vector<std::size_t> argmax_;
};

/// Transposed convolution whose kernel equals its stride (non-overlapping up-sampling).
/// Weight layout (in, out, kd, kh, kw).
template <typename T>
class UpConv {
 public:
  UpConv() = default;
  UpConv(std::string name, int in_channels, int out_channels, Triple kernel);

  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void init(Rng& rng);
  void collect(ParameterList<T>& out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  int in_ = 0;
  int out_ = 0;
  Triple kernel_{2, 2, 2};
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> cached_input_;
};

template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);

 private:
  Dims input_dims_{};
};

/// Fully connected layer on (N, C, 1, 1, 1) inputs. Weight layout (out, in).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features);

  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  Tensor<T> backward(const Tensor<T>& dy);
  void init(Rng& rng);
  void collect(ParameterList<T>& out);

  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0;
  int out_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> cached_input_;
};

}  // namespace lungtriage::nn
