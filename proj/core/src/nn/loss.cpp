#include "lungtriage/nn/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lungtriage::nn {

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> p(logits.dims);
  const std::size_t s = logits.spatial();
  const int c = logits.channels();
  std::vector<double> e(static_cast<std::size_t>(c));
  for (int n = 0; n < logits.batch(); ++n) {
    for (std::size_t i = 0; i < s; ++i) {
      double m = -INFINITY;
      for (int k = 0; k < c; ++k) m = std::max(m, static_cast<double>(logits.channel(n, k)[i]));
      double z = 0.0;
      for (int k = 0; k < c; ++k) {
        e[k] = std::exp(static_cast<double>(logits.channel(n, k)[i]) - m);
        z += e[k];
      }
      for (int k = 0; k < c; ++k) p.channel(n, k)[i] = static_cast<T>(e[k] / z);
    }
  }
  return p;
}

template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad) {
  const int n = logits.batch();
  const int c = logits.channels();
  if (logits.spatial() != 1) throw ShapeMismatch("cross-entropy expects (N, C, 1, 1, 1) logits");
  if (static_cast<int>(labels.size()) != n) throw ShapeMismatch("cross-entropy: label count differs from batch");
  const Tensor<T> p = softmax_channels(logits);
  if (grad != nullptr) *grad = Tensor<T>(logits.dims);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) throw InvalidArgument("cross-entropy: label " + std::to_string(y) + " out of range");
    // log-softmax, stable when p[y] underflows
    double m = -INFINITY;
    for (int k = 0; k < c; ++k) m = std::max(m, static_cast<double>(logits.data[static_cast<std::size_t>(i) * c + k]));
    double z = 0.0;
    for (int k = 0; k < c; ++k) z += std::exp(logits.data[static_cast<std::size_t>(i) * c + k] - m);
    loss += -(logits.data[static_cast<std::size_t>(i) * c + y] - m - std::log(z));
    if (grad != nullptr) {
      for (int k = 0; k < c; ++k) {
        const std::size_t j = static_cast<std::size_t>(i) * c + k;
        grad->data[j] = static_cast<T>((p.data[j] - (k == y ? 1.0 : 0.0)) / n);
      }
    }
  }
  return loss / n;
}

template <typename T>
double segmentation_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels, Tensor<T>* grad) {
  const int n = logits.batch();
  const int c = logits.channels();
  const std::size_t s = logits.spatial();
  if (labels.size() != s * static_cast<std::size_t>(n)) throw ShapeMismatch("segmentation loss: label grid differs");
  for (auto v : labels) {
    if (v >= c) throw InvalidArgument("segmentation loss: label " + std::to_string(v) + " out of range");
  }
  const Tensor<T> p = softmax_channels(logits);

  double ce = 0.0;
  double dice_sum = 0.0;
  // dL/dp for the Dice term, per (n, k): a * g - b, with a, b constants per class.
  std::vector<double> ga(static_cast<std::size_t>(n) * c), gb(static_cast<std::size_t>(n) * c);
  const double nc = static_cast<double>(n) * c;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* lab = labels.data() + static_cast<std::size_t>(i) * s;
    for (int k = 0; k < c; ++k) {
      const T* pk = p.channel(i, k);
      double inter = 0.0, psum = 0.0, gsum = 0.0;
      for (std::size_t v = 0; v < s; ++v) {
        const bool g = lab[v] == k;
        psum += pk[v];
        if (g) {
          inter += pk[v];
          gsum += 1.0;
        }
      }
      const double u = psum + gsum + kDiceEps;
      const double num = 2.0 * inter + kDiceEps;
      dice_sum += num / u;
      ga[static_cast<std::size_t>(i) * c + k] = -(2.0 * u) / (u * u) / nc;
      gb[static_cast<std::size_t>(i) * c + k] = -num / (u * u) / nc;
    }
    for (std::size_t v = 0; v < s; ++v) {
      double pv = p.channel(i, lab[v])[v];
      ce -= std::log(std::max(pv, 1e-300));
    }
  }
  const double total_vox = static_cast<double>(s) * n;
  ce /= total_vox;
  const double dice_loss = 1.0 - dice_sum / nc;

  if (grad != nullptr) {
    *grad = Tensor<T>(logits.dims);
    std::vector<double> dp(static_cast<std::size_t>(c));
    for (int i = 0; i < n; ++i) {
      const std::uint8_t* lab = labels.data() + static_cast<std::size_t>(i) * s;
      for (std::size_t v = 0; v < s; ++v) {
        double dot = 0.0;
        for (int k = 0; k < c; ++k) {
          const double g = lab[v] == k ? 1.0 : 0.0;
          dp[k] = 0.5 * (ga[static_cast<std::size_t>(i) * c + k] * g - gb[static_cast<std::size_t>(i) * c + k]);
          dot += dp[k] * p.channel(i, k)[v];
        }
        for (int k = 0; k < c; ++k) {
          const double pk = p.channel(i, k)[v];
          const double g = lab[v] == k ? 1.0 : 0.0;
          // softmax Jacobian for the Dice part, plus the CE closed form
          grad->channel(i, k)[v] = static_cast<T>(pk * (dp[k] - dot) + 0.5 * (pk - g) / total_vox);
        }
      }
    }
  }
  return 0.5 * (dice_loss + ce);
}

template Tensor<float> softmax_channels(const Tensor<float>&);
template Tensor<double> softmax_channels(const Tensor<double>&);
template double softmax_cross_entropy(const Tensor<float>&, const std::vector<int>&, Tensor<float>*);
template double softmax_cross_entropy(const Tensor<double>&, const std::vector<int>&, Tensor<double>*);
template double segmentation_loss(const Tensor<float>&, const std::vector<std::uint8_t>&, Tensor<float>*);
template double segmentation_loss(const Tensor<double>&, const std::vector<std::uint8_t>&, Tensor<double>*);

}  // namespace lungtriage::nn
