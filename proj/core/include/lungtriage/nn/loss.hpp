#pragma once

#include <cstdint>
#include <vector>

#include "lungtriage/nn/tensor.hpp"

namespace lungtriage::nn {

/// Row-wise softmax over the channel axis, per spatial position.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Mean cross-entropy of (N, C, 1, 1, 1) logits against class indices.
/// Writes dL/dlogits into `grad` when non-null.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* grad = nullptr);

/// Segmentation loss: 0.5 * (soft Dice loss + voxel cross-entropy).
///
/// Soft Dice is computed per sample and class on softmax probabilities,
///   D = (2 sum(p g) + eps) / (sum p + sum g + eps),
/// and the Dice loss is 1 - mean D over samples and all classes. Cross-entropy is the
/// mean over samples and voxels. `labels` holds N * spatial ids in tensor order.
template <typename T>
double segmentation_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels, Tensor<T>* grad = nullptr);

inline constexpr double kDiceEps = 1e-5;

}  // namespace lungtriage::nn
