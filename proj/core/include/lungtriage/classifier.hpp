#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "lungtriage/nn/layers.hpp"
#include "lungtriage/transforms.hpp"
#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// ResNet-50 hyper-parameters. `width` is the stem channel count (64 in the standard
/// network); stage s has width * 2^s bottleneck planes and 4x as many output channels.
struct ClassifierConfig {
  int num_classes = kNumClasses;
  std::array<int, 4> stage_block_counts{3, 4, 6, 3};
  int width = 64;
  int input_size = kClassifierInputSize;
  std::uint64_t seed = 0;

  void validate() const;
  /// 1 + 3 * sum(stage_block_counts); projection shortcuts are counted separately.
  int conv_layer_count() const;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// Probabilities over {COVID, Pneumonia, Normal}, indexed by ClassLabel.
struct ClassProbabilities {
  std::array<double, kNumClasses> p{0.0, 0.0, 0.0};

  double operator[](ClassLabel label) const { return p[static_cast<int>(label)]; }
  /// Highest probability; ties go to the earlier class (COVID, then Pneumonia, then Normal).
  ClassLabel argmax() const;
  friend bool operator==(const ClassProbabilities&, const ClassProbabilities&) = default;
};

namespace nn {

/// ResNet-50 (bottleneck v1.5: stride on the 3x3 convolution) over 2D slices.
/// Stem: 7x7/2 conv, BN, ReLU, 3x3/2 max pool. Four bottleneck stages, global
/// average pooling and one fully connected layer.
template <typename T>
class ResNet50 {
 public:
  explicit ResNet50(const ClassifierConfig& config);
  ~ResNet50();
  ResNet50(ResNet50&&) noexcept;
  ResNet50& operator=(ResNet50&&) noexcept;

  const ClassifierConfig& config() const { return config_; }

  /// (N, 3, 1, S, S) -> (N, classes, 1, 1, 1) logits.
  Tensor<T> infer(const Tensor<T>& x) const;
  /// Final stage output before pooling, (N, 32 * width, 1, S/32, S/32).
  Tensor<T> infer_features(const Tensor<T>& x) const;

  Tensor<T> forward(const Tensor<T>& x);
  void backward(const Tensor<T>& dlogits);

  ParameterList<T> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  int conv_layer_count() const;
  int projection_conv_count() const;
  int fc_layer_count() const { return 1; }
  std::vector<int> stage_block_counts() const;
  /// Channels, height, width of the pre-pool feature map for a square input.
  std::array<int, 3> feature_shape(int input_size) const;

 private:
  struct Impl;
  ClassifierConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nn

using ClassifierModel = nn::ResNet50<float>;

/// Interleaved HWC image to a (1, C, 1, H, W) tensor.
nn::Tensor<float> slice_to_tensor(const SliceImage2D& image);

ClassProbabilities probabilities_from_logits(const float* logits, int count);

/// Requires an input_size x input_size x 3 image in [0, 1].
ClassProbabilities classify_slice(const ClassifierModel& model, const SliceImage2D& slice224);

/// Mean of slice probabilities.
ClassProbabilities aggregate_probabilities(const std::vector<ClassProbabilities>& slices);

struct VolumeClassification {
  ClassProbabilities probabilities;
  ClassLabel predicted = ClassLabel::Normal;
  std::vector<ClassProbabilities> per_slice;
};

/// Normalizes with `window`, classifies every axial (z) slice and averages.
VolumeClassification classify_volume(const ClassifierModel& model, const Volume3D& volume,
                                     const IntensityWindow& window = {});

}  // namespace lungtriage
