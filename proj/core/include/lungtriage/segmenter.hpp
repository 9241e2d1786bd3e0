#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "lungtriage/nn/layers.hpp"
#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// 3D U-Net hyper-parameters. Level l has base_channels * 2^l output channels; the
/// first convolution of each encoder level produces half of that.
struct SegmenterConfig {
  int levels = 4;
  int in_channels = 3;
  int out_channels = 2;
  int base_channels = 16;
  std::uint64_t seed = 0;

  /// Scheme-sized output head (2 for seg2, 4 for seg4).
  static SegmenterConfig for_scheme(Scheme scheme, int base_channels = 16, std::uint64_t seed = 0);
  Scheme scheme() const;
  void validate() const;
  /// Input spatial dims must be multiples of this.
  int size_divisor() const { return 1 << (levels - 1); }
  friend bool operator==(const SegmenterConfig&, const SegmenterConfig&) = default;
};

enum class Polarity : std::uint8_t { Positive, Negative };

struct GuidanceClick {
  int x = 0;
  int y = 0;
  int z = 0;
  Polarity polarity = Polarity::Positive;
  friend bool operator==(const GuidanceClick&, const GuidanceClick&) = default;
};

/// Click-derived fields on the volume grid, x fastest.
struct GuidanceMaps {
  Shape3 shape{0, 0, 0};
  std::vector<float> positive;
  std::vector<float> negative;

  static GuidanceMaps zeros(Shape3 shape);
  friend bool operator==(const GuidanceMaps&, const GuidanceMaps&) = default;
};

inline constexpr double kDefaultGuidanceSigma = 2.0;

/// Each polarity field is the voxelwise max of exp(-|v - c|^2 / (2 sigma^2)) over that
/// polarity's clicks c, evaluated on the full grid. No clicks gives an all-zero field.
GuidanceMaps make_guidance_maps(const std::vector<GuidanceClick>& clicks, Shape3 shape,
                                double sigma_vox = kDefaultGuidanceSigma);

namespace nn {

/// 3D U-Net: each encoder level runs two 3x3x3 convolutions (BN, then ReLU) and a 2x2x2
/// max pool; each decoder level runs a 2x2x2 stride-2 up-convolution, concatenates the
/// encoder skip and two 3x3x3 convolutions. A 1x1x1 convolution gives class logits.
/// Convolutions are zero-padded so the output grid equals the input grid.
template <typename T>
class UNet3D {
 public:
  explicit UNet3D(const SegmenterConfig& config);
  ~UNet3D();
  UNet3D(UNet3D&&) noexcept;
  UNet3D& operator=(UNet3D&&) noexcept;

  const SegmenterConfig& config() const { return config_; }

  /// (N, in_channels, D, H, W) -> (N, out_channels, D, H, W) logits.
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x);
  void backward(const Tensor<T>& dlogits);

  ParameterList<T> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  int levels() const { return config_.levels; }
  int skip_connection_count() const { return config_.levels - 1; }
  /// Output channels of each encoder level (after its second convolution).
  std::vector<int> encoder_channels() const;
  /// Output channels of the first convolution of each encoder level.
  std::vector<int> encoder_first_conv_channels() const;
  int out_channels() const { return config_.out_channels; }
  int conv3_count() const;

 private:
  void check_input(const Tensor<T>& x) const;
  struct Impl;
  SegmenterConfig config_;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nn

using SegmenterModel = nn::UNet3D<float>;

/// Stacks image, positive and negative guidance into a (1, 3, nz, ny, nx) tensor.
nn::Tensor<float> make_segmenter_input(const Volume3D& normalized, const GuidanceMaps& guidance);

struct SegmentationOutput {
  /// Softmax class probabilities, (1, classes, nz, ny, nx).
  nn::Tensor<float> scores;
  SegmentationMask mask;
};

/// Argmax over channels, ties to the lower label id.
SegmentationMask argmax_mask(const nn::Tensor<float>& scores, Scheme scheme);

/// `volume_normalized` must already lie in [0, 1]. Grids that are not multiples of the
/// size divisor are zero-padded for the network and the scores cropped back.
SegmentationOutput segment(const SegmenterModel& model, const Volume3D& volume_normalized,
                           const GuidanceMaps& guidance);

}  // namespace lungtriage
