#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lungtriage/types.hpp"

namespace lungtriage {

using Vec3 = std::array<double, 3>;
/// Direction cosines, column j is the world direction of voxel axis j.
using Mat3 = std::array<std::array<double, 3>, 3>;

inline constexpr Mat3 kIdentity3{{{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}};

/// Linear voxel index; x is the fastest-varying axis, z the slowest.
inline std::size_t linear_index(const Shape3& shape, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(shape[0]) *
             (static_cast<std::size_t>(y) + static_cast<std::size_t>(shape[1]) * static_cast<std::size_t>(z));
}

inline bool in_bounds(const Shape3& shape, int x, int y, int z) {
  return x >= 0 && y >= 0 && z >= 0 && x < shape[0] && y < shape[1] && z < shape[2];
}

/// 3D scalar CT volume with physical geometry. Intensities are float32 in Hounsfield
/// units until normalized, unitless afterwards.
class Volume3D {
 public:
  Volume3D() = default;

  /// Zero-filled volume with unit spacing, zero origin and identity orientation.
  explicit Volume3D(Shape3 shape);

  Volume3D(Shape3 shape, std::vector<float> voxels, Vec3 spacing = {1.0, 1.0, 1.0},
           Vec3 origin = {0.0, 0.0, 0.0}, Mat3 orientation = kIdentity3);

  const Shape3& shape() const { return shape_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  const Mat3& orientation() const { return orientation_; }
  std::size_t size() const { return voxels_.size(); }

  std::span<const float> voxels() const { return voxels_; }
  std::span<float> voxels() { return voxels_; }

  float at(int x, int y, int z) const { return voxels_[linear_index(shape_, x, y, z)]; }
  float& at(int x, int y, int z) { return voxels_[linear_index(shape_, x, y, z)]; }

  /// Copy of geometry with different voxel content (same shape required).
  Volume3D with_voxels(std::vector<float> voxels) const;

  void set_geometry(Vec3 spacing, Vec3 origin, Mat3 orientation);

  /// Throws InvalidArgument when an invariant is broken (dims, spacing, finiteness,
  /// orthonormal orientation).
  void validate() const;

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

 private:
  Shape3 shape_{0, 0, 0};
  Vec3 spacing_{1.0, 1.0, 1.0};
  Vec3 origin_{0.0, 0.0, 0.0};
  Mat3 orientation_ = kIdentity3;
  std::vector<float> voxels_;
};

/// 2D image, channel-interleaved: pixel (row, col, ch) at (row * width + col) * channels + ch.
struct SliceImage2D {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> pixels;

  SliceImage2D() = default;
  SliceImage2D(int h, int w, int c) : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  float at(int row, int col, int ch = 0) const {
    return pixels[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  float& at(int row, int col, int ch = 0) {
    return pixels[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }

  void validate() const;

  friend bool operator==(const SliceImage2D&, const SliceImage2D&) = default;
};

/// Per-voxel label ids on a volume grid, tagged with the label scheme.
struct SegmentationMask {
  Shape3 shape{0, 0, 0};
  Scheme scheme = Scheme::Seg4;
  std::vector<std::uint8_t> labels;

  SegmentationMask() = default;
  SegmentationMask(Shape3 s, Scheme sc) : shape(s), scheme(sc), labels(voxel_count(s), 0) {}

  std::uint8_t at(int x, int y, int z) const { return labels[linear_index(shape, x, y, z)]; }
  std::uint8_t& at(int x, int y, int z) { return labels[linear_index(shape, x, y, z)]; }

  /// Throws InvalidArgument when a label id falls outside the scheme.
  void validate() const;

  /// Voxel count per label id, indexed by id.
  std::vector<std::size_t> label_histogram() const;

  friend bool operator==(const SegmentationMask&, const SegmentationMask&) = default;
};

/// seg4 -> seg2: lesion (3) becomes 1, everything else background.
SegmentationMask to_seg2(const SegmentationMask& seg4);

}  // namespace lungtriage
