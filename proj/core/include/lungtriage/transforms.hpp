#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// CT display/normalization window in Hounsfield units.
struct IntensityWindow {
  double hu_min = -1000.0;
  double hu_max = 400.0;

  void validate() const;
  friend bool operator==(const IntensityWindow&, const IntensityWindow&) = default;
};

/// Clamp to the window, then map linearly onto [0, 1]. Geometry is preserved.
Volume3D normalize_intensity(const Volume3D& volume, const IntensityWindow& window);

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  bool degenerate() const { return lo == hi; }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Position and color augmentation settings. Every transform defaults to identity.
///
/// Position transforms are composed into one resampling: a point p moves to
///   flip(C + (s * R(theta) + J) * (p - C) + t)
/// where C is the grid center, s the isotropic scale, R an in-plane (x-y) rotation,
/// J the affine jitter matrix and t the translation. Crop and pad follow, then contrast
/// and grayscale on the image only. Images are sampled linearly, masks by nearest
/// neighbour; samples falling outside the source grid take `fill_value` (image) or
/// label 0 (mask).
struct AugmentationPolicy {
  Range scale{1.0, 1.0};
  std::optional<Shape3> crop_size;
  std::vector<Axis> flip_axes;
  double flip_probability = 0.5;
  std::optional<Shape3> pad_to;
  Range rotation_deg{0.0, 0.0};
  Range translation_vox{0.0, 0.0};
  /// Each affine matrix entry is perturbed uniformly within [-affine_jitter, affine_jitter].
  double affine_jitter = 0.0;
  bool grayscale = false;
  Range contrast{1.0, 1.0};
  /// Padding value; 0 is the window minimum after normalization.
  double fill_value = 0.0;
  std::set<SplitRole> apply_roles{SplitRole::Train, SplitRole::Validation};

  void validate() const;
  bool applies_to(SplitRole role) const { return apply_roles.count(role) != 0; }
  /// True when no enabled transform can change a sample.
  bool is_identity() const;
  friend bool operator==(const AugmentationPolicy&, const AugmentationPolicy&) = default;
};

struct VolumeSample {
  Volume3D image;
  std::optional<SegmentationMask> mask;
};

/// Seeded augmentation. The test role, and any role outside `policy.apply_roles`, returns
/// the sample unchanged. Image and mask share one geometric transform.
VolumeSample augment(const VolumeSample& sample, const AugmentationPolicy& policy, SplitRole role,
                     std::uint64_t seed);

/// 2D variant used for classifier slices (z-only transforms are ignored).
SliceImage2D augment(const SliceImage2D& image, const AugmentationPolicy& policy, SplitRole role,
                     std::uint64_t seed);

/// Number of augment() calls that actually transformed a sample in this process.
std::uint64_t augmentation_applications();

/// Planes of `volume` along `axis`; all planes when `indices` is empty.
/// Plane orientation: axis z -> rows y, cols x; axis y -> rows z, cols x; axis x -> rows z, cols y.
std::vector<SliceImage2D> extract_slices(const Volume3D& volume, Axis axis, const std::vector<int>& indices = {});
SliceImage2D extract_slice(const Volume3D& volume, Axis axis, int index);

/// Mask plane with the same orientation convention as extract_slice.
std::vector<std::uint8_t> extract_mask_plane(const SegmentationMask& mask, Axis axis, int index, int& rows, int& cols);

inline constexpr int kClassifierInputSize = 224;

/// Bilinear resize (half-pixel centers) to size x size, 1 -> 3 channel replication,
/// clamped to [0, 1].
SliceImage2D prepare_classifier_input(const SliceImage2D& slice, int size = kClassifierInputSize);

/// Bilinear resize with half-pixel centers; identical sizes give an exact copy.
SliceImage2D resize_bilinear(const SliceImage2D& slice, int out_height, int out_width);

}  // namespace lungtriage
