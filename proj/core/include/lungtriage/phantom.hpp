#pragma once

#include <cstdint>

#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// Lesion appearance. Patchy: uniform ground-glass blobs (COVID stand-in).
/// Diffuse: denser blobs whose offset falls off towards the rim (pneumonia stand-in).
enum class LesionTexture : std::uint8_t { Patchy, Diffuse };

/// Parameters of a synthetic chest CT phantom.
///
/// Intensities are generated in Hounsfield units: air -1000, soft tissue 40, lung -850.
/// Lesions add `lesion_intensity` (normalized units, i.e. fractions of the default
/// 1400 HU window) to the lung value; `noise_sigma` is also in normalized units.
/// Lesion/lung separation of at least lesion_intensity / 2 holds for
/// noise_sigma <= lesion_intensity / 4.
struct PhantomSpec {
  ClassLabel class_label = ClassLabel::Covid;
  Shape3 shape{64, 64, 64};
  Vec3 spacing{1.0, 1.0, 1.0};
  /// Left lung occupies the larger-x half. Centers and radii in voxels.
  Vec3 left_lung_center{0.0, 0.0, 0.0};
  Vec3 right_lung_center{0.0, 0.0, 0.0};
  Vec3 lung_radii{0.0, 0.0, 0.0};
  int lesion_count_min = 2;
  int lesion_count_max = 4;
  double lesion_radius_min = 3.0;
  double lesion_radius_max = 6.0;
  double lesion_intensity = 0.30;
  LesionTexture texture = LesionTexture::Patchy;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;

  /// Class-conditional defaults with lungs sized to `shape`.
  static PhantomSpec for_class(ClassLabel label, Shape3 shape, std::uint64_t seed);

  void validate() const;
};

struct Phantom {
  Volume3D volume;
  /// seg4 labels: 0 background, 1 left lung, 2 right lung, 3 lesion.
  SegmentationMask mask;
  ClassLabel class_label = ClassLabel::Normal;
  int lesion_count = 0;
};

inline constexpr double kAirHu = -1000.0;
inline constexpr double kTissueHu = 40.0;
inline constexpr double kLungHu = -850.0;
inline constexpr double kWindowWidthHu = 1400.0;

/// Deterministic in `spec`. The first lesion is centered on the central axial plane so
/// the middle slice of a non-normal phantom always shows pathology.
Phantom generate_phantom(const PhantomSpec& spec);

}  // namespace lungtriage
