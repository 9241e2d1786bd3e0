#include "lungtriage/volume.hpp"

#include <cmath>

namespace lungtriage {

Volume3D::Volume3D(Shape3 shape) : shape_(shape), voxels_(voxel_count(shape), 0.0f) { validate(); }

Volume3D::Volume3D(Shape3 shape, std::vector<float> voxels, Vec3 spacing, Vec3 origin, Mat3 orientation)
    : shape_(shape), spacing_(spacing), origin_(origin), orientation_(orientation), voxels_(std::move(voxels)) {
  validate();
}

Volume3D Volume3D::with_voxels(std::vector<float> voxels) const {
  return Volume3D(shape_, std::move(voxels), spacing_, origin_, orientation_);
}

void Volume3D::set_geometry(Vec3 spacing, Vec3 origin, Mat3 orientation) {
  spacing_ = spacing;
  origin_ = origin;
  orientation_ = orientation;
  validate();
}

void Volume3D::validate() const {
  for (int d : shape_) {
    if (d < 1) throw InvalidArgument("volume dimensions must be >= 1, got " + shape_string(shape_));
  }
  if (voxels_.size() != voxel_count(shape_)) {
    throw InvalidArgument("voxel buffer size does not match shape " + shape_string(shape_));
  }
  for (double s : spacing_) {
    if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("voxel spacing must be positive and finite");
  }
  for (double o : origin_) {
    if (!std::isfinite(o)) throw InvalidArgument("origin must be finite");
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int r = 0; r < 3; ++r) dot += orientation_[r][i] * orientation_[r][j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-6) {
        throw InvalidArgument("orientation matrix columns are not orthonormal");
      }
    }
  }
  for (float v : voxels_) {
    if (!std::isfinite(v)) throw InvalidArgument("volume contains non-finite voxel values");
  }
}

void SliceImage2D::validate() const {
  if (height < 1 || width < 1) throw InvalidArgument("slice must be at least 1x1");
  if (channels != 1 && channels != 3) throw InvalidArgument("slice channels must be 1 or 3");
  if (pixels.size() != static_cast<std::size_t>(height) * width * channels) {
    throw InvalidArgument("slice pixel buffer size mismatch");
  }
  for (float v : pixels) {
    if (!std::isfinite(v)) throw InvalidArgument("slice contains non-finite values");
  }
}

void SegmentationMask::validate() const {
  const int n = label_count(scheme);
  if (labels.size() != voxel_count(shape)) throw InvalidArgument("mask buffer size does not match shape");
  for (auto l : labels) {
    if (l >= n) {
      throw InvalidArgument("label id " + std::to_string(l) + " outside scheme " + std::string(to_string(scheme)));
    }
  }
}

std::vector<std::size_t> SegmentationMask::label_histogram() const {
  std::vector<std::size_t> hist(static_cast<std::size_t>(label_count(scheme)), 0);
  for (auto l : labels) {
    if (l < hist.size()) ++hist[l];
  }
  return hist;
}

SegmentationMask to_seg2(const SegmentationMask& seg4) {
  if (seg4.scheme == Scheme::Seg2) return seg4;
  SegmentationMask out(seg4.shape, Scheme::Seg2);
  for (std::size_t i = 0; i < seg4.labels.size(); ++i) out.labels[i] = seg4.labels[i] == 3 ? 1 : 0;
  return out;
}

}  // namespace lungtriage
