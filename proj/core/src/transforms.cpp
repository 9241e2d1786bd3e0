#include "lungtriage/transforms.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "lungtriage/rng.hpp"

namespace lungtriage {

namespace {

std::atomic<std::uint64_t> g_applied{0};

/// Channel-major float grid; channel c occupies [c * N, (c + 1) * N).
struct Grid {
  int channels = 1;
  Shape3 shape{1, 1, 1};
  std::vector<float> data;

  std::size_t plane() const { return voxel_count(shape); }
};

struct LabelGrid {
  Shape3 shape{1, 1, 1};
  std::vector<std::uint8_t> data;
};

using Mat = std::array<std::array<double, 3>, 3>;

Mat inverse(const Mat& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  if (std::abs(det) < 1e-8) throw InvalidArgument("augmentation produced a singular affine transform");
  Mat inv{};
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return inv;
}

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-6 ? r : v;
}

struct DrawnTransform {
  Mat forward{};
  Vec3 translation{0.0, 0.0, 0.0};
  std::array<bool, 3> flip{false, false, false};
  double contrast = 1.0;
  bool identity_geometry = true;
};

DrawnTransform draw(const AugmentationPolicy& policy, Rng& rng, bool planar) {
  DrawnTransform t;
  const double s = rng.uniform(policy.scale.lo, policy.scale.hi);
  const double theta = rng.uniform(policy.rotation_deg.lo, policy.rotation_deg.hi) * std::numbers::pi / 180.0;
  for (int a = 0; a < 3; ++a) {
    const double v = rng.uniform(policy.translation_vox.lo, policy.translation_vox.hi);
    t.translation[a] = (planar && a == 2) ? 0.0 : v;
  }
  Mat jitter{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      const double v = rng.uniform(-policy.affine_jitter, policy.affine_jitter);
      jitter[r][c] = (planar && (r == 2 || c == 2)) ? 0.0 : v;
    }
  }
  for (Axis axis : policy.flip_axes) {
    const bool f = rng.bernoulli(policy.flip_probability);
    if (!(planar && axis == Axis::Z)) t.flip[static_cast<int>(axis)] = t.flip[static_cast<int>(axis)] != f;
  }
  t.contrast = rng.uniform(policy.contrast.lo, policy.contrast.hi);

  const double c = std::cos(theta);
  const double sn = std::sin(theta);
  const Mat rot{{{c, -sn, 0.0}, {sn, c, 0.0}, {0.0, 0.0, 1.0}}};
  bool identity = true;
  for (int r = 0; r < 3; ++r) {
    for (int k = 0; k < 3; ++k) {
      t.forward[r][k] = s * rot[r][k] + jitter[r][k];
      if (t.forward[r][k] != (r == k ? 1.0 : 0.0)) identity = false;
    }
  }
  for (int a = 0; a < 3; ++a) {
    if (t.translation[a] != 0.0 || t.flip[a]) identity = false;
  }
  t.identity_geometry = identity;
  return t;
}

float sample_linear(const float* plane, const Shape3& shape, double x, double y, double z, float fill) {
  if (x < 0.0 || y < 0.0 || z < 0.0 || x > shape[0] - 1 || y > shape[1] - 1 || z > shape[2] - 1) return fill;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int z0 = static_cast<int>(std::floor(z));
  const int x1 = std::min(x0 + 1, shape[0] - 1);
  const int y1 = std::min(y0 + 1, shape[1] - 1);
  const int z1 = std::min(z0 + 1, shape[2] - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double fz = z - z0;
  const auto v = [&](int xi, int yi, int zi) { return static_cast<double>(plane[linear_index(shape, xi, yi, zi)]); };
  // Nested lerps keep constant neighbourhoods exactly constant.
  const auto lerp = [](double a, double b, double f) { return a == b ? a : a + f * (b - a); };
  const double c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), fx);
  const double c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), fx);
  const double c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), fx);
  const double c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), fx);
  return static_cast<float>(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz));
}

void apply_geometry(Grid& image, LabelGrid* mask, const DrawnTransform& t, float fill) {
  if (t.identity_geometry) return;
  const Shape3 shape = image.shape;
  const Mat inv = inverse(t.forward);
  const Vec3 center{(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0};
  Grid out{image.channels, shape, std::vector<float>(image.data.size())};
  LabelGrid mout;
  if (mask != nullptr) mout = LabelGrid{shape, std::vector<std::uint8_t>(mask->data.size(), 0)};
  const std::size_t n = image.plane();
  for (int z = 0; z < shape[2]; ++z) {
    for (int y = 0; y < shape[1]; ++y) {
      for (int x = 0; x < shape[0]; ++x) {
        std::array<double, 3> q{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        for (int a = 0; a < 3; ++a) {
          if (t.flip[a]) q[a] = shape[a] - 1 - q[a];
          q[a] -= center[a] + t.translation[a];
        }
        std::array<double, 3> p{};
        for (int r = 0; r < 3; ++r) {
          p[r] = snap(center[r] + inv[r][0] * q[0] + inv[r][1] * q[1] + inv[r][2] * q[2]);
        }
        const std::size_t o = linear_index(shape, x, y, z);
        for (int c = 0; c < image.channels; ++c) {
          out.data[c * n + o] = sample_linear(image.data.data() + c * n, shape, p[0], p[1], p[2], fill);
        }
        if (mask != nullptr) {
          const int xi = static_cast<int>(std::floor(p[0] + 0.5));
          const int yi = static_cast<int>(std::floor(p[1] + 0.5));
          const int zi = static_cast<int>(std::floor(p[2] + 0.5));
          if (in_bounds(shape, xi, yi, zi)) mout.data[o] = mask->data[linear_index(shape, xi, yi, zi)];
        }
      }
    }
  }
  image = std::move(out);
  if (mask != nullptr) *mask = std::move(mout);
}

template <typename T>
std::vector<T> copy_box(const std::vector<T>& src, const Shape3& src_shape, int channels, const Shape3& dst_shape,
                        const std::array<int, 3>& src_offset, const std::array<int, 3>& dst_offset, T fill) {
  std::vector<T> dst(voxel_count(dst_shape) * channels, fill);
  const std::size_t sn = voxel_count(src_shape);
  const std::size_t dn = voxel_count(dst_shape);
  std::array<int, 3> extent{};
  for (int a = 0; a < 3; ++a) {
    extent[a] = std::min(src_shape[a] - src_offset[a], dst_shape[a] - dst_offset[a]);
  }
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < extent[2]; ++z) {
      for (int y = 0; y < extent[1]; ++y) {
        for (int x = 0; x < extent[0]; ++x) {
          dst[c * dn + linear_index(dst_shape, x + dst_offset[0], y + dst_offset[1], z + dst_offset[2])] =
              src[c * sn + linear_index(src_shape, x + src_offset[0], y + src_offset[1], z + src_offset[2])];
        }
      }
    }
  }
  return dst;
}

void apply_crop_pad(Grid& image, LabelGrid* mask, const AugmentationPolicy& policy, Rng& rng, bool planar, float fill) {
  if (policy.crop_size) {
    Shape3 crop = *policy.crop_size;
    if (planar) crop[2] = 1;
    std::array<int, 3> offset{};
    for (int a = 0; a < 3; ++a) {
      if (crop[a] > image.shape[a]) {
        throw InvalidArgument("crop " + shape_string(crop) + " larger than input " + shape_string(image.shape));
      }
      offset[a] = rng.uniform_int(0, image.shape[a] - crop[a]);
    }
    image.data = copy_box(image.data, image.shape, image.channels, crop, offset, {0, 0, 0}, 0.0f);
    if (mask != nullptr) {
      mask->data = copy_box(mask->data, mask->shape, 1, crop, offset, {0, 0, 0}, std::uint8_t{0});
      mask->shape = crop;
    }
    image.shape = crop;
  }
  if (policy.pad_to) {
    Shape3 target = *policy.pad_to;
    if (planar) target[2] = 1;
    std::array<int, 3> offset{};
    bool changed = false;
    for (int a = 0; a < 3; ++a) {
      if (target[a] < image.shape[a]) {
        throw InvalidArgument("pad_to " + shape_string(target) + " smaller than input " + shape_string(image.shape));
      }
      offset[a] = (target[a] - image.shape[a]) / 2;
      changed = changed || target[a] != image.shape[a];
    }
    if (changed) {
      image.data = copy_box(image.data, image.shape, image.channels, target, {0, 0, 0}, offset, fill);
      if (mask != nullptr) {
        mask->data = copy_box(mask->data, mask->shape, 1, target, {0, 0, 0}, offset, std::uint8_t{0});
        mask->shape = target;
      }
      image.shape = target;
    }
  }
}

void apply_color(Grid& image, const AugmentationPolicy& policy, double contrast) {
  const std::size_t n = image.plane();
  if (contrast != 1.0) {
    for (int c = 0; c < image.channels; ++c) {
      float* p = image.data.data() + c * n;
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) sum += p[i];
      const double mean = sum / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(mean + contrast * (p[i] - mean));
    }
  }
  if (policy.grayscale && image.channels == 3) {
    for (std::size_t i = 0; i < n; ++i) {
      const float m = static_cast<float>(
          (static_cast<double>(image.data[i]) + image.data[n + i] + image.data[2 * n + i]) / 3.0);
      image.data[i] = image.data[n + i] = image.data[2 * n + i] = m;
    }
  }
}

void run_pipeline(Grid& image, LabelGrid* mask, const AugmentationPolicy& policy, std::uint64_t seed, bool planar) {
  Rng rng(mix64(seed));
  const auto t = draw(policy, rng, planar);
  const auto fill = static_cast<float>(policy.fill_value);
  apply_geometry(image, mask, t, fill);
  apply_crop_pad(image, mask, policy, rng, planar, fill);
  apply_color(image, policy, t.contrast);
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi)) {
    throw InvalidArgument(std::string("augmentation range ") + name + " must satisfy lo <= hi");
  }
}

}  // namespace

void IntensityWindow::validate() const {
  if (!(hu_min < hu_max)) throw InvalidArgument("intensity window requires hu_min < hu_max");
}

Volume3D normalize_intensity(const Volume3D& volume, const IntensityWindow& window) {
  window.validate();
  const auto in = volume.voxels();
  std::vector<float> out(in.size());
  const double width = window.hu_max - window.hu_min;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = std::clamp(static_cast<double>(in[i]), window.hu_min, window.hu_max);
    out[i] = static_cast<float>((v - window.hu_min) / width);
  }
  return volume.with_voxels(std::move(out));
}

void AugmentationPolicy::validate() const {
  check_range(scale, "scale");
  check_range(rotation_deg, "rotation_deg");
  check_range(translation_vox, "translation_vox");
  check_range(contrast, "contrast");
  if (!(scale.lo > 0.0)) throw InvalidArgument("scale range must be positive");
  if (!(contrast.lo > 0.0)) throw InvalidArgument("contrast lower bound must be > 0");
  if (!(affine_jitter >= 0.0)) throw InvalidArgument("affine_jitter must be >= 0");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) throw InvalidArgument("flip_probability must be in [0,1]");
  if (crop_size) {
    for (int d : *crop_size) {
      if (d < 1) throw InvalidArgument("crop_size must be positive");
    }
  }
  if (pad_to) {
    for (int d : *pad_to) {
      if (d < 1) throw InvalidArgument("pad_to must be positive");
    }
  }
}

bool AugmentationPolicy::is_identity() const {
  return scale.lo == 1.0 && scale.hi == 1.0 && !crop_size && (flip_axes.empty() || flip_probability == 0.0) &&
         !pad_to && rotation_deg.lo == 0.0 && rotation_deg.hi == 0.0 && translation_vox.lo == 0.0 &&
         translation_vox.hi == 0.0 && affine_jitter == 0.0 && !grayscale && contrast.lo == 1.0 && contrast.hi == 1.0;
}

VolumeSample augment(const VolumeSample& sample, const AugmentationPolicy& policy, SplitRole role, std::uint64_t seed) {
  if (role == SplitRole::Test || !policy.applies_to(role)) return sample;
  policy.validate();
  if (sample.mask && sample.mask->shape != sample.image.shape()) {
    throw ShapeMismatch("image and mask shapes differ");
  }
  g_applied.fetch_add(1, std::memory_order_relaxed);
  if (policy.is_identity()) return sample;

  const auto in = sample.image.voxels();
  Grid image{1, sample.image.shape(), std::vector<float>(in.begin(), in.end())};
  std::optional<LabelGrid> mask;
  if (sample.mask) mask = LabelGrid{sample.mask->shape, sample.mask->labels};
  run_pipeline(image, mask ? &*mask : nullptr, policy, seed, false);

  VolumeSample out{Volume3D(image.shape, std::move(image.data), sample.image.spacing(), sample.image.origin(),
                            sample.image.orientation()),
                   std::nullopt};
  if (mask) {
    SegmentationMask m(mask->shape, sample.mask->scheme);
    m.labels = std::move(mask->data);
    out.mask = std::move(m);
  }
  return out;
}

SliceImage2D augment(const SliceImage2D& img, const AugmentationPolicy& policy, SplitRole role, std::uint64_t seed) {
  if (role == SplitRole::Test || !policy.applies_to(role)) return img;
  policy.validate();
  img.validate();
  g_applied.fetch_add(1, std::memory_order_relaxed);
  if (policy.is_identity()) return img;

  const Shape3 shape{img.width, img.height, 1};
  Grid grid{img.channels, shape, std::vector<float>(img.pixels.size())};
  const std::size_t n = voxel_count(shape);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < img.channels; ++ch) {
        grid.data[ch * n + linear_index(shape, c, r, 0)] = img.at(r, c, ch);
      }
    }
  }
  run_pipeline(grid, nullptr, policy, seed, true);
  SliceImage2D out(grid.shape[1], grid.shape[0], img.channels);
  const std::size_t m = grid.plane();
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      for (int ch = 0; ch < out.channels; ++ch) out.at(r, c, ch) = grid.data[ch * m + linear_index(grid.shape, c, r, 0)];
    }
  }
  return out;
}

std::uint64_t augmentation_applications() { return g_applied.load(); }

SliceImage2D extract_slice(const Volume3D& volume, Axis axis, int index) {
  const auto& s = volume.shape();
  const int ax = static_cast<int>(axis);
  if (index < 0 || index >= s[ax]) {
    throw OutOfRange("slice index " + std::to_string(index) + " out of range [0, " + std::to_string(s[ax]) +
                      ") along axis " + std::string(to_string(axis)));
  }
  SliceImage2D out;
  switch (axis) {
    case Axis::Z:
      out = SliceImage2D(s[1], s[0], 1);
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[0]; ++x) out.at(y, x) = volume.at(x, y, index);
      break;
    case Axis::Y:
      out = SliceImage2D(s[2], s[0], 1);
      for (int z = 0; z < s[2]; ++z)
        for (int x = 0; x < s[0]; ++x) out.at(z, x) = volume.at(x, index, z);
      break;
    case Axis::X:
      out = SliceImage2D(s[2], s[1], 1);
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y) out.at(z, y) = volume.at(index, y, z);
      break;
  }
  return out;
}

std::vector<SliceImage2D> extract_slices(const Volume3D& volume, Axis axis, const std::vector<int>& indices) {
  std::vector<SliceImage2D> out;
  if (indices.empty()) {
    const int n = volume.shape()[static_cast<int>(axis)];
    out.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) out.push_back(extract_slice(volume, axis, k));
  } else {
    out.reserve(indices.size());
    for (int k : indices) out.push_back(extract_slice(volume, axis, k));
  }
  return out;
}

std::vector<std::uint8_t> extract_mask_plane(const SegmentationMask& mask, Axis axis, int index, int& rows, int& cols) {
  const auto& s = mask.shape;
  const int ax = static_cast<int>(axis);
  if (index < 0 || index >= s[ax]) throw OutOfRange("mask slice index out of range");
  std::vector<std::uint8_t> out;
  switch (axis) {
    case Axis::Z:
      rows = s[1];
      cols = s[0];
      out.resize(static_cast<std::size_t>(rows) * cols);
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[0]; ++x) out[static_cast<std::size_t>(y) * cols + x] = mask.at(x, y, index);
      break;
    case Axis::Y:
      rows = s[2];
      cols = s[0];
      out.resize(static_cast<std::size_t>(rows) * cols);
      for (int z = 0; z < s[2]; ++z)
        for (int x = 0; x < s[0]; ++x) out[static_cast<std::size_t>(z) * cols + x] = mask.at(x, index, z);
      break;
    case Axis::X:
      rows = s[2];
      cols = s[1];
      out.resize(static_cast<std::size_t>(rows) * cols);
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y) out[static_cast<std::size_t>(z) * cols + y] = mask.at(index, y, z);
      break;
  }
  return out;
}

SliceImage2D resize_bilinear(const SliceImage2D& slice, int out_height, int out_width) {
  SliceImage2D out(out_height, out_width, slice.channels);
  const double sy = static_cast<double>(slice.height) / out_height;
  const double sx = static_cast<double>(slice.width) / out_width;
  const auto lerp = [](double a, double b, double f) { return a == b ? a : a + f * (b - a); };
  for (int r = 0; r < out_height; ++r) {
    const double fy_src = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(slice.height - 1));
    const int y0 = static_cast<int>(std::floor(fy_src));
    const int y1 = std::min(y0 + 1, slice.height - 1);
    const double fy = fy_src - y0;
    for (int c = 0; c < out_width; ++c) {
      const double fx_src = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(slice.width - 1));
      const int x0 = static_cast<int>(std::floor(fx_src));
      const int x1 = std::min(x0 + 1, slice.width - 1);
      const double fx = fx_src - x0;
      for (int ch = 0; ch < slice.channels; ++ch) {
        const double top = lerp(slice.at(y0, x0, ch), slice.at(y0, x1, ch), fx);
        const double bottom = lerp(slice.at(y1, x0, ch), slice.at(y1, x1, ch), fx);
        out.at(r, c, ch) = static_cast<float>(lerp(top, bottom, fy));
      }
    }
  }
  return out;
}

SliceImage2D prepare_classifier_input(const SliceImage2D& slice, int size) {
  if (slice.height < 1 || slice.width < 1 || slice.pixels.empty()) {
    throw InvalidArgument("degenerate slice: zero area");
  }
  slice.validate();
  const SliceImage2D resized =
      (slice.height == size && slice.width == size) ? slice : resize_bilinear(slice, size, size);
  SliceImage2D out(size, size, 3);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = resized.at(r, c, resized.channels == 3 ? ch : 0);
        out.at(r, c, ch) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

}  // namespace lungtriage
