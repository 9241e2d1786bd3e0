#include "lungtriage/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "lungtriage/rng.hpp"

namespace lungtriage {

namespace {

struct Lesion {
  Vec3 center;
  double radius;
  int lung;  // 1 left, 2 right
};

double ellipsoid_norm(const Vec3& p, const Vec3& c, const Vec3& r) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - c[a]) / r[a];
    s += d * d;
  }
  return s;
}

}  // namespace

PhantomSpec PhantomSpec::for_class(ClassLabel label, Shape3 shape, std::uint64_t seed) {
  PhantomSpec s;
  s.class_label = label;
  s.shape = shape;
  s.seed = seed;
  const double nx = shape[0];
  const double ny = shape[1];
  const double nz = shape[2];
  const Vec3 mid{(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0};
  s.lung_radii = {0.17 * nx, 0.30 * ny, 0.40 * nz};
  s.left_lung_center = {mid[0] + 0.22 * nx, mid[1], mid[2]};
  s.right_lung_center = {mid[0] - 0.22 * nx, mid[1], mid[2]};
  const double m = std::min(nx, ny);
  const double r_cap = std::max(1.0, std::min({s.lung_radii[0], s.lung_radii[1], s.lung_radii[2]}) - 0.25);
  switch (label) {
    case ClassLabel::Covid:
      s.lesion_count_min = 2;
      s.lesion_count_max = 4;
      s.lesion_radius_min = std::min(r_cap, std::max(1.5, 0.05 * m));
      s.lesion_radius_max = std::min(r_cap, std::max(s.lesion_radius_min, 0.09 * m));
      s.lesion_intensity = 0.30;
      s.texture = LesionTexture::Patchy;
      break;
    case ClassLabel::Pneumonia:
      s.lesion_count_min = 5;
      s.lesion_count_max = 8;
      s.lesion_radius_min = std::min(r_cap, std::max(1.5, 0.035 * m));
      s.lesion_radius_max = std::min(r_cap, std::max(s.lesion_radius_min, 0.06 * m));
      s.lesion_intensity = 0.55;
      s.texture = LesionTexture::Diffuse;
      break;
    case ClassLabel::Normal:
      s.lesion_count_min = 0;
      s.lesion_count_max = 0;
      break;
  }
  return s;
}

void PhantomSpec::validate() const {
  for (int d : shape) {
    if (d < 1) throw InvalidArgument("phantom shape must be positive");
  }
  for (double r : lung_radii) {
    if (!(r > 0.0)) throw InvalidArgument("lung radii must be > 0");
  }
  if (lesion_count_min < 0 || lesion_count_max < lesion_count_min) {
    throw InvalidArgument("lesion count range must satisfy 0 <= min <= max");
  }
  if (class_label != ClassLabel::Normal) {
    if (!(lesion_radius_min > 0.0) || lesion_radius_max < lesion_radius_min) {
      throw InvalidArgument("lesion radius range must satisfy 0 < min <= max");
    }
  }
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise_sigma must be >= 0");
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Shape3& shape = spec.shape;
  for (const auto* center : {&spec.left_lung_center, &spec.right_lung_center}) {
    for (int a = 0; a < 3; ++a) {
      if ((*center)[a] - spec.lung_radii[a] < -0.5 || (*center)[a] + spec.lung_radii[a] > shape[a] - 0.5 ||
          spec.lung_radii[a] < 0.5) {
        throw InvalidArgument("lungs not placeable within shape " + shape_string(shape));
      }
    }
  }

  Rng rng(mix64(spec.seed ^ 0x5048414E544F4DULL));
  Phantom out;
  out.class_label = spec.class_label;
  out.mask = SegmentationMask(shape, Scheme::Seg4);
  std::vector<float> hu(voxel_count(shape), static_cast<float>(kAirHu));

  const Vec3 mid{(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0};
  const Vec3 body_r{0.48 * shape[0], 0.45 * shape[1], 1e9};
  for (int z = 0; z < shape[2]; ++z) {
    for (int y = 0; y < shape[1]; ++y) {
      for (int x = 0; x < shape[0]; ++x) {
        const Vec3 p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        const auto i = linear_index(shape, x, y, z);
        if (ellipsoid_norm(p, {mid[0], mid[1], p[2]}, body_r) <= 1.0) hu[i] = static_cast<float>(kTissueHu);
        if (ellipsoid_norm(p, spec.left_lung_center, spec.lung_radii) <= 1.0) {
          out.mask.labels[i] = 1;
          hu[i] = static_cast<float>(kLungHu);
        } else if (ellipsoid_norm(p, spec.right_lung_center, spec.lung_radii) <= 1.0) {
          out.mask.labels[i] = 2;
          hu[i] = static_cast<float>(kLungHu);
        }
      }
    }
  }

  std::vector<Lesion> lesions;
  if (spec.class_label != ClassLabel::Normal) {
    const int count = rng.uniform_int(spec.lesion_count_min, spec.lesion_count_max);
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
        const double r = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
        const int lung = rng.bernoulli(0.5) ? 1 : 2;
        const Vec3& lc = lung == 1 ? spec.left_lung_center : spec.right_lung_center;
        Vec3 semi{};
        for (int a = 0; a < 3; ++a) semi[a] = std::max(0.0, spec.lung_radii[a] - r);
        // Uniform point in the shrunk ellipsoid by rejection from its bounding box.
        Vec3 c{};
        bool inside = false;
        for (int tries = 0; tries < 64 && !inside; ++tries) {
          double s = 0.0;
          for (int a = 0; a < 3; ++a) {
            const double u = rng.uniform(-1.0, 1.0);
            c[a] = lc[a] + u * semi[a];
            s += u * u;
          }
          inside = s <= 1.0;
        }
        if (!inside) continue;
        if (k == 0) c[2] = mid[2];
        bool overlaps = false;
        for (const auto& other : lesions) {
          double d2 = 0.0;
          for (int a = 0; a < 3; ++a) d2 += (c[a] - other.center[a]) * (c[a] - other.center[a]);
          if (std::sqrt(d2) <= r + other.radius + 1.0) overlaps = true;
        }
        if (overlaps) continue;
        lesions.push_back({c, r, lung});
        placed = true;
      }
      if (!placed) {
        if (k < spec.lesion_count_min) {
          throw InvalidArgument("lesions not placeable: could not fit " + std::to_string(spec.lesion_count_min) +
                                " non-overlapping lesions inside the lungs");
        }
        break;
      }
    }
  }

  const double offset_hu = spec.lesion_intensity * kWindowWidthHu;
  for (const auto& lesion : lesions) {
    const int r = static_cast<int>(std::ceil(lesion.radius));
    for (int z = static_cast<int>(std::floor(lesion.center[2])) - r; z <= static_cast<int>(std::ceil(lesion.center[2])) + r; ++z) {
      for (int y = static_cast<int>(std::floor(lesion.center[1])) - r; y <= static_cast<int>(std::ceil(lesion.center[1])) + r; ++y) {
        for (int x = static_cast<int>(std::floor(lesion.center[0])) - r; x <= static_cast<int>(std::ceil(lesion.center[0])) + r; ++x) {
          if (!in_bounds(shape, x, y, z)) continue;
          const double dx = x - lesion.center[0];
          const double dy = y - lesion.center[1];
          const double dz = z - lesion.center[2];
          const double d2 = (dx * dx + dy * dy + dz * dz) / (lesion.radius * lesion.radius);
          if (d2 > 1.0) continue;
          const auto i = linear_index(shape, x, y, z);
          if (out.mask.labels[i] != 1 && out.mask.labels[i] != 2) continue;
          out.mask.labels[i] = 3;
          const double profile = spec.texture == LesionTexture::Diffuse ? 1.0 - 0.5 * d2 : 1.0;
          hu[i] = static_cast<float>(kLungHu + offset_hu * profile);
        }
      }
    }
  }
  out.lesion_count = static_cast<int>(lesions.size());

  if (spec.noise_sigma > 0.0) {
    const double sigma_hu = spec.noise_sigma * kWindowWidthHu;
    for (auto& v : hu) v = static_cast<float>(v + sigma_hu * rng.normal());
  }
  out.volume = Volume3D(shape, std::move(hu), spec.spacing);
  return out;
}

}  // namespace lungtriage
