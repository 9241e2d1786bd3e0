#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lungtriage/phantom.hpp"
#include "lungtriage/transforms.hpp"

using namespace lungtriage;

namespace {

std::size_t count_label(const SegmentationMask& m, int label) {
  std::size_t n = 0;
  for (int z = 0; z < m.shape[2]; ++z)
    for (int y = 0; y < m.shape[1]; ++y)
      for (int x = 0; x < m.shape[0]; ++x) n += m.at(x, y, z) == label;
  return n;
}

}  // namespace

TEST(Phantom, NormalHasNoLesion) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Normal, {32, 32, 16}, seed));
    EXPECT_EQ(count_label(ph.mask, 3), 0u);
    EXPECT_EQ(ph.lesion_count, 0);
    EXPECT_EQ(ph.class_label, ClassLabel::Normal);
  }
}

TEST(Phantom, Deterministic) {
  const auto spec = PhantomSpec::for_class(ClassLabel::Covid, {32, 32, 16}, 42);
  const auto a = generate_phantom(spec);
  const auto b = generate_phantom(spec);
  EXPECT_EQ(a.volume, b.volume);
  EXPECT_EQ(a.mask, b.mask);
  auto other = spec;
  other.seed = 43;
  EXPECT_NE(generate_phantom(other).mask, a.mask);
}

TEST(Phantom, LesionVoxelCountWithinAnalyticBound) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto spec = PhantomSpec::for_class(ClassLabel::Covid, {64, 64, 64}, seed);
    spec.lesion_radius_min = 2.0;
    spec.lesion_radius_max = 3.0;
    const auto ph = generate_phantom(spec);
    const double ball = 4.0 / 3.0 * std::numbers::pi;
    const double lo = ball * 8.0 * spec.lesion_count_min * 0.5;
    const double hi = ball * 27.0 * spec.lesion_count_max * 1.5;
    const auto n = static_cast<double>(count_label(ph.mask, 3));
    EXPECT_GE(n, lo) << "seed " << seed;
    EXPECT_LE(n, hi) << "seed " << seed;
  }
}

TEST(Phantom, LabelNestingAndClassConsistency) {
  for (auto label : {ClassLabel::Covid, ClassLabel::Pneumonia, ClassLabel::Normal}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto ph = generate_phantom(PhantomSpec::for_class(label, {40, 40, 24}, seed));
      ph.mask.validate();
      // Lesion voxels replace lung labels, so lesion-or-lung equals the lung ellipsoids.
      const auto& s = ph.mask.shape;
      const auto spec = PhantomSpec::for_class(label, s, seed);
      for (int z = 0; z < s[2]; ++z)
        for (int y = 0; y < s[1]; ++y)
          for (int x = 0; x < s[0]; ++x) {
            if (ph.mask.at(x, y, z) != 3) continue;
            bool in_lung = false;
            for (const auto& c : {spec.left_lung_center, spec.right_lung_center}) {
              double d = 0;
              const double p[3] = {double(x), double(y), double(z)};
              for (int a = 0; a < 3; ++a) d += std::pow((p[a] - c[a]) / spec.lung_radii[a], 2);
              in_lung = in_lung || d <= 1.0;
            }
            EXPECT_TRUE(in_lung);
          }
      EXPECT_EQ(label == ClassLabel::Normal, count_label(ph.mask, 3) == 0);
    }
  }
}

TEST(Phantom, CentralSliceShowsLesion) {
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {32, 32, 21}, 7));
  std::size_t n = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) n += ph.mask.at(x, y, 10) == 3;
  EXPECT_GT(n, 0u);
}

TEST(Phantom, IntensitySeparation) {
  for (auto label : {ClassLabel::Covid, ClassLabel::Pneumonia}) {
    auto spec = PhantomSpec::for_class(label, {48, 48, 32}, 3);
    spec.noise_sigma = spec.lesion_intensity / 4.0;
    const auto ph = generate_phantom(spec);
    const auto n = normalize_intensity(ph.volume, {});
    double lesion = 0, lung = 0;
    std::size_t nl = 0, nu = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
      const auto l = ph.mask.labels[i];
      if (l == 3) {
        lesion += n.voxels()[i];
        ++nl;
      } else if (l == 1 || l == 2) {
        lung += n.voxels()[i];
        ++nu;
      }
    }
    ASSERT_GT(nl, 0u);
    EXPECT_GE(lesion / nl - lung / nu, spec.lesion_intensity / 2.0);
  }
}

TEST(Phantom, UnplaceableLungsRejected) {
  auto spec = PhantomSpec::for_class(ClassLabel::Normal, {32, 32, 16}, 0);
  spec.lung_radii = {40.0, 10.0, 5.0};
  EXPECT_THROW(generate_phantom(spec), InvalidArgument);
  spec = PhantomSpec::for_class(ClassLabel::Covid, {32, 32, 16}, 0);
  spec.lesion_radius_min = 0.0;
  EXPECT_THROW(generate_phantom(spec), InvalidArgument);
}
