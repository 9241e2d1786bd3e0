#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <iterator>
#include <set>

#include "lungtriage/metrics.hpp"
#include "test_support.hpp"

using namespace lungtriage;
using namespace lungtriage::testing;

namespace {

// Set-algebra Dice over voxel index sets.
double dice_oracle(const SegmentationMask& a, const SegmentationMask& b, std::uint8_t label) {
  std::set<std::size_t> sa, sb, both;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (a.labels[i] == label) sa.insert(i);
    if (b.labels[i] == label) sb.insert(i);
  }
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(both, both.begin()));
  if (sa.empty() && sb.empty()) return 1.0;
  return 2.0 * static_cast<double>(both.size()) / static_cast<double>(sa.size() + sb.size());
}

SegmentationMask mask_from(Shape3 s, Scheme scheme, const std::vector<std::size_t>& on, std::uint8_t label = 1) {
  SegmentationMask m(s, scheme);
  for (auto i : on) m.labels[i] = label;
  return m;
}

}  // namespace

TEST(Dice, AgreesWithSetOracleOnRandomPairs) {
  Rng rng(2024);
  for (int t = 0; t < 200; ++t) {
    const Shape3 s{rng.uniform_int(1, 12), rng.uniform_int(1, 12), rng.uniform_int(1, 12)};
    const Scheme scheme = rng.bernoulli(0.5) ? Scheme::Seg2 : Scheme::Seg4;
    const auto a = random_mask(s, scheme, rng, rng.uniform(0.0, 1.0));
    const auto b = random_mask(s, scheme, rng, rng.uniform(0.0, 1.0));
    const auto per = per_label_dice(a, b);
    for (int k = 0; k < label_count(scheme); ++k) {
      const double d = dice(a, b, static_cast<std::uint8_t>(k));
      EXPECT_NEAR(d, dice_oracle(a, b, static_cast<std::uint8_t>(k)), 1e-12);
      EXPECT_EQ(d, dice(b, a, static_cast<std::uint8_t>(k)));
      EXPECT_EQ(d, per[k]);
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
    }
    EXPECT_EQ(dice(a, a, 1), 1.0);
  }
}

TEST(Dice, WorkedExamples) {
  const Shape3 s{10, 1, 1};
  const auto a = mask_from(s, Scheme::Seg2, {0, 1, 2, 3});
  const auto b = mask_from(s, Scheme::Seg2, {1, 2, 3, 4, 5, 6});
  EXPECT_DOUBLE_EQ(dice(a, b, 1), 0.6);
  const auto empty = mask_from(s, Scheme::Seg2, {});
  EXPECT_EQ(dice(empty, empty, 1), 1.0);
  EXPECT_EQ(dice(a, empty, 1), 0.0);
  const auto disjoint = mask_from(s, Scheme::Seg2, {8, 9});
  EXPECT_EQ(dice(a, disjoint, 1), 0.0);
  EXPECT_THROW(dice(a, mask_from({5, 2, 1}, Scheme::Seg2, {}), 1), ShapeMismatch);
}

TEST(Dice, MeanForegroundSkipsBackground) {
  const Shape3 s{8, 1, 1};
  SegmentationMask truth(s, Scheme::Seg4), pred(s, Scheme::Seg4);
  truth.labels = {0, 1, 1, 2, 2, 3, 3, 0};
  pred.labels = {0, 1, 0, 2, 2, 3, 0, 1};
  const auto per = per_label_dice(pred, truth);
  EXPECT_DOUBLE_EQ(per[1], 2.0 * 1 / (2 + 2));
  EXPECT_DOUBLE_EQ(per[2], 1.0);
  EXPECT_DOUBLE_EQ(per[3], 2.0 * 1 / (1 + 2));
  EXPECT_DOUBLE_EQ(mean_foreground_dice(pred, truth), (per[1] + per[2] + per[3]) / 3.0);
}

TEST(MeanDiceStd, PopulationStatistics) {
  const auto a = mean_dice_std({0.7, 0.9});
  EXPECT_NEAR(a.mean, 0.8, 1e-15);
  EXPECT_NEAR(a.std, 0.1, 1e-15);
  const auto b = mean_dice_std({1.0, 0.6});
  EXPECT_NEAR(b.mean, 0.8, 1e-15);
  EXPECT_NEAR(b.std, 0.2, 1e-15);
  const auto c = mean_dice_std({0.5});
  EXPECT_EQ(c.mean, 0.5);
  EXPECT_EQ(c.std, 0.0);
  EXPECT_THROW(mean_dice_std({}), InvalidArgument);

  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(rng.uniform_int(1, 30));
    for (auto& x : v) x = rng.uniform();
    double m = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    const auto r = mean_dice_std(v);
    EXPECT_NEAR(r.mean, m, 1e-12);
    EXPECT_NEAR(r.std, std::sqrt(var / v.size()), 1e-12);
  }
}

TEST(VoxelAccuracy, CountsMatchingIds) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    const Shape3 s{rng.uniform_int(1, 9), rng.uniform_int(1, 9), rng.uniform_int(1, 9)};
    const auto a = random_mask(s, Scheme::Seg4, rng);
    const auto b = random_mask(s, Scheme::Seg4, rng);
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) same += a.labels[i] == b.labels[i];
    EXPECT_DOUBLE_EQ(voxel_accuracy(a, b), static_cast<double>(same) / a.labels.size());
  }
}

TEST(ClassificationAccuracy, Fraction) {
  std::vector<ClassLabel> truth(18, ClassLabel::Covid), pred(18, ClassLabel::Covid);
  pred[4] = ClassLabel::Normal;
  EXPECT_DOUBLE_EQ(classification_accuracy(pred, truth), 17.0 / 18.0);
  EXPECT_THROW(classification_accuracy(pred, {}), ShapeMismatch);
  EXPECT_THROW(classification_accuracy({}, {}), InvalidArgument);
}

TEST(StepsTotal, ProductOfEpochsAndIterations) {
  EXPECT_EQ(steps_total(300, 40), 12000);
  EXPECT_EQ(steps_total(500, 40), 20000);
  EXPECT_EQ(steps_total(1, 1), 1);
  EXPECT_THROW(steps_total(0, 40), InvalidArgument);
  EXPECT_THROW(steps_total(5, 0), InvalidArgument);
}

TEST(MetricsReport, JsonRoundTrip) {
  MetricsReport r;
  r.epochs = 3;
  r.iterations_per_epoch = 40;
  r.total_steps = 120;
  r.train_loss = {1.0, 0.5, 0.25};
  r.validation_metric = {0.1, 0.2, 0.3};
  r.validation_accuracy = {0.5, 0.6, 0.7};
  r.case_dice = {{"case-a", {0.9, 0.8}, 0.8, 0.99}};
  r.accuracy = 17.0 / 18.0;
  r.mean_dice = 0.78;
  r.std_dice = 0.03;
  EXPECT_EQ(MetricsReport::from_json(r.to_json()), r);
  EXPECT_EQ(MetricsReport::from_json(MetricsReport{}.to_json()), MetricsReport{});
  EXPECT_THROW(MetricsReport::from_json(R"({"format":"other","version":1})"), InvalidArgument);
}
