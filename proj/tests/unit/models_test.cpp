#include <gtest/gtest.h>

#include <cmath>

#include "gradient_check.hpp"
#include "lungtriage/classifier.hpp"
#include "lungtriage/nn/loss.hpp"
#include "lungtriage/nn/optimizer.hpp"
#include "lungtriage/phantom.hpp"
#include "lungtriage/segmenter.hpp"
#include "lungtriage/transforms.hpp"

using namespace lungtriage;
using namespace lungtriage::testing;

namespace {

template <typename T>
nn::Tensor<T> uniform_tensor(nn::Dims d, Rng& rng) {
  nn::Tensor<T> t(d);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform());
  return t;
}

ClassifierConfig small_classifier(int width, int input, std::uint64_t seed = 1) {
  ClassifierConfig c;
  c.width = width;
  c.input_size = input;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Classifier, StandardArchitectureCounts) {
  const ClassifierModel m(ClassifierConfig{});
  EXPECT_EQ(m.conv_layer_count(), 49);
  EXPECT_EQ(m.config().conv_layer_count(), 49);
  EXPECT_EQ(m.projection_conv_count(), 4);
  EXPECT_EQ(m.fc_layer_count(), 1);
  EXPECT_EQ(m.stage_block_counts(), (std::vector<int>{3, 4, 6, 3}));
  EXPECT_EQ(m.feature_shape(224), (std::array<int, 3>{2048, 7, 7}));
}

TEST(Classifier, FeatureMapMatchesDeclaredShape) {
  const ClassifierModel m(small_classifier(8, 64));
  Rng rng(3);
  const auto f = m.infer_features(uniform_tensor<float>({2, 3, 1, 64, 64}, rng));
  const auto s = m.feature_shape(64);
  EXPECT_EQ(f.dims, (nn::Dims{2, s[0], 1, s[1], s[2]}));
  EXPECT_EQ(s, (std::array<int, 3>{256, 2, 2}));
}

TEST(Classifier, ProbabilitiesFormASimplex) {
  const ClassifierModel m(small_classifier(4, 64));
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    SliceImage2D img(64, 64, 3);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
    const auto p = classify_slice(m, img);
    double sum = 0.0;
    for (double v : p.p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Classifier, RejectsWrongInputSize) {
  const ClassifierModel m(small_classifier(4, 64));
  EXPECT_THROW(classify_slice(m, SliceImage2D(32, 32, 3)), ShapeMismatch);
  EXPECT_THROW(classify_slice(m, SliceImage2D(64, 64, 1)), ShapeMismatch);
}

TEST(Classifier, SameSeedSameWeightsAndOutputs) {
  const ClassifierModel a(small_classifier(4, 64, 9));
  const ClassifierModel b(small_classifier(4, 64, 9));
  const ClassifierModel c(small_classifier(4, 64, 10));
  Rng rng(5);
  const auto x = uniform_tensor<float>({1, 3, 1, 64, 64}, rng);
  EXPECT_EQ(a.infer(x).data, b.infer(x).data);
  EXPECT_EQ(a.infer(x).data, a.infer(x).data);
  EXPECT_NE(a.infer(x).data, c.infer(x).data);
}

TEST(Classifier, ArgmaxTiesGoToEarlierClass) {
  EXPECT_EQ((ClassProbabilities{{0.4, 0.4, 0.2}}).argmax(), ClassLabel::Covid);
  EXPECT_EQ((ClassProbabilities{{0.2, 0.4, 0.4}}).argmax(), ClassLabel::Pneumonia);
  EXPECT_EQ((ClassProbabilities{{0.3, 0.3, 0.4}}).argmax(), ClassLabel::Normal);
  EXPECT_EQ((ClassProbabilities{{1.0 / 3, 1.0 / 3, 1.0 / 3}}).argmax(), ClassLabel::Covid);
}

TEST(Classifier, AggregationIsTheSliceMean) {
  Rng rng(6);
  std::vector<ClassProbabilities> slices(5);
  for (auto& s : slices) {
    double z = 0.0;
    for (auto& v : s.p) z += (v = rng.uniform(0.01, 1.0));
    for (auto& v : s.p) v /= z;
  }
  const auto agg = aggregate_probabilities(slices);
  for (int k = 0; k < kNumClasses; ++k) {
    double m = 0.0;
    for (const auto& s : slices) m += s.p[k];
    EXPECT_NEAR(agg.p[k], m / 5.0, 1e-15);
  }
  EXPECT_THROW(aggregate_probabilities({}), InvalidArgument);
}

TEST(Classifier, VolumeClassificationAveragesEveryAxialSlice) {
  const ClassifierModel m(small_classifier(4, 32));
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {32, 32, 6}, 2));
  const auto r = classify_volume(m, ph.volume);
  ASSERT_EQ(r.per_slice.size(), 6u);
  const auto norm = normalize_intensity(ph.volume, IntensityWindow{});
  for (int z = 0; z < 6; ++z) {
    const auto p = classify_slice(m, prepare_classifier_input(extract_slice(norm, Axis::Z, z), 32));
    EXPECT_EQ(p, r.per_slice[z]);
  }
  EXPECT_EQ(r.probabilities, aggregate_probabilities(r.per_slice));
  EXPECT_EQ(r.predicted, r.probabilities.argmax());
}

TEST(Classifier, OverfitsThreeLabelledSlices) {
  ClassifierModel m(small_classifier(8, 128, 2));
  nn::Tensor<float> x({3, 3, 1, 128, 128});
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) {
    const auto ph = generate_phantom(PhantomSpec::for_class(static_cast<ClassLabel>(k), {64, 64, 16}, 20 + k));
    const auto norm = normalize_intensity(ph.volume, IntensityWindow{});
    const auto t = slice_to_tensor(prepare_classifier_input(extract_slice(norm, Axis::Z, 8), 128));
    std::copy(t.data.begin(), t.data.end(), x.sample(k));
    labels.push_back(k);
  }
  nn::Sgd<float> opt(m.parameters(), 1e-2, 0.9);
  for (int it = 0; it < 100; ++it) {
    opt.zero_grad();
    nn::Tensor<float> g;
    nn::softmax_cross_entropy(m.forward(x), labels, &g);
    m.backward(g);
    opt.step();
  }
  const auto logits = m.infer(x);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(probabilities_from_logits(logits.sample(k), 3).argmax(), static_cast<ClassLabel>(k));
  }
}

TEST(Classifier, GradientsMatchFiniteDifferences) {
  nn::ResNet50<double> m(small_classifier(4, 64, 5));
  Rng rng(2);
  const auto x = uniform_tensor<double>({3, 3, 1, 64, 64}, rng);
  const std::vector<int> labels{0, 1, 2};
  const auto probes = check_network_gradients(
      m, x, [&](const nn::Tensor<double>& y, nn::Tensor<double>* g) { return nn::softmax_cross_entropy(y, labels, g); },
      24, 7);
  for (const auto& p : probes) EXPECT_LT(p.relative, 1e-3) << p.parameter << "[" << p.index << "]";
}

TEST(Segmenter, ChannelLawsAndSkips) {
  const SegmenterModel m(SegmenterConfig::for_scheme(Scheme::Seg4, 16));
  EXPECT_EQ(m.levels(), 4);
  EXPECT_EQ(m.skip_connection_count(), 3);
  EXPECT_EQ(m.encoder_channels(), (std::vector<int>{16, 32, 64, 128}));
  EXPECT_EQ(m.encoder_first_conv_channels(), (std::vector<int>{8, 16, 32, 64}));
  EXPECT_EQ(m.out_channels(), 4);
  EXPECT_EQ(SegmenterModel(SegmenterConfig::for_scheme(Scheme::Seg2, 8)).out_channels(), 2);
  EXPECT_EQ(SegmenterModel(SegmenterConfig::for_scheme(Scheme::Seg2, 8)).encoder_channels(),
            (std::vector<int>{8, 16, 32, 64}));
  EXPECT_THROW(SegmenterConfig::for_scheme(Scheme::Classification3), InvalidArgument);
}

TEST(Segmenter, OutputGridEqualsInputGrid) {
  const SegmenterModel m(SegmenterConfig::for_scheme(Scheme::Seg4, 2, 1));
  Rng rng(3);
  for (nn::Dims d : {nn::Dims{1, 3, 16, 16, 16}, nn::Dims{1, 3, 8, 24, 32}, nn::Dims{2, 3, 32, 16, 8}}) {
    const auto y = m.infer(uniform_tensor<float>(d, rng));
    EXPECT_EQ(y.dims, (nn::Dims{d[0], 4, d[2], d[3], d[4]}));
  }
  EXPECT_THROW(m.infer(uniform_tensor<float>({1, 3, 12, 16, 16}, rng)), ShapeMismatch);
  EXPECT_THROW(m.infer(uniform_tensor<float>({1, 2, 16, 16, 16}, rng)), ShapeMismatch);
}

TEST(Segmenter, SegmentHandlesGridsOffTheSizeDivisor) {
  const SegmenterModel m(SegmenterConfig::for_scheme(Scheme::Seg2, 2, 1));
  Rng rng(4);
  Volume3D v({13, 10, 9});
  for (auto& x : v.voxels()) x = static_cast<float>(rng.uniform());
  const auto out = segment(m, v, GuidanceMaps::zeros(v.shape()));
  EXPECT_EQ(out.mask.shape, v.shape());
  EXPECT_EQ(out.scores.dims, (nn::Dims{1, 2, 9, 10, 13}));
  EXPECT_THROW(segment(m, v, GuidanceMaps::zeros({13, 10, 8})), ShapeMismatch);
}

TEST(Segmenter, GuidanceIsVoxelwiseMaxOfUnitGaussians) {
  const Shape3 s{12, 10, 8};
  const GuidanceClick a{2, 3, 4, Polarity::Positive};
  const GuidanceClick b{7, 6, 2, Polarity::Positive};
  const GuidanceClick n{5, 5, 5, Polarity::Negative};
  const auto ga = make_guidance_maps({a}, s, 2.0);
  const auto gb = make_guidance_maps({b}, s, 2.0);
  const auto both = make_guidance_maps({a, b, n}, s, 2.0);
  EXPECT_FLOAT_EQ(ga.positive[linear_index(s, 2, 3, 4)], 1.0f);
  for (float v : ga.negative) EXPECT_EQ(v, 0.0f);
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[0]; ++x) {
        const auto i = linear_index(s, x, y, z);
        EXPECT_EQ(both.positive[i], std::max(ga.positive[i], gb.positive[i]));
        const double d2 = (x - 5.0) * (x - 5.0) + (y - 5.0) * (y - 5.0) + (z - 5.0) * (z - 5.0);
        EXPECT_NEAR(both.negative[i], std::exp(-d2 / 8.0), 1e-7);
        EXPECT_GE(both.positive[i], 0.0f);
        EXPECT_LE(both.positive[i], 1.0f);
      }
  EXPECT_EQ(make_guidance_maps({}, s), GuidanceMaps::zeros(s));
  EXPECT_THROW(make_guidance_maps({{12, 0, 0, Polarity::Positive}}, s), OutOfRange);
  EXPECT_THROW(make_guidance_maps({a}, s, 0.0), InvalidArgument);
}

TEST(Segmenter, ZeroGuidanceAndRepeatCallsAgree) {
  const SegmenterModel m(SegmenterConfig::for_scheme(Scheme::Seg4, 2, 8));
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {16, 16, 16}, 3));
  const auto norm = normalize_intensity(ph.volume, IntensityWindow{});
  const auto a = segment(m, norm, make_guidance_maps({}, norm.shape()));
  const auto b = segment(m, norm, GuidanceMaps::zeros(norm.shape()));
  EXPECT_EQ(a.scores.data, b.scores.data);
  EXPECT_EQ(a.mask, b.mask);
  for (auto v : a.mask.labels) EXPECT_LT(v, 4);
}

TEST(Segmenter, ArgmaxTiesGoToLowerLabel) {
  nn::Tensor<float> s({1, 4, 1, 1, 3});
  const float rows[3][4] = {{0.25f, 0.25f, 0.25f, 0.25f}, {0.1f, 0.4f, 0.4f, 0.1f}, {0.1f, 0.2f, 0.3f, 0.4f}};
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) s.channel(0, c)[i] = rows[i][c];
  EXPECT_EQ(argmax_mask(s, Scheme::Seg4).labels, (std::vector<std::uint8_t>{0, 1, 3}));
  EXPECT_THROW(argmax_mask(s, Scheme::Seg2), ShapeMismatch);
}

TEST(Segmenter, GradientsMatchFiniteDifferences) {
  nn::UNet3D<double> m(SegmenterConfig::for_scheme(Scheme::Seg4, 2, 3));
  Rng rng(1);
  const auto x = uniform_tensor<double>({1, 3, 16, 16, 16}, rng);
  std::vector<std::uint8_t> labels(16 * 16 * 16);
  for (auto& v : labels) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  const auto probes = check_network_gradients(
      m, x, [&](const nn::Tensor<double>& y, nn::Tensor<double>* g) { return nn::segmentation_loss(y, labels, g); },
      24, 7);
  for (const auto& p : probes) EXPECT_LT(p.relative, 1e-3) << p.parameter << "[" << p.index << "]";
}
