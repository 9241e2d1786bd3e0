// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit when any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradient_check.hpp"
#include "json.hpp"
#include "lungtriage/classifier.hpp"
#include "lungtriage/metrics.hpp"
#include "lungtriage/nn/loss.hpp"
#include "lungtriage/phantom.hpp"
#include "lungtriage/segmenter.hpp"
#include "lungtriage/training.hpp"
#include "lungtriage/transforms.hpp"
#include "lungtriage/triage.hpp"
#include "service_harness.hpp"
#include "test_support.hpp"

using namespace lungtriage;
using namespace lungtriage::testing;
using Json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  std::filesystem::path archive;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

void archive_text(const Context& ctx, const std::string& name, const std::string& text) {
  std::filesystem::create_directories(ctx.archive);
  std::ofstream(ctx.archive / name) << text << "\n";
}

// 1 -------------------------------------------------------------------------------------

double dice_by_sets(const SegmentationMask& a, const SegmentationMask& b, std::uint8_t label) {
  std::set<std::size_t> sa, sb;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    if (a.labels[i] == label) sa.insert(i);
    if (b.labels[i] == label) sb.insert(i);
  }
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t both = 0;
  for (auto i : sa) both += sb.count(i);
  return 2.0 * static_cast<double>(both) / static_cast<double>(sa.size() + sb.size());
}

Outcome dice_oracle(Context&) {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  const int pairs = 250;
  double worst = 0.0;
  int failures = 0;
  for (int t = 0; t < pairs; ++t) {
    const Shape3 s{rng.uniform_int(1, 10), rng.uniform_int(1, 10), rng.uniform_int(1, 10)};
    const Scheme scheme = rng.bernoulli(0.5) ? Scheme::Seg2 : Scheme::Seg4;
    const auto a = random_mask(s, scheme, rng, rng.uniform());
    const auto b = random_mask(s, scheme, rng, rng.uniform());
    for (int k = 0; k < label_count(scheme); ++k) {
      const auto label = static_cast<std::uint8_t>(k);
      const double d = dice(a, b, label);
      worst = std::max(worst, std::abs(d - dice_by_sets(a, b, label)));
      if (d != dice(b, a, label) || d < 0.0 || d > 1.0) ++failures;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && failures == 0 && secs < 10.0,
          std::to_string(pairs) + " pairs, max |dice - oracle| = " + fmt(worst) + ", symmetry/bound violations " +
              std::to_string(failures) + ", " + fmt(secs, 3) + " s"};
}

// 2 -------------------------------------------------------------------------------------

Outcome architecture(Context&) {
  const auto t0 = Clock::now();
  std::vector<std::string> problems;
  ClassifierConfig cc;
  cc.seed = 1;
  const ClassifierModel cls(cc);
  if (cls.conv_layer_count() != 49) problems.push_back("conv " + std::to_string(cls.conv_layer_count()));
  if (cls.fc_layer_count() != 1) problems.push_back("fc " + std::to_string(cls.fc_layer_count()));
  const auto declared = cls.feature_shape(224);
  if (declared != std::array<int, 3>{2048, 7, 7}) problems.push_back("declared feature shape");
  nn::Tensor<float> x({1, 3, 1, 224, 224}, 0.5f);
  const auto feat = cls.infer_features(x);
  if (feat.dims != nn::Dims{1, 2048, 1, 7, 7}) problems.push_back("feature map " + nn::dims_string(feat.dims));

  for (Scheme scheme : {Scheme::Seg2, Scheme::Seg4}) {
    for (int base : {8, 16}) {
      const SegmenterModel seg(SegmenterConfig::for_scheme(scheme, base, 1));
      const std::vector<int> expect{base, 2 * base, 4 * base, 8 * base};
      if (seg.levels() != 4) problems.push_back("levels");
      if (seg.skip_connection_count() != 3) problems.push_back("skips");
      if (seg.encoder_channels() != expect) problems.push_back("channels at base " + std::to_string(base));
      if (seg.out_channels() != label_count(scheme)) problems.push_back("out_channels");
      const nn::Tensor<float> v({1, 3, 16, 16, 16});
      if (seg.infer(v).dims != nn::Dims{1, label_count(scheme), 16, 16, 16}) problems.push_back("output grid");
    }
  }
  const double secs = seconds_since(t0);
  std::string detail = "classifier " + std::to_string(cls.conv_layer_count()) + " conv + " +
                       std::to_string(cls.fc_layer_count()) + " fc, features " + nn::dims_string(feat.dims) +
                       "; segmenter 4 levels, 3 skips, base*(1,2,4,8), heads 2/4; " + fmt(secs, 3) + " s";
  for (const auto& p : problems) detail += "; MISMATCH " + p;
  return {problems.empty() && secs < 30.0, detail};
}

// 3 -------------------------------------------------------------------------------------

Range random_range(Rng& rng, double center, double spread, bool degenerate) {
  if (degenerate) return {center, center};
  return {center - rng.uniform(0.01, spread), center + rng.uniform(0.01, spread)};
}

Outcome augmentation_gate(Context&) {
  const auto t0 = Clock::now();
  Rng rng(33);
  int test_changed = 0, train_unchanged = 0, identity_changed = 0, active = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    const Shape3 s{rng.uniform_int(24, 32), rng.uniform_int(24, 32), rng.uniform_int(12, 16)};
    const auto label = static_cast<ClassLabel>(rng.uniform_int(0, 2));
    const auto ph = generate_phantom(PhantomSpec::for_class(label, s, rng.next_u64()));
    const VolumeSample in{normalize_intensity(ph.volume, {}), ph.mask};

    AugmentationPolicy p;
    const bool identity = t % 5 == 4;
    p.scale = random_range(rng, 1.0, 0.2, identity || rng.bernoulli(0.5));
    p.rotation_deg = random_range(rng, 0.0, 20.0, identity || rng.bernoulli(0.5));
    p.translation_vox = random_range(rng, 0.0, 2.0, identity || rng.bernoulli(0.5));
    p.contrast = random_range(rng, 1.0, 0.3, identity || rng.bernoulli(0.5));
    p.affine_jitter = identity || rng.bernoulli(0.5) ? 0.0 : rng.uniform(0.01, 0.05);
    if (!identity && p.is_identity()) p.contrast = {0.8, 1.2};
    const auto seed = rng.next_u64();

    const auto test_out = augment(in, p, SplitRole::Test, seed);
    if (!(test_out.image == in.image) || !(test_out.mask == in.mask)) ++test_changed;
    const auto train_out = augment(in, p, SplitRole::Train, seed);
    if (identity) {
      if (!(train_out.image == in.image)) ++identity_changed;
    } else {
      ++active;
      if (train_out.image == in.image) ++train_unchanged;
    }
  }
  const double secs = seconds_since(t0);
  return {test_changed == 0 && train_unchanged == 0 && identity_changed == 0 && secs < 30.0,
          std::to_string(trials) + " samples: test-role changed " + std::to_string(test_changed) +
              ", train-role unchanged under a non-degenerate policy " + std::to_string(train_unchanged) + "/" +
              std::to_string(active) + ", degenerate policy changed " + std::to_string(identity_changed) + ", " +
              fmt(secs, 3) + " s"};
}

// 4 -------------------------------------------------------------------------------------

std::vector<CaseRecord> synthetic_records(int n) {
  std::vector<CaseRecord> out;
  for (int i = 0; i < n; ++i) {
    CaseRecord r;
    r.case_id = "rec-" + std::to_string(10000 + i);
    r.image_path = r.case_id + ".nii.gz";
    r.class_label = static_cast<ClassLabel>(i % 3);
    out.push_back(r);
  }
  return out;
}

std::array<int, 3> role_counts(const DatasetManifest& m) {
  std::array<int, 3> c{0, 0, 0};
  for (const auto& r : m.records) {
    ++c[r.split_role == SplitRole::Train ? 0 : r.split_role == SplitRole::Validation ? 1 : 2];
  }
  return c;
}

std::map<std::string, SplitRole> roles(const DatasetManifest& m) {
  std::map<std::string, SplitRole> out;
  for (const auto& r : m.records) out[r.case_id] = r.split_role;
  return out;
}

Outcome split_arithmetic(Context&) {
  std::vector<std::string> problems;
  if (role_counts(split_dataset(synthetic_records(20), Scheme::Seg4, 7)) != std::array<int, 3>{15, 3, 2}) {
    problems.push_back("20 -> 15/3/2");
  }
  if (role_counts(split_dataset(synthetic_records(199), Scheme::Seg2, 7)) != std::array<int, 3>{160, 39, 0}) {
    problems.push_back("199 -> 160/39");
  }
  int checked = 0;
  for (int n = 10; n <= 300; ++n) {
    const auto c = role_counts(split_dataset(synthetic_records(n), Scheme::Classification3, n));
    const int train = 7 * n / 10;
    if (c != std::array<int, 3>{train, n - train, 0}) problems.push_back("N=" + std::to_string(n));
    ++checked;
  }
  for (std::uint64_t seed : {1ull, 99ull, 123456789ull}) {
    auto recs = synthetic_records(57);
    const auto a = roles(split_dataset(recs, Scheme::Classification3, seed));
    std::reverse(recs.begin(), recs.end());
    const auto b = roles(split_dataset(recs, Scheme::Classification3, seed));
    if (a != b) problems.push_back("seed " + std::to_string(seed) + " not deterministic");
  }
  std::string detail = "20->15/3/2, 199->160/39, N in [10,300] -> (floor 0.7N, rest) for " + std::to_string(checked) +
                       " sizes, repeatable under seed";
  for (const auto& p : problems) detail += "; MISMATCH " + p;
  return {problems.empty(), detail};
}

// 5 -------------------------------------------------------------------------------------

Outcome steps_arithmetic(Context& ctx) {
  std::vector<std::string> problems;
  if (steps_total(300, 40) != 12000) problems.push_back("steps_total(300, 40)");
  TempDir dir("lt-steps");
  const auto manifest = write_phantom_dataset(
      dir.path(),
      {{ClassLabel::Covid, SplitRole::Train, 1}, {ClassLabel::Covid, SplitRole::Train, 2},
       {ClassLabel::Pneumonia, SplitRole::Train, 3}, {ClassLabel::Covid, SplitRole::Validation, 4}},
      {16, 16, 16}, Scheme::Seg2);
  struct Case {
    int epochs;
    int batch;
    std::optional<int> iterations;
  };
  std::string runs;
  for (const Case& c : {Case{3, 2, std::nullopt}, Case{2, 1, std::nullopt}, Case{2, 4, 5}}) {
    TrainConfig cfg = TrainConfig::defaults_for(Scheme::Seg2);
    cfg.segmenter_base_channels = 2;
    cfg.epochs = c.epochs;
    cfg.batch_size = c.batch;
    cfg.iterations_per_epoch = c.iterations;
    cfg.seed = 5;
    std::int64_t hook_steps = 0;
    TrainHooks hooks;
    hooks.on_iteration = [&](std::int64_t, double) { ++hook_steps; };
    const auto result = train(cfg, manifest, hooks);
    const int ipe = c.iterations.value_or((3 + c.batch - 1) / c.batch);
    const auto& m = result.report.metrics;
    const std::int64_t expect = static_cast<std::int64_t>(c.epochs) * ipe;
    if (m.total_steps != expect || hook_steps != expect || m.epochs != c.epochs || m.iterations_per_epoch != ipe ||
        m.total_steps != steps_total(m.epochs, m.iterations_per_epoch)) {
      problems.push_back("run " + std::to_string(c.epochs) + "x" + std::to_string(ipe) + " reported " +
                         std::to_string(m.total_steps));
    }
    runs += " " + std::to_string(c.epochs) + "x" + std::to_string(ipe) + "=" + std::to_string(m.total_steps);
    archive_text(ctx, "steps_" + std::to_string(c.epochs) + "x" + std::to_string(ipe) + ".json",
                 result.report.to_json());
  }
  std::string detail = "steps_total(300,40)=" + std::to_string(steps_total(300, 40)) + "; report.total_steps" + runs;
  for (const auto& p : problems) detail += "; MISMATCH " + p;
  return {problems.empty(), detail};
}

// 6 -------------------------------------------------------------------------------------

constexpr int kOverfitEpochs = 500;
constexpr int kOverfitIterations = 4;
constexpr double kOverfitMomentum = 0.99;
constexpr int kClassifierWidth = 8;
constexpr int kClassifierInput = 128;
constexpr int kClassifierEpochs = 150;

struct SegOverfit {
  double lesion_dice = 0.0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
};

SegOverfit overfit_segmenter(Context& ctx) {
  const auto t0 = Clock::now();
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {64, 64, 64}, 11));
  CachedCase c;
  c.case_id = "overfit-64";
  c.label = ClassLabel::Covid;
  c.image = normalize_intensity(ph.volume, IntensityWindow{});
  c.mask = ph.mask;
  CachedCase v = c;
  v.role = SplitRole::Validation;
  const auto train_set = CachedDataset::from_cases({c});
  const auto val_set = CachedDataset::from_cases({v});

  TrainConfig cfg = TrainConfig::defaults_for(Scheme::Seg4);
  cfg.learning_rate = 1e-3;
  cfg.momentum = kOverfitMomentum;
  cfg.batch_size = 1;
  cfg.epochs = kOverfitEpochs;
  cfg.iterations_per_epoch = kOverfitIterations;
  cfg.validation_every = 25;
  cfg.segmenter_base_channels = 8;
  cfg.seed = 3;
  const auto result = train(cfg, train_set, val_set);
  const auto eval = evaluate_segmenter(load_segmenter(result.last), val_set);
  archive_text(ctx, "overfit_seg4_train.json", result.report.to_json());
  archive_text(ctx, "overfit_seg4_final_eval.json", eval.to_json());

  SegOverfit out;
  out.lesion_dice = eval.case_dice.at(0).per_label.at(3);
  out.first_loss = result.report.metrics.train_loss.front();
  out.final_loss = result.report.metrics.train_loss.back();
  out.seconds = seconds_since(t0);
  return out;
}

struct ClsOverfit {
  int correct = 0;
  int total = 0;
  double seconds = 0.0;
};

ClsOverfit overfit_classifier(Context& ctx) {
  const auto t0 = Clock::now();
  TempDir dir("lt-cls");
  std::vector<PhantomCase> cases;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 4; ++i) cases.push_back({static_cast<ClassLabel>(k), SplitRole::Train, 100u + 10u * k + i});
  const auto manifest = write_phantom_dataset(dir.path(), cases, {64, 64, 16}, Scheme::Classification3);

  TrainConfig cfg = TrainConfig::defaults_for(Scheme::Classification3);
  cfg.classifier_width = kClassifierWidth;
  cfg.classifier_input_size = kClassifierInput;
  cfg.classifier_slices = SliceSelection::Central;
  cfg.learning_rate = 1e-2;
  cfg.momentum = 0.9;
  cfg.batch_size = 12;
  cfg.epochs = kClassifierEpochs;
  cfg.validation_every = 10;
  cfg.seed = 2;
  const auto train_set = CachedDataset::build(manifest, SplitRole::Train, cfg);
  std::vector<CachedCase> val_cases;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    auto copy = *train_set.get(i);
    copy.role = SplitRole::Validation;
    val_cases.push_back(std::move(copy));
  }
  const auto val_set = CachedDataset::from_cases(std::move(val_cases));
  const auto result = train(cfg, train_set, val_set);
  const auto eval = evaluate_classifier(load_classifier(result.last), train_set);
  archive_text(ctx, "overfit_classifier_train.json", result.report.to_json());

  ClsOverfit out;
  out.total = 0;
  for (std::size_t i = 0; i < train_set.size(); ++i) out.total += static_cast<int>(train_set.get(i)->slices.size());
  out.correct = static_cast<int>(std::lround(eval.accuracy.value_or(0.0) * out.total));
  out.seconds = seconds_since(t0);
  return out;
}

Outcome overfit(Context& ctx) {
  const auto seg = overfit_segmenter(ctx);
  const auto cls = overfit_classifier(ctx);
  const double total = seg.seconds + cls.seconds;
  const bool seg_ok = seg.lesion_dice >= 0.90 && seg.final_loss < 0.25 * seg.first_loss;
  const bool cls_ok = cls.total == 12 && cls.correct == 12;
  return {seg_ok && cls_ok && total <= 1800.0,
          "seg4 64^3 base 8 lr 1e-3: lesion Dice " + fmt(seg.lesion_dice) + " (>= 0.90), loss " + fmt(seg.first_loss) +
              " -> " + fmt(seg.final_loss) + " (ratio " + fmt(seg.final_loss / seg.first_loss, 3) +
              " < 0.25), " + fmt(seg.seconds, 4) + " s; classifier " + std::to_string(cls.correct) + "/" +
              std::to_string(cls.total) + ", " + fmt(cls.seconds, 4) + " s; total " + fmt(total, 4) + " s (<= 1800)"};
}

// 7 -------------------------------------------------------------------------------------

template <typename T>
nn::Tensor<T> uniform_tensor(nn::Dims d, Rng& rng) {
  nn::Tensor<T> t(d);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform());
  return t;
}

Outcome gradient_checks(Context& ctx) {
  Rng rng(71);
  ClassifierConfig cc;
  cc.width = 4;
  cc.input_size = 64;
  cc.seed = 5;
  nn::ResNet50<double> cls(cc);
  const auto cx = uniform_tensor<double>({3, 3, 1, 64, 64}, rng);
  const std::vector<int> labels{0, 1, 2};
  const auto cprobes = check_network_gradients(
      cls, cx, [&](const nn::Tensor<double>& y, nn::Tensor<double>* g) { return nn::softmax_cross_entropy(y, labels, g); },
      24, 7);

  nn::UNet3D<double> seg(SegmenterConfig::for_scheme(Scheme::Seg4, 2, 3));
  const auto sx = uniform_tensor<double>({1, 3, 16, 16, 16}, rng);
  std::vector<std::uint8_t> vox(16 * 16 * 16);
  for (auto& v : vox) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  const auto sprobes = check_network_gradients(
      seg, sx, [&](const nn::Tensor<double>& y, nn::Tensor<double>* g) { return nn::segmentation_loss(y, vox, g); },
      24, 7);

  Json log = Json::array();
  for (const auto* set : {&cprobes, &sprobes})
    for (const auto& p : *set)
      log.push_back({{"network", set == &cprobes ? "classifier" : "segmenter"},
                     {"parameter", p.parameter},
                     {"index", p.index},
                     {"numeric", p.numeric},
                     {"analytic", p.analytic},
                     {"relative", p.relative}});
  archive_text(ctx, "gradient_checks.json", log.dump(2));
  const double cw = worst_relative(cprobes);
  const double sw = worst_relative(sprobes);
  return {cprobes.size() >= 20 && sprobes.size() >= 20 && cw < 1e-3 && sw < 1e-3,
          "classifier (width 4, 64px, batch 3) " + std::to_string(cprobes.size()) + " params, worst rel " + fmt(cw, 3) +
              "; U-Net (base 2, 16^3) " + std::to_string(sprobes.size()) + " params, worst rel " + fmt(sw, 3) +
              " (< 1e-3)"};
}

// 8 -------------------------------------------------------------------------------------

Outcome routing_law(Context& ctx) {
  TempDir dir("lt-route");
  std::vector<PhantomCase> cases;
  const ClassLabel order[10] = {ClassLabel::Covid,  ClassLabel::Pneumonia, ClassLabel::Normal, ClassLabel::Covid,
                                ClassLabel::Normal, ClassLabel::Covid,     ClassLabel::Pneumonia, ClassLabel::Covid,
                                ClassLabel::Normal, ClassLabel::Pneumonia};
  for (int i = 0; i < 10; ++i) cases.push_back({order[i], SplitRole::Train, 500u + i});
  const Shape3 shape{48, 48, 8};
  const auto manifest = write_phantom_dataset(dir.path(), cases, shape, Scheme::Seg4);

  // Overfit a classifier on every axial slice of the ten cases.
  TrainConfig cfg = TrainConfig::defaults_for(Scheme::Classification3);
  cfg.classifier_width = kClassifierWidth;
  cfg.classifier_input_size = kClassifierInput;
  cfg.classifier_slices = SliceSelection::All;
  cfg.learning_rate = 1e-2;
  cfg.momentum = 0.9;
  cfg.batch_size = 16;
  cfg.epochs = 60;
  cfg.validation_every = 60;
  cfg.seed = 8;
  DatasetManifest cls_manifest = manifest;
  cls_manifest.labeling_scheme = Scheme::Classification3;
  for (auto& r : cls_manifest.records) r.mask_path.reset();
  const auto train_set = CachedDataset::build(cls_manifest, SplitRole::Train, cfg);
  auto val_case = *train_set.get(0);
  val_case.role = SplitRole::Validation;
  const auto result = train(cfg, train_set, CachedDataset::from_cases({val_case}));
  archive_text(ctx, "routing_classifier_train.json", result.report.to_json());
  const auto classifier = load_classifier(result.last);

  TriageOptions opt;
  opt.seg_scheme = Scheme::Seg4;
  const SegmenterModel segmenter(SegmenterConfig::for_scheme(Scheme::Seg4, 4, 9));
  const auto batch = triage_batch(manifest, classifier, segmenter, opt);
  archive_text(ctx, "routing_report.json", triage_report_json(batch));

  int correct = 0, routed = 0, violations = 0, covid_predicted = 0;
  std::vector<double> per_case;
  for (const auto& r : batch.results) {
    if (r.error) ++violations;
    correct += r.truth_label && r.predicted == *r.truth_label;
    covid_predicted += r.predicted == ClassLabel::Covid;
    if (r.mask.has_value() != (r.predicted == ClassLabel::Covid)) ++violations;
    if (r.mask) {
      ++routed;
      per_case.push_back(*r.mean_dice);
    }
  }
  double mean = 0.0, var = 0.0;
  for (double v : per_case) mean += v;
  if (!per_case.empty()) mean /= static_cast<double>(per_case.size());
  for (double v : per_case) var += (v - mean) * (v - mean);
  const double stdev = per_case.empty() ? 0.0 : std::sqrt(var / static_cast<double>(per_case.size()));
  const double dm = per_case.empty() ? 1.0 : std::abs(batch.summary.mean_dice.value_or(NAN) - mean);
  const double ds = per_case.empty() ? 1.0 : std::abs(batch.summary.std_dice.value_or(NAN) - stdev);
  const bool pass = correct == 10 && violations == 0 && routed == covid_predicted && dm <= 1e-12 && ds <= 1e-12;
  return {pass, "classifier " + std::to_string(correct) + "/10 correct; masks for " + std::to_string(routed) +
                    " cases, COVID-predicted " + std::to_string(covid_predicted) + ", routing violations " +
                    std::to_string(violations) + "; MeanDice " + fmt(mean, 6) + " +- " + fmt(stdev, 6) +
                    ", |summary - oracle| = " + fmt(dm, 3) + ", " + fmt(ds, 3) + " (<= 1e-12)"};
}

// 9 -------------------------------------------------------------------------------------

Outcome best_checkpoint_law(Context&) {
  Rng rng(909);
  int mismatches = 0, ties = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> h(rng.uniform_int(1, 60));
    for (auto& v : h) v = rng.uniform_int(0, 8) / 8.0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < h.size(); ++i)
      if (h[i] > h[best]) best = i;
    if (std::count(h.begin(), h.end(), h[best]) > 1) ++ties;
    if (select_best_checkpoint(h) != best) ++mismatches;
  }
  return {mismatches == 0, "100 histories (" + std::to_string(ties) + " with tied maxima), mismatches " +
                               std::to_string(mismatches)};
}

// 11 ------------------------------------------------------------------------------------

SegmentationMask fetch_mask(httplib::Client& client, const std::string& id) {
  const auto r = client.Get("/api/masks/" + id);
  const auto j = Json::parse(r->body);
  SegmentationMask m(j.at("shape").get<Shape3>(), *parse_scheme(j.at("scheme").get<std::string>()));
  m.labels = gunzip(base64_decode(j.at("data").get<std::string>()));
  return m;
}

Outcome service_equivalence(Context&) {
  ClassifierConfig cc;
  cc.width = 2;
  cc.input_size = 32;
  cc.seed = 4;
  ServiceModels models;
  models.classifier = capture_checkpoint(ClassifierModel(cc));
  models.segmenters[Scheme::Seg2] = capture_checkpoint(SegmenterModel(SegmenterConfig::for_scheme(Scheme::Seg2, 4, 5)));
  models.segmenters[Scheme::Seg4] = capture_checkpoint(SegmenterModel(SegmenterConfig::for_scheme(Scheme::Seg4, 4, 6)));
  ServiceHarness h(models);
  auto& client = h.client();

  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {24, 20, 16}, 21));
  const auto bytes = encode_volume(ph.volume, true);
  const auto up = client.Post("/api/cases", std::string(bytes.begin(), bytes.end()), "application/octet-stream");
  if (!up || up->status != 201) return {false, "upload failed"};
  const auto id = Json::parse(up->body).at("case_id").get<std::string>();
  std::vector<std::string> problems;
  int compared = 0;

  const auto cls = client.Post("/api/cases/" + id + "/classify", "", "application/json");
  if (cls->body != classification_json(classify_volume(load_classifier(*models.classifier), ph.volume))) {
    problems.push_back("classify payload");
  }
  ++compared;

  const auto norm = normalize_intensity(ph.volume, IntensityWindow{});
  const std::vector<GuidanceClick> clicks{{5, 6, 7, Polarity::Positive}, {15, 10, 4, Polarity::Negative}};
  const std::string click_json =
      R"([{"x":5,"y":6,"z":7,"polarity":"positive"},{"x":15,"y":10,"z":4,"polarity":"negative"}])";
  std::string last_mask;
  for (Scheme s : {Scheme::Seg2, Scheme::Seg4}) {
    const auto model = load_segmenter(models.segmenters.at(s));
    for (bool with_clicks : {false, true}) {
      const std::string body = std::string(R"({"reset":true,"scheme":")") + std::string(to_string(s)) + "\"" +
                               (with_clicks ? ",\"clicks\":" + click_json : "") + "}";
      const auto r = client.Post("/api/cases/" + id + "/segment", body, "application/json");
      const auto j = Json::parse(r->body);
      const auto lib = segment(model, norm, make_guidance_maps(with_clicks ? clicks : std::vector<GuidanceClick>{},
                                                               ph.volume.shape()));
      const auto served = fetch_mask(client, j.at("mask_id").get<std::string>());
      if (!(served == lib.mask)) problems.push_back(std::string(to_string(s)) + (with_clicks ? " clicked" : " zero"));
      if (j.at("per_label_voxel_counts").get<std::vector<std::size_t>>() != lib.mask.label_histogram()) {
        problems.push_back("voxel counts");
      }
      last_mask = j.at("mask_id").get<std::string>();
      ++compared;
    }
  }

  TempDir dir("lt-svc");
  const auto mask = fetch_mask(client, last_mask);
  for (Axis axis : {Axis::X, Axis::Y, Axis::Z}) {
    const int extent = ph.volume.shape()[static_cast<int>(axis)];
    for (int index : {0, extent / 2, extent - 1}) {
      const std::string a(1, "xyz"[static_cast<int>(axis)]);
      const auto r = client.Get("/api/cases/" + id + "/slices/" + a + "/" + std::to_string(index) +
                                "?overlay=" + last_mask);
      const auto path = dir / ("o" + a + std::to_string(index) + ".png");
      export_overlay(ph.volume, mask, axis, index, path);
      const auto file = read_file_bytes(path);
      if (r->body != std::string(file.begin(), file.end())) problems.push_back("slice " + a + std::to_string(index));
      ++compared;
    }
  }
  std::string detail = std::to_string(compared) +
                       " payloads compared (classify, seg2/seg4 zero and clicked masks, 9 overlay slices)";
  for (const auto& p : problems) detail += "; MISMATCH " + p;
  return {problems.empty(), detail};
}

struct Entry {
  int id;
  std::string name;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string archive = "acceptance-artifacts";
  app.add_option("--only", only, "Criterion ids to run (default: all)")->delimiter(',');
  app.add_option("--archive", archive, "Directory for trajectories and reports");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Entry> entries{
      {1, "dice-oracle", dice_oracle},
      {2, "architecture", architecture},
      {3, "augmentation-gate", augmentation_gate},
      {4, "split-arithmetic", split_arithmetic},
      {5, "steps-arithmetic", steps_arithmetic},
      {6, "overfit-sanity", overfit},
      {7, "gradient-checks", gradient_checks},
      {8, "routing-law", routing_law},
      {9, "best-checkpoint-law", best_checkpoint_law},
      {11, "service-library-equivalence", service_equivalence},
  };
  Context ctx{archive};
  int failed = 0;
  Json summary = Json::array();
  for (const auto& e : entries) {
    if (!only.empty() && std::find(only.begin(), only.end(), e.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = e.run(ctx);
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double secs = seconds_since(t0);
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << e.id << " " << e.name << " [" << fmt(secs, 4)
              << " s]: " << o.detail << std::endl;
    summary.push_back({{"criterion", e.id}, {"name", e.name}, {"pass", o.pass}, {"seconds", secs}, {"detail", o.detail}});
  }
  archive_text(ctx, "summary.json", summary.dump(2));
  return failed == 0 ? 0 : 1;
}
