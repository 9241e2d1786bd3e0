#include "lungtriage/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <thread>

#include "json_io.hpp"
#include "lungtriage/nn/loss.hpp"
#include "lungtriage/nn/optimizer.hpp"
#include "lungtriage/rng.hpp"

namespace lungtriage {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

SegmentationMask mask_for_task(SegmentationMask mask, Scheme task) {
  if (mask.scheme == task) return mask;
  if (mask.scheme == Scheme::Seg4 && task == Scheme::Seg2) return to_seg2(mask);
  throw InvalidArgument("cannot derive " + std::string(to_string(task)) + " labels from a " +
                        std::string(to_string(mask.scheme)) + " mask");
}

// One training example: a case, and for classification the slice within it.
struct SampleRef {
  std::size_t case_index;
  int slice;
};

std::vector<SampleRef> enumerate_samples(const CachedDataset& data, bool classification) {
  std::vector<SampleRef> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!classification) {
      out.push_back({i, 0});
      continue;
    }
    const auto c = data.get(i);
    for (int s = 0; s < static_cast<int>(c->slices.size()); ++s) out.push_back({i, s});
  }
  return out;
}

std::string sample_key(const CachedCase& c, const SampleRef& ref, bool classification) {
  return classification ? c.case_id + "#" + std::to_string(c.slice_indices[ref.slice]) : c.case_id;
}

struct SegExample {
  nn::Tensor<float> input;
  std::vector<std::uint8_t> labels;
};

SegExample make_seg_example(const CachedCase& c, const TrainConfig& cfg, SplitRole role, int epoch,
                            bool with_clicks) {
  VolumeSample sample{c.image, c.mask};
  const VolumeSample aug = augment(sample, cfg.augmentation, role, derive_seed(cfg.seed, c.case_id, epoch, 1));
  std::vector<GuidanceClick> clicks;
  if (with_clicks) {
    clicks = simulate_clicks(*aug.mask, cfg.max_positive_clicks, cfg.max_negative_clicks,
                             derive_seed(cfg.seed, c.case_id, epoch, 2));
  }
  const auto guidance = make_guidance_maps(clicks, aug.image.shape(), cfg.guidance_sigma);
  return {make_segmenter_input(aug.image, guidance), aug.mask->labels};
}

nn::Tensor<float> stack(const std::vector<nn::Tensor<float>>& items) {
  nn::Dims d = items.front().dims;
  for (const auto& t : items) {
    if (t.dims[1] != d[1] || t.dims[2] != d[2] || t.dims[3] != d[3] || t.dims[4] != d[4]) {
      throw ShapeMismatch("samples in one batch differ in shape: " + nn::dims_string(d) + " vs " +
                          nn::dims_string(t.dims) + " (use crop_size or pad_to)");
    }
  }
  d[0] = static_cast<int>(items.size());
  nn::Tensor<float> out(d);
  std::size_t off = 0;
  for (const auto& t : items) {
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += t.size();
  }
  return out;
}

struct Validation {
  double metric = 0.0;
  std::optional<double> accuracy;
  std::vector<CaseDice> cases;
};

Validation validate_segmenter(const SegmenterModel& model, const CachedDataset& data, const TrainConfig& cfg,
                              int epoch) {
  Validation v;
  double acc = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = data.get(i);
    const VolumeSample aug =
        augment(VolumeSample{c->image, c->mask}, cfg.augmentation, SplitRole::Validation,
                derive_seed(cfg.seed, c->case_id, epoch, 1));
    const auto out = segment(model, aug.image, GuidanceMaps::zeros(aug.image.shape()));
    CaseDice cd{c->case_id, per_label_dice(out.mask, *aug.mask), mean_foreground_dice(out.mask, *aug.mask),
                voxel_accuracy(out.mask, *aug.mask)};
    acc += cd.voxel_accuracy;
    v.cases.push_back(std::move(cd));
  }
  double s = 0.0;
  for (const auto& c : v.cases) s += c.mean_foreground;
  v.metric = s / static_cast<double>(v.cases.size());
  v.accuracy = acc / static_cast<double>(v.cases.size());
  return v;
}

Validation validate_classifier(const ClassifierModel& model, const CachedDataset& data, const TrainConfig& cfg,
                               int epoch) {
  std::vector<ClassLabel> pred, truth;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = data.get(i);
    for (std::size_t s = 0; s < c->slices.size(); ++s) {
      const auto key = c->case_id + "#" + std::to_string(c->slice_indices[s]);
      const auto img =
          augment(c->slices[s], cfg.augmentation, SplitRole::Validation, derive_seed(cfg.seed, key, epoch, 1));
      pred.push_back(classify_slice(model, img).argmax());
      truth.push_back(*c->label);
    }
  }
  Validation v;
  v.metric = classification_accuracy(pred, truth);
  v.accuracy = v.metric;
  return v;
}

template <typename Model>
TrainResult run_training(Model& model, const TrainConfig& cfg, const CachedDataset& train_set,
                         const CachedDataset& val_set, const TrainHooks& hooks) {
  const bool classification = !cfg.is_segmentation();
  const auto t_start = Clock::now();
  const auto samples = enumerate_samples(train_set, classification);
  if (samples.empty()) throw InvalidArgument("train split has no samples");
  const int iters = iterations_per_epoch(cfg, samples.size());

  nn::Sgd<float> opt(model.parameters(), cfg.learning_rate, cfg.momentum);
  TrainResult result;
  auto& rep = result.report;
  rep.metrics.epochs = cfg.epochs;
  rep.metrics.iterations_per_epoch = iters;
  rep.metrics.total_steps = steps_total(cfg.epochs, iters);

  std::int64_t step = 0;
  double best = -INFINITY;
  std::vector<CaseDice> best_cases;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng(derive_seed(cfg.seed, "epoch-order", static_cast<std::uint64_t>(epoch))).shuffle(order);

    double loss_sum = 0.0;
    for (int it = 0; it < iters; ++it, ++step) {
      const std::size_t start = (static_cast<std::size_t>(it) * cfg.batch_size) % order.size();
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::vector<nn::Tensor<float>> inputs;
      nn::Tensor<float> grad;
      double loss = 0.0;
      if (classification) {
        std::vector<int> labels;
        for (std::size_t k = 0; k < count; ++k) {
          const auto& ref = samples[order[start + k]];
          const auto c = train_set.get(ref.case_index);
          const auto img = augment(c->slices[ref.slice], cfg.augmentation, SplitRole::Train,
                                   derive_seed(cfg.seed, sample_key(*c, ref, true), epoch, 1));
          inputs.push_back(slice_to_tensor(img));
          labels.push_back(static_cast<int>(*c->label));
        }
        opt.zero_grad();
        const auto logits = model.forward(stack(inputs));
        loss = nn::softmax_cross_entropy(logits, labels, &grad);
      } else {
        std::vector<std::uint8_t> labels;
        for (std::size_t k = 0; k < count; ++k) {
          const auto c = train_set.get(samples[order[start + k]].case_index);
          auto ex = make_seg_example(*c, cfg, SplitRole::Train, epoch, true);
          inputs.push_back(std::move(ex.input));
          labels.insert(labels.end(), ex.labels.begin(), ex.labels.end());
        }
        opt.zero_grad();
        const auto logits = model.forward(stack(inputs));
        loss = nn::segmentation_loss(logits, labels, &grad);
      }
      if (!std::isfinite(loss)) throw TrainingDiverged(step, loss);
      model.backward(grad);
      opt.step();
      loss_sum += loss;
      if (hooks.on_iteration) hooks.on_iteration(step, loss);
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / iters;
    rep.metrics.train_loss.push_back(record.train_loss);

    if (epoch % cfg.validation_every == 0 && !val_set.empty()) {
      Validation v;
      if constexpr (std::is_same_v<Model, SegmenterModel>) {
        v = validate_segmenter(model, val_set, cfg, epoch);
      } else {
        v = validate_classifier(model, val_set, cfg, epoch);
      }
      record.validation_metric = v.metric;
      record.validation_accuracy = v.accuracy;
      rep.metrics.validation_metric.push_back(v.metric);
      if (v.accuracy) rep.metrics.validation_accuracy.push_back(*v.accuracy);
      rep.validation_epochs.push_back(epoch);
      if (v.metric > best) {
        best = v.metric;
        best_cases = v.cases;
        result.best = capture_checkpoint(model);
        result.best.epoch = epoch;
        result.best.metric = v.metric;
      }
    }
    record.seconds = seconds_since(t_epoch);
    if (hooks.on_epoch_end) hooks.on_epoch_end(record);
  }

  result.last = capture_checkpoint(model);
  result.last.epoch = cfg.epochs;
  result.last.metric = rep.metrics.validation_metric.empty() ? 0.0 : rep.metrics.validation_metric.back();
  if (rep.metrics.validation_metric.empty()) {
    result.best = result.last;
    rep.best_epoch = cfg.epochs;
  } else {
    rep.best_epoch = rep.validation_epochs[select_best_checkpoint(rep.metrics.validation_metric)];
  }
  for (auto* c : {&result.best, &result.last}) {
    c->train_config = cfg;
    c->metric_name = cfg.selection_metric();
  }
  char id[32];
  std::snprintf(id, sizeof id, "epoch-%04d", rep.best_epoch);
  rep.selected_checkpoint = id;
  if (!rep.metrics.validation_metric.empty()) {
    if (const auto ce = convergence_epoch(rep.metrics.validation_metric)) {
      rep.convergence_epoch = rep.validation_epochs[static_cast<std::size_t>(*ce - 1)];
    }
  }
  if (cfg.is_segmentation()) {
    rep.metrics.case_dice = best_cases;
    if (!best_cases.empty()) {
      std::vector<double> v;
      for (const auto& c : best_cases) v.push_back(c.mean_foreground);
      const auto ms = mean_dice_std(v);
      rep.metrics.mean_dice = ms.mean;
      rep.metrics.std_dice = ms.std;
    }
  } else if (!rep.metrics.validation_metric.empty()) {
    rep.metrics.accuracy = rep.metrics.validation_metric[select_best_checkpoint(rep.metrics.validation_metric)];
  }
  rep.wall_seconds = seconds_since(t_start);
  return result;
}

}  // namespace

TrainingDiverged::TrainingDiverged(std::int64_t step, double loss)
    : Error("non-finite training loss " + std::to_string(loss) + " at step " + std::to_string(step)), step_(step) {}

CachedCase preprocess_case(const CaseRecord& record, Scheme manifest_scheme, const TrainConfig& config,
                           std::atomic<std::uint64_t>* reads) {
  auto count = [&] {
    if (reads != nullptr) reads->fetch_add(1);
  };
  CachedCase c;
  c.case_id = record.case_id;
  c.role = record.split_role;
  c.label = record.class_label;
  try {
    Volume3D raw = load_volume(record.image_path);
    count();
    c.image = normalize_intensity(raw, config.window);
    if (config.is_segmentation()) {
      if (!record.mask_path) throw InvalidArgument("no mask_path");
      if (manifest_scheme == Scheme::Classification3) throw InvalidArgument("manifest scheme has no masks");
      SegmentationMask m = load_mask(*record.mask_path, manifest_scheme);
      count();
      if (m.shape != raw.shape()) throw ShapeMismatch("mask grid differs from image grid");
      c.mask = mask_for_task(std::move(m), config.task);
    } else {
      if (!c.label) throw InvalidArgument("no class_label");
      const int nz = c.image.shape()[2];
      if (config.classifier_slices == SliceSelection::Central) {
        c.slice_indices = {nz / 2};
      } else {
        for (int z = 0; z < nz; ++z) c.slice_indices.push_back(z);
      }
      for (int z : c.slice_indices) {
        c.slices.push_back(prepare_classifier_input(extract_slice(c.image, Axis::Z, z), config.classifier_input_size));
      }
    }
  } catch (const std::exception& e) {
    throw Error("case '" + record.case_id + "': " + e.what());
  }
  return c;
}

CachedDataset CachedDataset::build(const DatasetManifest& manifest, SplitRole role, const TrainConfig& config) {
  CachedDataset d;
  for (const auto* r : manifest.with_role(role)) d.records_.push_back(*r);
  std::sort(d.records_.begin(), d.records_.end(),
            [](const CaseRecord& a, const CaseRecord& b) { return a.case_id < b.case_id; });
  d.manifest_scheme_ = manifest.labeling_scheme;
  d.config_ = config;
  d.cached_ = config.cache_enabled;
  if (!d.cached_) return d;

  d.cases_.resize(d.records_.size());
  std::vector<std::exception_ptr> errors(d.records_.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < d.records_.size(); i = next++) {
      try {
        d.cases_[i] = std::make_shared<const CachedCase>(
            preprocess_case(d.records_[i], d.manifest_scheme_, d.config_, d.reads_.get()));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(config.workers, static_cast<int>(d.records_.size())));
  std::vector<std::thread> threads;
  for (int t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return d;
}

CachedDataset CachedDataset::from_cases(std::vector<CachedCase> cases) {
  std::sort(cases.begin(), cases.end(), [](const CachedCase& a, const CachedCase& b) { return a.case_id < b.case_id; });
  CachedDataset d;
  for (auto& c : cases) {
    CaseRecord r;
    r.case_id = c.case_id;
    r.split_role = c.role;
    r.class_label = c.label;
    d.records_.push_back(r);
    d.cases_.push_back(std::make_shared<const CachedCase>(std::move(c)));
  }
  return d;
}

std::shared_ptr<const CachedCase> CachedDataset::get(std::size_t index) const {
  if (index >= records_.size()) throw InvalidArgument("dataset index out of range");
  if (cached_) return cases_[index];
  return std::make_shared<const CachedCase>(preprocess_case(records_[index], manifest_scheme_, config_, reads_.get()));
}

int iterations_per_epoch(const TrainConfig& config, std::size_t train_size) {
  if (config.iterations_per_epoch) return *config.iterations_per_epoch;
  if (train_size == 0) throw InvalidArgument("empty train split");
  return static_cast<int>((train_size + config.batch_size - 1) / config.batch_size);
}

TrainResult train(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks) {
  config.validate();
  manifest.validate();
  const auto train_set = CachedDataset::build(manifest, SplitRole::Train, config);
  const auto val_set = CachedDataset::build(manifest, SplitRole::Validation, config);
  return train(config, train_set, val_set, hooks);
}

TrainResult train(const TrainConfig& config, const CachedDataset& train_set, const CachedDataset& validation_set,
                  const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) throw InvalidArgument("train split is empty");
  if (validation_set.empty()) throw InvalidArgument("validation split is empty");
  if (config.is_segmentation()) {
    SegmenterModel model(SegmenterConfig::for_scheme(config.task, config.segmenter_base_channels, config.seed));
    return run_training(model, config, train_set, validation_set, hooks);
  }
  ClassifierConfig cc;
  cc.width = config.classifier_width;
  cc.input_size = config.classifier_input_size;
  cc.seed = config.seed;
  ClassifierModel model(cc);
  return run_training(model, config, train_set, validation_set, hooks);
}

std::size_t select_best_checkpoint(const std::vector<double>& history) {
  if (history.empty()) throw InvalidArgument("empty metric history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[best]) best = i;
  }
  return best;
}

std::optional<int> convergence_epoch(const std::vector<double>& history) {
  if (history.empty()) return std::nullopt;
  const std::size_t tail = std::max<std::size_t>(1, (history.size() + 9) / 10);
  double plateau = 0.0;
  for (std::size_t i = history.size() - tail; i < history.size(); ++i) plateau += history[i];
  plateau /= static_cast<double>(tail);
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (std::abs(history[i] - plateau) <= 0.01 * std::abs(plateau)) return static_cast<int>(i + 1);
  }
  return std::nullopt;
}

std::vector<GuidanceClick> simulate_clicks(const SegmentationMask& mask, int max_positive, int max_negative,
                                           std::uint64_t seed) {
  Rng rng(seed);
  const std::uint8_t lesion = lesion_label(mask.scheme);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) (mask.labels[i] == lesion ? pos : neg).push_back(i);
  const int n_pos = rng.uniform_int(0, max_positive);
  const int n_neg = rng.uniform_int(0, max_negative);
  std::vector<GuidanceClick> clicks;
  auto pick = [&](const std::vector<std::size_t>& from, int n, Polarity p) {
    if (from.empty()) return;
    for (int k = 0; k < n; ++k) {
      const std::size_t i = from[static_cast<std::size_t>(rng.uniform() * static_cast<double>(from.size()))];
      const int nx = mask.shape[0], ny = mask.shape[1];
      clicks.push_back({static_cast<int>(i % nx), static_cast<int>((i / nx) % ny), static_cast<int>(i / (static_cast<std::size_t>(nx) * ny)), p});
    }
  };
  pick(pos, n_pos, Polarity::Positive);
  pick(neg, n_neg, Polarity::Negative);
  return clicks;
}

MetricsReport evaluate_segmenter(const SegmenterModel& model, const CachedDataset& data) {
  MetricsReport r;
  std::vector<double> per_case;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = data.get(i);
    if (!c->mask) throw InvalidArgument("case '" + c->case_id + "' has no truth mask");
    const auto out = segment(model, c->image, GuidanceMaps::zeros(c->image.shape()));
    r.case_dice.push_back({c->case_id, per_label_dice(out.mask, *c->mask), mean_foreground_dice(out.mask, *c->mask),
                           voxel_accuracy(out.mask, *c->mask)});
    per_case.push_back(r.case_dice.back().mean_foreground);
  }
  if (!per_case.empty()) {
    const auto ms = mean_dice_std(per_case);
    r.mean_dice = ms.mean;
    r.std_dice = ms.std;
    double acc = 0.0;
    for (const auto& c : r.case_dice) acc += c.voxel_accuracy;
    r.accuracy = acc / static_cast<double>(r.case_dice.size());
  }
  return r;
}

MetricsReport evaluate_classifier(const ClassifierModel& model, const CachedDataset& data) {
  std::vector<ClassLabel> pred, truth;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = data.get(i);
    if (!c->label) throw InvalidArgument("case '" + c->case_id + "' has no class label");
    for (const auto& s : c->slices) {
      pred.push_back(classify_slice(model, s).argmax());
      truth.push_back(*c->label);
    }
  }
  MetricsReport r;
  if (!pred.empty()) r.accuracy = classification_accuracy(pred, truth);
  return r;
}

std::string TrainReport::to_json() const {
  detail::Json j;
  j["format"] = "lungtriage-train-report";
  j["version"] = 1;
  j["metrics"] = detail::Json::parse(metrics.to_json());
  j["validation_epochs"] = validation_epochs;
  j["best_epoch"] = best_epoch;
  j["selected_checkpoint"] = selected_checkpoint;
  j["convergence_epoch"] = convergence_epoch ? detail::Json(*convergence_epoch) : detail::Json(nullptr);
  j["wall_seconds"] = wall_seconds;
  return j.dump(2);
}

}  // namespace lungtriage
