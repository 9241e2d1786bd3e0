#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lungtriage/checkpoint.hpp"
#include "lungtriage/config.hpp"
#include "lungtriage/metrics.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

/// One case after the deterministic (non-random) preprocessing.
struct CachedCase {
  std::string case_id;
  SplitRole role = SplitRole::Train;
  std::optional<ClassLabel> label;
  /// Intensity-normalized volume.
  Volume3D image;
  /// Truth relabelled to the task scheme (segmentation tasks).
  std::optional<SegmentationMask> mask;
  /// Prepared classifier inputs and the axial indices they came from (classification task).
  std::vector<SliceImage2D> slices;
  std::vector<int> slice_indices;

  friend bool operator==(const CachedCase&, const CachedCase&) = default;
};

/// Preprocessed cases of one split. With caching enabled every case is loaded once at
/// build time and later reads never touch the source files; with caching disabled each
/// read reloads and re-preprocesses, yielding identical values.
class CachedDataset {
 public:
  static CachedDataset build(const DatasetManifest& manifest, SplitRole role, const TrainConfig& config);
  /// Wraps already preprocessed cases (always cached).
  static CachedDataset from_cases(std::vector<CachedCase> cases);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::shared_ptr<const CachedCase> get(std::size_t index) const;
  const std::string& case_id(std::size_t index) const { return records_[index].case_id; }

  /// Image/mask files read since construction.
  std::uint64_t source_reads() const { return reads_->load(); }

 private:
  std::vector<CaseRecord> records_;
  Scheme manifest_scheme_ = Scheme::Classification3;
  TrainConfig config_;
  bool cached_ = true;
  std::vector<std::shared_ptr<const CachedCase>> cases_;
  std::shared_ptr<std::atomic<std::uint64_t>> reads_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// Loads and preprocesses one record for `config.task`, counting file reads in `reads`.
CachedCase preprocess_case(const CaseRecord& record, Scheme manifest_scheme, const TrainConfig& config,
                           std::atomic<std::uint64_t>* reads = nullptr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> validation_metric;
  std::optional<double> validation_accuracy;
  double seconds = 0.0;
};

/// Training event handlers.
struct TrainHooks {
  std::function<void(std::int64_t step, double loss)> on_iteration;
  std::function<void(const EpochRecord&)> on_epoch_end;
};

struct TrainReport {
  MetricsReport metrics;
  /// Epoch number of each validation entry (1-based).
  std::vector<int> validation_epochs;
  int best_epoch = 0;
  std::string selected_checkpoint;
  std::optional<int> convergence_epoch;
  double wall_seconds = 0.0;

  std::string to_json() const;
};

struct TrainResult {
  TrainReport report;
  Checkpoint best;
  Checkpoint last;
};

/// Raised when a training loss is NaN or infinite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::int64_t step, double loss);
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// ceil(train_size / batch_size) unless the config fixes it.
int iterations_per_epoch(const TrainConfig& config, std::size_t train_size);

/// Trains on the manifest's train split and validates on its validation split.
TrainResult train(const TrainConfig& config, const DatasetManifest& manifest, const TrainHooks& hooks = {});
TrainResult train(const TrainConfig& config, const CachedDataset& train_set, const CachedDataset& validation_set,
                  const TrainHooks& hooks = {});

/// Index (0-based) of the largest value; ties resolve to the earliest entry.
std::size_t select_best_checkpoint(const std::vector<double>& history);

/// First 1-based entry within 1% of the plateau, the mean of the last ceil(10%) entries.
std::optional<int> convergence_epoch(const std::vector<double>& history);

/// Simulated clicks for one case and epoch: 0..max positives on lesion voxels and
/// 0..max negatives elsewhere, drawn uniformly.
std::vector<GuidanceClick> simulate_clicks(const SegmentationMask& mask, int max_positive, int max_negative,
                                           std::uint64_t seed);

/// Zero-guidance evaluation: per-case Dice, mean/std and voxel accuracy.
MetricsReport evaluate_segmenter(const SegmenterModel& model, const CachedDataset& data);
/// Slice-level accuracy over the prepared slices.
MetricsReport evaluate_classifier(const ClassifierModel& model, const CachedDataset& data);

}  // namespace lungtriage
