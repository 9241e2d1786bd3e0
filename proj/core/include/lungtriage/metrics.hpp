#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// 2|A & B| / (|A| + |B|) over the voxels carrying `label`; 1.0 when both sets are empty.
double dice(const SegmentationMask& pred, const SegmentationMask& truth, std::uint8_t label);

/// Dice for every label id of the truth scheme, indexed by id.
std::vector<double> per_label_dice(const SegmentationMask& pred, const SegmentationMask& truth);

/// Mean Dice over the foreground labels (ids 1..n-1) of the truth scheme.
double mean_foreground_dice(const SegmentationMask& pred, const SegmentationMask& truth);

struct MeanStd {
  double mean = 0.0;
  /// Population standard deviation.
  double std = 0.0;
};

MeanStd mean_dice_std(const std::vector<double>& per_case);

/// Fraction of voxels whose label ids agree.
double voxel_accuracy(const SegmentationMask& pred, const SegmentationMask& truth);

double classification_accuracy(const std::vector<ClassLabel>& predicted, const std::vector<ClassLabel>& truth);

std::int64_t steps_total(int epochs, int iterations_per_epoch);

struct CaseDice {
  std::string case_id;
  /// Indexed by label id.
  std::vector<double> per_label;
  double mean_foreground = 0.0;
  double voxel_accuracy = 0.0;
  friend bool operator==(const CaseDice&, const CaseDice&) = default;
};

/// Run or batch summary. Serialized as JSON with "format": "lungtriage-metrics", version 1.
struct MetricsReport {
  int epochs = 0;
  int iterations_per_epoch = 0;
  std::int64_t total_steps = 0;
  std::vector<double> train_loss;
  /// Selection metric after each validation pass.
  std::vector<double> validation_metric;
  std::vector<double> validation_accuracy;
  std::vector<CaseDice> case_dice;
  std::optional<double> accuracy;
  std::optional<double> mean_dice;
  std::optional<double> std_dice;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

}  // namespace lungtriage
