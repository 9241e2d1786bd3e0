#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "lungtriage/classifier.hpp"
#include "lungtriage/segmenter.hpp"
#include "lungtriage/transforms.hpp"
#include "lungtriage/types.hpp"

namespace lungtriage {

/// Which axial slices of each case feed classifier training.
enum class SliceSelection : std::uint8_t { Central, All };

/// Training run settings. Serialized as the JSON run config file.
struct TrainConfig {
  /// classification3 trains the classifier, seg2/seg4 the segmenter.
  Scheme task = Scheme::Seg2;
  int batch_size = 4;
  int epochs = 50;
  double learning_rate = 5e-4;
  double momentum = 0.95;
  std::uint64_t seed = 0;
  bool cache_enabled = true;
  int validation_every = 1;
  /// Defaults to ceil(train_size / batch_size); the last batch of an epoch may be short.
  std::optional<int> iterations_per_epoch;
  /// Cache-building threads; the cache content does not depend on this.
  int workers = 1;

  AugmentationPolicy augmentation;
  IntensityWindow window;

  int classifier_width = 64;
  int classifier_input_size = kClassifierInputSize;
  SliceSelection classifier_slices = SliceSelection::Central;

  int segmenter_base_channels = 16;
  double guidance_sigma = kDefaultGuidanceSigma;
  /// Simulated clicks per case and epoch are drawn from [0, max].
  int max_positive_clicks = 5;
  int max_negative_clicks = 5;

  /// 5e-4 for seg2 and classification3, 1e-4 for seg4; momentum 0.95.
  static TrainConfig defaults_for(Scheme task);

  bool is_segmentation() const { return task != Scheme::Classification3; }
  /// "accuracy" or "mean_dice".
  std::string selection_metric() const;
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

std::string to_json(const TrainConfig& config);
/// Missing keys keep the task defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const std::string& text);

std::string to_json(const AugmentationPolicy& policy);
AugmentationPolicy augmentation_policy_from_json(const std::string& text);

std::string to_json(const ClassifierConfig& config);
ClassifierConfig classifier_config_from_json(const std::string& text);
std::string to_json(const SegmenterConfig& config);
SegmenterConfig segmenter_config_from_json(const std::string& text);

TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const TrainConfig& config, const std::filesystem::path& path);

}  // namespace lungtriage
