#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungtriage/classifier.hpp"
#include "lungtriage/config.hpp"
#include "lungtriage/segmenter.hpp"

namespace lungtriage {

enum class ModelKind : std::uint8_t { Classifier, Segmenter };

std::string_view to_string(ModelKind kind);

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Model weights (including batch-norm running statistics) with their configuration and
/// the validation metric they were selected on.
///
/// File layout: 8-byte magic "LTCKPT01", uint32 format version, uint64 header length,
/// a UTF-8 JSON header, then every tensor's float32 data in header order (little endian).
struct Checkpoint {
  ModelKind kind = ModelKind::Classifier;
  std::optional<ClassifierConfig> classifier;
  std::optional<SegmenterConfig> segmenter;
  std::optional<TrainConfig> train_config;
  int epoch = 0;
  std::string metric_name;
  double metric = 0.0;
  std::vector<NamedTensor> tensors;

  /// classification3 for classifiers, seg2/seg4 for segmenters.
  Scheme scheme() const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

Checkpoint capture_checkpoint(const ClassifierModel& model);
Checkpoint capture_checkpoint(const SegmenterModel& model);

/// Copy tensors into `params`; names, order and shapes must match exactly.
void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList<float>& params);

ClassifierModel load_classifier(const Checkpoint& ckpt);
SegmenterModel load_segmenter(const Checkpoint& ckpt);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 of the encoded bytes, rendered as 16 hex digits.
std::string checkpoint_fingerprint(const Checkpoint& ckpt);

}  // namespace lungtriage
