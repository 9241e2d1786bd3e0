#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lungtriage/checkpoint.hpp"
#include "lungtriage/classifier.hpp"
#include "lungtriage/metrics.hpp"
#include "lungtriage/segmenter.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

struct TriageOptions {
  /// Requested mask scheme; must match the segmenter's head.
  Scheme seg_scheme = Scheme::Seg2;
  /// Also segment cases predicted Pneumonia. Off by default.
  bool segment_pneumonia = false;
  IntensityWindow window;
  double guidance_sigma = kDefaultGuidanceSigma;
};

struct TriageTimings {
  double classify_ms = 0.0;
  double segment_ms = 0.0;
};

struct TriageResult {
  std::string case_id;
  ClassProbabilities probabilities;
  ClassLabel predicted = ClassLabel::Normal;
  std::optional<ClassLabel> truth_label;
  /// Present exactly for routed (COVID-predicted) cases.
  std::optional<SegmentationMask> mask;
  /// Per-label Dice against the truth mask, when one was available.
  std::optional<std::vector<double>> dice;
  std::optional<double> mean_dice;
  TriageTimings timings;
  /// Set when the case failed; the batch carries on.
  std::optional<std::string> error;
};

/// Classify, then segment when the prediction is COVID. `clicks` become guidance maps;
/// without clicks the guidance is zero. Throws when the segmenter's scheme differs from
/// `options.seg_scheme`.
TriageResult triage_case(const ClassifierModel& classifier, const SegmenterModel& segmenter, const Volume3D& volume,
                         const TriageOptions& options, const std::vector<GuidanceClick>& clicks = {},
                         const SegmentationMask* truth = nullptr);

TriageResult triage_case(const Checkpoint& classifier, const Checkpoint& segmenter, const Volume3D& volume,
                         const TriageOptions& options, const std::vector<GuidanceClick>& clicks = {});

struct TriageBatch {
  /// One result per manifest record, sorted by case_id.
  std::vector<TriageResult> results;
  /// Classification accuracy over labelled cases; MeanDice +- Std over segmented cases
  /// with truth (absent when there are none).
  MetricsReport summary;
};

/// Triage every record of `manifest`. When `out_dir` is given, writes report.json plus a
/// mask (.nii.gz) and central axial overlay (.png) for each segmented case.
TriageBatch triage_batch(const DatasetManifest& manifest, const ClassifierModel& classifier,
                         const SegmenterModel& segmenter, const TriageOptions& options,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// Reruns on identical inputs give identical text unless timings are included.
std::string triage_report_json(const TriageBatch& batch, bool include_timings = false);

/// Overlay colours (RGB) by meaning; blended at kOverlayAlpha over the grey slice.
inline constexpr std::uint8_t kLeftLungColor[3] = {0, 114, 178};
inline constexpr std::uint8_t kRightLungColor[3] = {0, 158, 115};
inline constexpr std::uint8_t kLesionColor[3] = {213, 94, 0};
inline constexpr double kOverlayAlpha = 0.4;

/// RGB PNG of one slice of a Hounsfield volume mapped through `window`, with the mask
/// (if any) blended on top. Same orientation as extract_slice. Deterministic bytes.
std::vector<std::uint8_t> render_slice_png(const Volume3D& volume, const SegmentationMask* mask, Axis axis, int index,
                                           const IntensityWindow& window = {});

/// Writes render_slice_png to `path`.
void export_overlay(const Volume3D& volume, const SegmentationMask& mask, Axis axis, int index,
                    const std::filesystem::path& path, const IntensityWindow& window = {});

/// Decoded PNG pixels, for tests and tools.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};
RgbImage decode_png(const std::vector<std::uint8_t>& png);

}  // namespace lungtriage
