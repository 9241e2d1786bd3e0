#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "lungtriage/checkpoint.hpp"
#include "lungtriage/classifier.hpp"
#include "lungtriage/segmenter.hpp"

namespace httplib {
class Server;
}

namespace lungtriage {

struct ServiceOptions {
  IntensityWindow window;
  double guidance_sigma = kDefaultGuidanceSigma;
  /// Uploads above this size are answered with 413.
  std::size_t max_upload_bytes = std::size_t{512} << 20;
};

/// Models served read-only. Any of them may be absent; routes needing a missing model
/// answer 503.
struct ServiceModels {
  std::optional<Checkpoint> classifier;
  std::map<Scheme, Checkpoint> segmenters;
};

/// HTTP front end over the triage library for the click-annotation loop.
///
/// Routes:
///   POST /api/cases                              NIfTI body (optionally gzip) -> 201 {case_id, shape}
///   POST /api/cases/{id}/truth?scheme=seg4       NIfTI label body -> 200
///   POST /api/cases/{id}/classify                -> {probabilities, predicted}
///   POST /api/cases/{id}/segment                 {clicks:[{x,y,z,polarity}], scheme, reset}
///                                                -> {mask_id, scheme, per_label_voxel_counts, click_count, dice?}
///   GET  /api/masks/{mask_id}                    -> {shape, scheme, encoding: "gzip+base64", data}
///   GET  /api/cases/{id}/slices/{axis}/{index}?overlay={mask_id}  -> image/png
///   GET  /api/health                             -> {status, checkpoints}
class InferenceService {
 public:
  InferenceService(ServiceModels models, ServiceOptions options = {});
  ~InferenceService();
  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  /// Installs every route on `server` and applies the upload limit.
  void attach(httplib::Server& server);

  /// Blocks serving on host:port.
  void listen(const std::string& host, int port);

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// JSON body of the classify route for a library result.
std::string classification_json(const VolumeClassification& result);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace lungtriage
