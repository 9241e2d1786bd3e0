#include "lungtriage/service.hpp"

#include <atomic>
#include <mutex>
#include <shared_mutex>

#include "httplib.h"
#include "json.hpp"
#include "lungtriage/metrics.hpp"
#include "lungtriage/triage.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

namespace {

using Json = nlohmann::ordered_json;

struct SessionCase {
  std::mutex mutex;
  std::string case_id;
  Volume3D volume;
  std::vector<GuidanceClick> clicks;
  std::optional<SegmentationMask> truth;
  std::optional<std::string> latest_mask;
};

void reply_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& message, Json extra = Json::object()) {
  extra["error"] = message;
  reply_json(res, status, extra);
}

std::span<const std::uint8_t> body_bytes(const httplib::Request& req) {
  return {reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()};
}

SegmentationMask relabel(const SegmentationMask& truth, Scheme scheme) {
  if (truth.scheme == scheme) return truth;
  if (truth.scheme == Scheme::Seg4 && scheme == Scheme::Seg2) return to_seg2(truth);
  throw InvalidArgument("truth mask scheme " + std::string(to_string(truth.scheme)) + " cannot be scored as " +
                        std::string(to_string(scheme)));
}

}  // namespace

std::string classification_json(const VolumeClassification& r) {
  Json j;
  j["probabilities"] = {{"covid", r.probabilities.p[0]},
                        {"pneumonia", r.probabilities.p[1]},
                        {"normal", r.probabilities.p[2]}};
  j["predicted"] = std::string(to_string(r.predicted));
  return j.dump();
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  static constexpr char kTable[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
    out += kTable[(v >> 18) & 63];
    out += kTable[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kTable[(v >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kTable[v & 63] : '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw InvalidArgument("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      if (text[i + k] == '=') {
        v[k] = 0;
        ++pad;
      } else if ((v[k] = value(text[i + k])) < 0) {
        throw InvalidArgument("invalid base64 character");
      }
    }
    const std::uint32_t n = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xFF));
  }
  return out;
}

struct InferenceService::State {
  ServiceOptions options;
  std::optional<ClassifierModel> classifier;
  std::map<Scheme, SegmenterModel> segmenters;
  Json fingerprints = Json::object();

  std::shared_mutex cases_mutex;
  std::map<std::string, std::shared_ptr<SessionCase>> cases;
  std::shared_mutex masks_mutex;
  std::map<std::string, std::shared_ptr<const SegmentationMask>> masks;
  std::atomic<std::uint64_t> next_case{1};
  std::atomic<std::uint64_t> next_mask{1};

  std::shared_ptr<SessionCase> find_case(const std::string& id) {
    std::shared_lock lock(cases_mutex);
    const auto it = cases.find(id);
    return it == cases.end() ? nullptr : it->second;
  }

  std::shared_ptr<const SegmentationMask> find_mask(const std::string& id) {
    std::shared_lock lock(masks_mutex);
    const auto it = masks.find(id);
    return it == masks.end() ? nullptr : it->second;
  }

  std::string store_mask(SegmentationMask mask) {
    char id[32];
    std::snprintf(id, sizeof id, "mask-%06llu", static_cast<unsigned long long>(next_mask++));
    std::unique_lock lock(masks_mutex);
    masks.emplace(id, std::make_shared<const SegmentationMask>(std::move(mask)));
    return id;
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    Volume3D volume;
    try {
      volume = decode_volume(body_bytes(req));
      volume.validate();
    } catch (const std::exception& e) {
      return reply_error(res, 400, e.what());
    }
    auto c = std::make_shared<SessionCase>();
    char id[32];
    std::snprintf(id, sizeof id, "case-%06llu", static_cast<unsigned long long>(next_case++));
    c->case_id = id;
    const auto shape = volume.shape();
    c->volume = std::move(volume);
    {
      std::unique_lock lock(cases_mutex);
      cases.emplace(c->case_id, c);
    }
    reply_json(res, 201, {{"case_id", c->case_id}, {"shape", shape}});
  }

  void upload_truth(const httplib::Request& req, httplib::Response& res) {
    auto c = find_case(req.matches[1]);
    if (!c) return reply_error(res, 404, "unknown case");
    const auto scheme = parse_scheme(req.has_param("scheme") ? req.get_param_value("scheme") : "seg4");
    if (!scheme || *scheme == Scheme::Classification3) return reply_error(res, 400, "scheme must be seg2 or seg4");
    SegmentationMask mask;
    try {
      mask = decode_mask(body_bytes(req), *scheme);
    } catch (const std::exception& e) {
      return reply_error(res, 400, e.what());
    }
    std::lock_guard lock(c->mutex);
    if (mask.shape != c->volume.shape()) return reply_error(res, 400, "truth mask grid differs from the case volume");
    c->truth = std::move(mask);
    reply_json(res, 200, {{"case_id", c->case_id}, {"scheme", std::string(to_string(*scheme))}});
  }

  void classify(const httplib::Request& req, httplib::Response& res) {
    auto c = find_case(req.matches[1]);
    if (!c) return reply_error(res, 404, "unknown case");
    if (!classifier) return reply_error(res, 503, "no classifier loaded");
    const auto result = classify_volume(*classifier, c->volume, options.window);
    res.status = 200;
    res.set_content(classification_json(result), "application/json");
  }

  void segment_case(const httplib::Request& req, httplib::Response& res) {
    auto c = find_case(req.matches[1]);
    if (!c) return reply_error(res, 404, "unknown case");
    nlohmann::json body;
    try {
      body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
    } catch (const std::exception& e) {
      return reply_error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    if (!body.is_object()) return reply_error(res, 400, "body must be a JSON object");
    const auto scheme = parse_scheme(body.value("scheme", std::string("seg2")));
    if (!scheme || *scheme == Scheme::Classification3) return reply_error(res, 400, "scheme must be seg2 or seg4");
    const auto model = segmenters.find(*scheme);
    if (model == segmenters.end()) {
      return reply_error(res, 503, "no " + std::string(to_string(*scheme)) + " segmenter loaded");
    }
    const bool reset = body.value("reset", false);

    std::vector<GuidanceClick> incoming;
    const auto& shape = c->volume.shape();
    if (body.contains("clicks")) {
      if (!body["clicks"].is_array()) return reply_error(res, 400, "clicks must be an array");
      int index = 0;
      for (const auto& k : body["clicks"]) {
        GuidanceClick click;
        try {
          click.x = k.at("x").get<int>();
          click.y = k.at("y").get<int>();
          click.z = k.at("z").get<int>();
          const auto pol = k.value("polarity", std::string("positive"));
          if (pol == "positive") {
            click.polarity = Polarity::Positive;
          } else if (pol == "negative") {
            click.polarity = Polarity::Negative;
          } else {
            return reply_error(res, 400, "polarity must be positive or negative", {{"click_index", index}});
          }
        } catch (const nlohmann::json::exception&) {
          return reply_error(res, 400, "click needs integer x, y, z", {{"click_index", index}});
        }
        if (!in_bounds(shape, click.x, click.y, click.z)) {
          return reply_error(res, 422, "click outside volume " + shape_string(shape), {{"click_index", index}});
        }
        incoming.push_back(click);
        ++index;
      }
    }

    std::lock_guard lock(c->mutex);
    if (reset) c->clicks.clear();
    c->clicks.insert(c->clicks.end(), incoming.begin(), incoming.end());
    const auto guidance = make_guidance_maps(c->clicks, shape, options.guidance_sigma);
    auto out = segment(model->second, normalize_intensity(c->volume, options.window), guidance);

    Json reply;
    reply["case_id"] = c->case_id;
    reply["scheme"] = std::string(to_string(*scheme));
    reply["per_label_voxel_counts"] = out.mask.label_histogram();
    reply["click_count"] = c->clicks.size();
    if (c->truth) {
      try {
        const auto truth = relabel(*c->truth, *scheme);
        reply["dice"] = per_label_dice(out.mask, truth);
        reply["mean_dice"] = mean_foreground_dice(out.mask, truth);
      } catch (const InvalidArgument&) {
        reply["dice"] = nullptr;
      }
    }
    const std::string mask_id = store_mask(std::move(out.mask));
    c->latest_mask = mask_id;
    reply["mask_id"] = mask_id;
    reply_json(res, 200, reply);
  }

  void get_mask(const httplib::Request& req, httplib::Response& res) {
    const auto mask = find_mask(req.matches[1]);
    if (!mask) return reply_error(res, 404, "unknown mask");
    Json j;
    j["mask_id"] = std::string(req.matches[1]);
    j["shape"] = mask->shape;
    j["scheme"] = std::string(to_string(mask->scheme));
    j["order"] = "x-fastest";
    j["encoding"] = "gzip+base64";
    j["data"] = base64_encode(gzip_bytes(mask->labels));
    reply_json(res, 200, j);
  }

  void get_slice(const httplib::Request& req, httplib::Response& res) {
    auto c = find_case(req.matches[1]);
    if (!c) return reply_error(res, 404, "unknown case");
    const auto axis = parse_axis(std::string(req.matches[2]));
    if (!axis) return reply_error(res, 400, "axis must be x, y or z");
    int index = 0;
    try {
      index = std::stoi(std::string(req.matches[3]));
    } catch (const std::exception&) {
      return reply_error(res, 400, "index must be an integer");
    }
    std::shared_ptr<const SegmentationMask> overlay;
    if (req.has_param("overlay") && !req.get_param_value("overlay").empty()) {
      overlay = find_mask(req.get_param_value("overlay"));
      if (!overlay) return reply_error(res, 404, "unknown mask");
    }
    try {
      const auto png = render_slice_png(c->volume, overlay.get(), *axis, index, options.window);
      res.status = 200;
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    } catch (const OutOfRange& e) {
      reply_error(res, 416, e.what());
    } catch (const ShapeMismatch& e) {
      reply_error(res, 400, e.what());
    }
  }
};

InferenceService::InferenceService(ServiceModels models, ServiceOptions options) : state_(std::make_unique<State>()) {
  state_->options = options;
  Json fp = Json::object();
  if (models.classifier) {
    state_->classifier.emplace(load_classifier(*models.classifier));
    fp["classifier"] = checkpoint_fingerprint(*models.classifier);
  }
  for (const auto& [scheme, ckpt] : models.segmenters) {
    if (ckpt.scheme() != scheme) {
      throw InvalidArgument("segmenter checkpoint registered as " + std::string(to_string(scheme)) + " is " +
                            std::string(to_string(ckpt.scheme())));
    }
    state_->segmenters.emplace(scheme, load_segmenter(ckpt));
    fp[std::string(to_string(scheme))] = checkpoint_fingerprint(ckpt);
  }
  state_->fingerprints = fp;
}

InferenceService::~InferenceService() = default;

void InferenceService::attach(httplib::Server& server) {
  State* s = state_.get();
  server.set_payload_max_length(s->options.max_upload_bytes);
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply_error(res, 500, e.what());
    }
  });
  server.Post("/api/cases", [s](const auto& req, auto& res) { s->upload(req, res); });
  server.Post(R"(/api/cases/([^/]+)/truth)", [s](const auto& req, auto& res) { s->upload_truth(req, res); });
  server.Post(R"(/api/cases/([^/]+)/classify)", [s](const auto& req, auto& res) { s->classify(req, res); });
  server.Post(R"(/api/cases/([^/]+)/segment)", [s](const auto& req, auto& res) { s->segment_case(req, res); });
  server.Get(R"(/api/masks/([^/]+))", [s](const auto& req, auto& res) { s->get_mask(req, res); });
  server.Get(R"(/api/cases/([^/]+)/slices/([^/]+)/(-?[0-9]+))",
             [s](const auto& req, auto& res) { s->get_slice(req, res); });
  server.Get("/api/health", [s](const auto&, auto& res) {
    reply_json(res, 200, {{"status", "ok"}, {"checkpoints", s->fingerprints}});
  });
}

void InferenceService::listen(const std::string& host, int port) {
  httplib::Server server;
  attach(server);
  if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace lungtriage
