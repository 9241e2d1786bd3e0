#include "lungtriage/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

namespace detail {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw InvalidArgument(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw InvalidArgument(std::string("unknown ") + what + " key '" + key + "'");
  }
}

Json range_json(const Range& r) { return Json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw InvalidArgument("range must be [lo, hi]");
  return {j[0].get<double>(), j[1].get<double>()};
}

Json shape_json(const std::optional<Shape3>& s) {
  return s ? Json::array({(*s)[0], (*s)[1], (*s)[2]}) : Json(nullptr);
}

std::optional<Shape3> shape_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_array() || j.size() != 3) throw InvalidArgument("shape must be [x, y, z]");
  return Shape3{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

template <typename E, typename Parse>
E parse_enum(const nlohmann::json& j, Parse parse, const char* what) {
  const auto text = j.get<std::string>();
  const auto v = parse(text);
  if (!v) throw InvalidArgument(std::string("invalid ") + what + " '" + text + "'");
  return *v;
}

}  // namespace

Json policy_to_json(const AugmentationPolicy& p) {
  Json j;
  j["scale"] = range_json(p.scale);
  j["crop_size"] = shape_json(p.crop_size);
  auto axes = Json::array();
  for (Axis a : p.flip_axes) axes.push_back(std::string(to_string(a)));
  j["flip_axes"] = axes;
  j["flip_probability"] = p.flip_probability;
  j["pad_to"] = shape_json(p.pad_to);
  j["rotation_deg"] = range_json(p.rotation_deg);
  j["translation_vox"] = range_json(p.translation_vox);
  j["affine_jitter"] = p.affine_jitter;
  j["grayscale"] = p.grayscale;
  j["contrast"] = range_json(p.contrast);
  j["fill_value"] = p.fill_value;
  auto roles = Json::array();
  for (SplitRole r : p.apply_roles) roles.push_back(std::string(to_string(r)));
  j["apply_roles"] = roles;
  return j;
}

AugmentationPolicy policy_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"scale", "crop_size", "flip_axes", "flip_probability", "pad_to", "rotation_deg", "translation_vox",
                  "affine_jitter", "grayscale", "contrast", "fill_value", "apply_roles"},
                 "augmentation");
  AugmentationPolicy p;
  if (j.contains("scale")) p.scale = range_from(j["scale"]);
  if (j.contains("crop_size")) p.crop_size = shape_from(j["crop_size"]);
  if (j.contains("flip_axes")) {
    for (const auto& a : j["flip_axes"]) p.flip_axes.push_back(parse_enum<Axis>(a, parse_axis, "axis"));
  }
  if (j.contains("flip_probability")) p.flip_probability = j["flip_probability"].get<double>();
  if (j.contains("pad_to")) p.pad_to = shape_from(j["pad_to"]);
  if (j.contains("rotation_deg")) p.rotation_deg = range_from(j["rotation_deg"]);
  if (j.contains("translation_vox")) p.translation_vox = range_from(j["translation_vox"]);
  if (j.contains("affine_jitter")) p.affine_jitter = j["affine_jitter"].get<double>();
  if (j.contains("grayscale")) p.grayscale = j["grayscale"].get<bool>();
  if (j.contains("contrast")) p.contrast = range_from(j["contrast"]);
  if (j.contains("fill_value")) p.fill_value = j["fill_value"].get<double>();
  if (j.contains("apply_roles")) {
    p.apply_roles.clear();
    for (const auto& r : j["apply_roles"]) p.apply_roles.insert(parse_enum<SplitRole>(r, parse_split_role, "role"));
  }
  p.validate();
  return p;
}

Json train_config_to_json(const TrainConfig& c) {
  Json j;
  j["task"] = std::string(to_string(c.task));
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["seed"] = c.seed;
  j["cache_enabled"] = c.cache_enabled;
  j["validation_every"] = c.validation_every;
  j["iterations_per_epoch"] = c.iterations_per_epoch ? Json(*c.iterations_per_epoch) : Json(nullptr);
  j["workers"] = c.workers;
  j["augmentation"] = policy_to_json(c.augmentation);
  j["window"] = Json::array({c.window.hu_min, c.window.hu_max});
  j["classifier_width"] = c.classifier_width;
  j["classifier_input_size"] = c.classifier_input_size;
  j["classifier_slices"] = c.classifier_slices == SliceSelection::Central ? "central" : "all";
  j["segmenter_base_channels"] = c.segmenter_base_channels;
  j["guidance_sigma"] = c.guidance_sigma;
  j["max_positive_clicks"] = c.max_positive_clicks;
  j["max_negative_clicks"] = c.max_negative_clicks;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"task", "batch_size", "epochs", "learning_rate", "momentum", "seed", "cache_enabled",
                  "validation_every", "iterations_per_epoch", "workers", "augmentation", "window", "classifier_width",
                  "classifier_input_size", "classifier_slices", "segmenter_base_channels", "guidance_sigma",
                  "max_positive_clicks", "max_negative_clicks"},
                 "train config");
  const Scheme task = j.contains("task") ? parse_enum<Scheme>(j["task"], parse_scheme, "task") : Scheme::Seg2;
  TrainConfig c = TrainConfig::defaults_for(task);
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("learning_rate", c.learning_rate);
  get("momentum", c.momentum);
  get("seed", c.seed);
  get("cache_enabled", c.cache_enabled);
  get("validation_every", c.validation_every);
  if (j.contains("iterations_per_epoch") && !j["iterations_per_epoch"].is_null()) {
    c.iterations_per_epoch = j["iterations_per_epoch"].get<int>();
  }
  get("workers", c.workers);
  if (j.contains("augmentation")) c.augmentation = policy_from_json(j["augmentation"]);
  if (j.contains("window")) {
    const auto& w = j["window"];
    if (!w.is_array() || w.size() != 2) throw InvalidArgument("window must be [hu_min, hu_max]");
    c.window = {w[0].get<double>(), w[1].get<double>()};
  }
  get("classifier_width", c.classifier_width);
  get("classifier_input_size", c.classifier_input_size);
  if (j.contains("classifier_slices")) {
    const auto s = j["classifier_slices"].get<std::string>();
    if (s == "central") {
      c.classifier_slices = SliceSelection::Central;
    } else if (s == "all") {
      c.classifier_slices = SliceSelection::All;
    } else {
      throw InvalidArgument("classifier_slices must be 'central' or 'all'");
    }
  }
  get("segmenter_base_channels", c.segmenter_base_channels);
  get("guidance_sigma", c.guidance_sigma);
  get("max_positive_clicks", c.max_positive_clicks);
  get("max_negative_clicks", c.max_negative_clicks);
  c.validate();
  return c;
}

Json classifier_config_to_json(const ClassifierConfig& c) {
  Json j;
  j["num_classes"] = c.num_classes;
  j["stage_block_counts"] = c.stage_block_counts;
  j["width"] = c.width;
  j["input_size"] = c.input_size;
  j["seed"] = c.seed;
  return j;
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"num_classes", "stage_block_counts", "width", "input_size", "seed"}, "classifier config");
  ClassifierConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.stage_block_counts = j.at("stage_block_counts").get<std::array<int, 4>>();
  c.width = j.at("width").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

Json segmenter_config_to_json(const SegmenterConfig& c) {
  Json j;
  j["levels"] = c.levels;
  j["in_channels"] = c.in_channels;
  j["out_channels"] = c.out_channels;
  j["base_channels"] = c.base_channels;
  j["seed"] = c.seed;
  return j;
}

SegmenterConfig segmenter_config_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"levels", "in_channels", "out_channels", "base_channels", "seed"}, "segmenter config");
  SegmenterConfig c;
  c.levels = j.at("levels").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

}  // namespace detail

namespace {

nlohmann::json parse(const std::string& text, const char* what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(std::string(what) + ": " + e.what());
  }
}

}  // namespace

TrainConfig TrainConfig::defaults_for(Scheme task) {
  TrainConfig c;
  c.task = task;
  c.learning_rate = task == Scheme::Seg4 ? 1e-4 : 5e-4;
  c.momentum = 0.95;
  return c;
}

std::string TrainConfig::selection_metric() const { return is_segmentation() ? "mean_dice" : "accuracy"; }

void TrainConfig::validate() const {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  if (validation_every < 1) throw InvalidArgument("validation_every must be >= 1");
  if (iterations_per_epoch && *iterations_per_epoch < 1) throw InvalidArgument("iterations_per_epoch must be >= 1");
  if (workers < 1) throw InvalidArgument("workers must be >= 1");
  if (max_positive_clicks < 0 || max_negative_clicks < 0) throw InvalidArgument("click counts must be >= 0");
  if (!(guidance_sigma > 0.0)) throw InvalidArgument("guidance_sigma must be > 0");
  augmentation.validate();
  window.validate();
}

std::string to_json(const TrainConfig& config) { return detail::train_config_to_json(config).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  return detail::train_config_from_json(parse(text, "train config"));
}

std::string to_json(const AugmentationPolicy& policy) { return detail::policy_to_json(policy).dump(2); }

AugmentationPolicy augmentation_policy_from_json(const std::string& text) {
  return detail::policy_from_json(parse(text, "augmentation policy"));
}

std::string to_json(const ClassifierConfig& config) { return detail::classifier_config_to_json(config).dump(2); }

ClassifierConfig classifier_config_from_json(const std::string& text) {
  return detail::classifier_config_from_json(parse(text, "classifier config"));
}

std::string to_json(const SegmenterConfig& config) { return detail::segmenter_config_to_json(config).dump(2); }

SegmenterConfig segmenter_config_from_json(const std::string& text) {
  return detail::segmenter_config_from_json(parse(text, "segmenter config"));
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VolumeIoError(VolumeIoError::Kind::MissingFile, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return train_config_from_json(ss.str());
}

void save_train_config(const TrainConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "cannot write config " + path.string());
  out << to_json(config) << "\n";
}

}  // namespace lungtriage
