#include "lungtriage/metrics.hpp"

#include <cmath>

#include "json.hpp"

namespace lungtriage {

namespace {

void require_same_shape(const SegmentationMask& a, const SegmentationMask& b) {
  if (a.shape != b.shape || a.labels.size() != b.labels.size()) {
    throw ShapeMismatch("mask shapes differ: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  }
}

}  // namespace

double dice(const SegmentationMask& pred, const SegmentationMask& truth, std::uint8_t label) {
  require_same_shape(pred, truth);
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] == label;
    const bool t = truth.labels[i] == label;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<double> per_label_dice(const SegmentationMask& pred, const SegmentationMask& truth) {
  require_same_shape(pred, truth);
  const int n = label_count(truth.scheme);
  std::vector<std::size_t> a(n, 0), b(n, 0), both(n, 0);
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const auto p = pred.labels[i];
    const auto t = truth.labels[i];
    if (p < n) ++a[p];
    if (t < n) ++b[t];
    if (p == t && p < n) ++both[p];
  }
  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) {
    out[k] = a[k] + b[k] == 0 ? 1.0 : 2.0 * static_cast<double>(both[k]) / static_cast<double>(a[k] + b[k]);
  }
  return out;
}

double mean_foreground_dice(const SegmentationMask& pred, const SegmentationMask& truth) {
  const auto d = per_label_dice(pred, truth);
  double s = 0.0;
  for (std::size_t k = 1; k < d.size(); ++k) s += d[k];
  return s / static_cast<double>(d.size() - 1);
}

MeanStd mean_dice_std(const std::vector<double>& v) {
  if (v.empty()) throw InvalidArgument("mean_dice_std needs at least one value");
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, std::sqrt(q / static_cast<double>(v.size()))};
}

double voxel_accuracy(const SegmentationMask& pred, const SegmentationMask& truth) {
  require_same_shape(pred, truth);
  if (pred.labels.empty()) throw InvalidArgument("voxel_accuracy of empty masks");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) eq += pred.labels[i] == truth.labels[i];
  return static_cast<double>(eq) / static_cast<double>(pred.labels.size());
}

double classification_accuracy(const std::vector<ClassLabel>& predicted, const std::vector<ClassLabel>& truth) {
  if (predicted.size() != truth.size()) {
    throw ShapeMismatch("prediction count " + std::to_string(predicted.size()) + " differs from truth count " +
                        std::to_string(truth.size()));
  }
  if (predicted.empty()) throw InvalidArgument("classification_accuracy of empty lists");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) eq += predicted[i] == truth[i];
  return static_cast<double>(eq) / static_cast<double>(predicted.size());
}

std::int64_t steps_total(int epochs, int iterations_per_epoch) {
  if (epochs < 1 || iterations_per_epoch < 1) throw InvalidArgument("epochs and iterations must be positive");
  return static_cast<std::int64_t>(epochs) * iterations_per_epoch;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "lungtriage-metrics";
  j["version"] = 1;
  j["epochs"] = epochs;
  j["iterations_per_epoch"] = iterations_per_epoch;
  j["total_steps"] = total_steps;
  j["train_loss"] = train_loss;
  j["validation_metric"] = validation_metric;
  j["validation_accuracy"] = validation_accuracy;
  auto cases = nlohmann::ordered_json::array();
  for (const auto& c : case_dice) {
    cases.push_back({{"case_id", c.case_id},
                     {"per_label", c.per_label},
                     {"mean_foreground", c.mean_foreground},
                     {"voxel_accuracy", c.voxel_accuracy}});
  }
  j["case_dice"] = cases;
  j["accuracy"] = accuracy ? nlohmann::ordered_json(*accuracy) : nlohmann::ordered_json(nullptr);
  j["mean_dice"] = mean_dice ? nlohmann::ordered_json(*mean_dice) : nlohmann::ordered_json(nullptr);
  j["std_dice"] = std_dice ? nlohmann::ordered_json(*std_dice) : nlohmann::ordered_json(nullptr);
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.value("format", "") != "lungtriage-metrics") throw InvalidArgument("not a metrics report");
  if (j.value("version", 0) != 1) throw InvalidArgument("unsupported metrics report version");
  MetricsReport r;
  r.epochs = j.at("epochs").get<int>();
  r.iterations_per_epoch = j.at("iterations_per_epoch").get<int>();
  r.total_steps = j.at("total_steps").get<std::int64_t>();
  r.train_loss = j.at("train_loss").get<std::vector<double>>();
  r.validation_metric = j.at("validation_metric").get<std::vector<double>>();
  r.validation_accuracy = j.at("validation_accuracy").get<std::vector<double>>();
  for (const auto& c : j.at("case_dice")) {
    r.case_dice.push_back({c.at("case_id").get<std::string>(), c.at("per_label").get<std::vector<double>>(),
                           c.at("mean_foreground").get<double>(), c.at("voxel_accuracy").get<double>()});
  }
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  r.accuracy = opt("accuracy");
  r.mean_dice = opt("mean_dice");
  r.std_dice = opt("std_dice");
  return r;
}

}  // namespace lungtriage
