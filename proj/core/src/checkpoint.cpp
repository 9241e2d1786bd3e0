#include "lungtriage/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json_io.hpp"
#include "lungtriage/rng.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'T', 'C', 'K', 'P', 'T', '0', '1'};

Checkpoint capture(const std::vector<const nn::Parameter<float>*>& params) {
  Checkpoint c;
  for (const auto* p : params) c.tensors.push_back({p->name, p->shape, p->value});
  return c;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), b, b + sizeof(T));
}

}  // namespace

std::string_view to_string(ModelKind kind) { return kind == ModelKind::Classifier ? "classifier" : "segmenter"; }

Scheme Checkpoint::scheme() const {
  if (kind == ModelKind::Classifier) return Scheme::Classification3;
  if (!segmenter) throw InvalidArgument("segmenter checkpoint without a segmenter config");
  return segmenter->scheme();
}

Checkpoint capture_checkpoint(const ClassifierModel& model) {
  Checkpoint c = capture(model.parameters());
  c.kind = ModelKind::Classifier;
  c.classifier = model.config();
  return c;
}

Checkpoint capture_checkpoint(const SegmenterModel& model) {
  Checkpoint c = capture(model.parameters());
  c.kind = ModelKind::Segmenter;
  c.segmenter = model.config();
  return c;
}

void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList<float>& params) {
  if (params.size() != ckpt.tensors.size()) {
    throw InvalidArgument("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    auto* p = params[i];
    if (t.name != p->name || t.shape != p->shape || t.data.size() != p->value.size()) {
      throw InvalidArgument("checkpoint tensor '" + t.name + "' does not match model parameter '" + p->name + "'");
    }
    p->value = t.data;
  }
}

ClassifierModel load_classifier(const Checkpoint& ckpt) {
  if (ckpt.kind != ModelKind::Classifier || !ckpt.classifier) {
    throw InvalidArgument("expected a classifier checkpoint, got " + std::string(to_string(ckpt.kind)));
  }
  ClassifierModel m(*ckpt.classifier);
  restore_parameters(ckpt, m.parameters());
  return m;
}

SegmenterModel load_segmenter(const Checkpoint& ckpt) {
  if (ckpt.kind != ModelKind::Segmenter || !ckpt.segmenter) {
    throw InvalidArgument("expected a segmenter checkpoint, got " + std::string(to_string(ckpt.kind)));
  }
  SegmenterModel m(*ckpt.segmenter);
  restore_parameters(ckpt, m.parameters());
  return m;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  if (!std::isfinite(ckpt.metric)) throw InvalidArgument("checkpoint metric must be finite");
  detail::Json h;
  h["model_kind"] = std::string(to_string(ckpt.kind));
  if (ckpt.classifier) h["model_config"] = detail::classifier_config_to_json(*ckpt.classifier);
  if (ckpt.segmenter) h["model_config"] = detail::segmenter_config_to_json(*ckpt.segmenter);
  h["scheme"] = std::string(to_string(ckpt.scheme()));
  h["train_config"] = ckpt.train_config ? detail::train_config_to_json(*ckpt.train_config) : detail::Json(nullptr);
  h["epoch"] = ckpt.epoch;
  h["metric_name"] = ckpt.metric_name;
  h["metric"] = ckpt.metric;
  auto tensors = detail::Json::array();
  for (const auto& t : ckpt.tensors) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  h["tensors"] = tensors;
  const std::string header = h.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& t : ckpt.tensors) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), b, b + t.data.size() * sizeof(float));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  auto fail = [](const std::string& why) { return InvalidArgument("invalid checkpoint: " + why); };
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw fail("bad magic");
  std::uint32_t version;
  std::uint64_t header_len;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&header_len, bytes.data() + 12, 8);
  if (version != kCheckpointVersion) throw fail("unsupported version " + std::to_string(version));
  if (header_len > bytes.size() - 20) throw fail("truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(e.what());
  }
  Checkpoint c;
  const auto kind = h.at("model_kind").get<std::string>();
  if (kind == "classifier") {
    c.kind = ModelKind::Classifier;
    c.classifier = detail::classifier_config_from_json(h.at("model_config"));
  } else if (kind == "segmenter") {
    c.kind = ModelKind::Segmenter;
    c.segmenter = detail::segmenter_config_from_json(h.at("model_config"));
  } else {
    throw fail("unknown model kind '" + kind + "'");
  }
  if (!h.at("train_config").is_null()) c.train_config = detail::train_config_from_json(h.at("train_config"));
  c.epoch = h.at("epoch").get<int>();
  c.metric_name = h.at("metric_name").get<std::string>();
  c.metric = h.at("metric").get<double>();
  std::size_t offset = 20 + header_len;
  for (const auto& t : h.at("tensors")) {
    NamedTensor nt{t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>(), {}};
    std::size_t n = 1;
    for (int d : nt.shape) {
      if (d < 0) throw fail("negative tensor dim");
      n *= static_cast<std::size_t>(d);
    }
    if (bytes.size() - offset < n * sizeof(float)) throw fail("truncated tensor data for '" + nt.name + "'");
    nt.data.resize(n);
    std::memcpy(nt.data.data(), bytes.data() + offset, n * sizeof(float));
    offset += n * sizeof(float);
    c.tensors.push_back(std::move(nt));
  }
  if (offset != bytes.size()) throw fail("trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeIoError(VolumeIoError::Kind::MissingFile, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::string checkpoint_fingerprint(const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const std::uint64_t h =
      fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lungtriage
