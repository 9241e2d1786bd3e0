#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

#include "lungtriage/rng.hpp"
#include "lungtriage/volume_io.hpp"

namespace lungtriage {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "lungtriage-manifest";
constexpr int kManifestVersion = 1;

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_relative() ? base / path : path;
}

std::string relativize(const fs::path& base, const fs::path& p) {
  if (p.is_relative()) return p.generic_string();
  std::error_code ec;
  const auto rel = fs::relative(p, base, ec);
  if (!ec && !rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

}  // namespace

std::vector<const CaseRecord*> DatasetManifest::with_role(SplitRole role) const {
  std::vector<const CaseRecord*> out;
  for (const auto& r : records) {
    if (r.split_role == role) out.push_back(&r);
  }
  return out;
}

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.case_id.empty()) throw InvalidArgument("manifest record with empty case_id");
    if (!seen.insert(r.case_id).second) throw InvalidArgument("duplicate case_id in manifest: " + r.case_id);
  }
}

ManifestLoadResult load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest: " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  ManifestLoadResult result;
  auto& m = result.manifest;
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!have_header) {
      if (obj.value("format", "") != kManifestFormat) {
        throw Error("manifest line 1 must be the header object with format \"lungtriage-manifest\"");
      }
      if (obj.value("version", 0) != kManifestVersion) throw Error("unsupported manifest version");
      const auto scheme = parse_scheme(obj.value("labeling_scheme", ""));
      if (!scheme) throw Error("manifest header has an unknown labeling_scheme");
      m.labeling_scheme = *scheme;
      m.seed = obj.value("seed", std::uint64_t{0});
      have_header = true;
      continue;
    }
    try {
      CaseRecord r;
      r.case_id = obj.at("case_id").get<std::string>();
      r.image_path = resolve(base, obj.at("image_path").get<std::string>());
      const auto mask = obj.value("mask_path", "");
      if (!mask.empty()) r.mask_path = resolve(base, mask);
      const auto label = obj.value("class_label", "");
      if (!label.empty()) {
        r.class_label = parse_class_label(label);
        if (!r.class_label) throw Error("unknown class_label '" + label + "'");
      }
      const auto role = parse_split_role(obj.value("split_role", "train"));
      if (!role) throw Error("unknown split_role");
      r.split_role = *role;
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw Error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw Error("manifest is empty: " + path.string());
  m.validate();

  for (const auto& r : m.records) {
    std::error_code ec;
    const bool image_ok = fs::exists(r.image_path, ec);
    if (!image_ok) result.warnings.push_back(r.case_id + ": image file not found: " + r.image_path.string());
    if (r.mask_path) {
      if (!fs::exists(*r.mask_path, ec)) {
        result.warnings.push_back(r.case_id + ": mask file not found: " + r.mask_path->string());
      } else if (image_ok) {
        try {
          if (read_volume_shape(*r.mask_path) != read_volume_shape(r.image_path)) {
            result.warnings.push_back(r.case_id + ": mask grid differs from image grid");
          }
        } catch (const Error& e) {
          result.warnings.push_back(r.case_id + ": unreadable header: " + e.what());
        }
      }
    }
  }
  return result;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  manifest.validate();
  const fs::path base = path.has_parent_path() ? fs::absolute(path.parent_path()) : fs::current_path();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest: " + path.string());
  json header{{"format", kManifestFormat},
              {"version", kManifestVersion},
              {"labeling_scheme", std::string(to_string(manifest.labeling_scheme))},
              {"seed", manifest.seed}};
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    json obj{{"case_id", r.case_id},
             {"image_path", relativize(base, fs::absolute(r.image_path))},
             {"mask_path", r.mask_path ? relativize(base, fs::absolute(*r.mask_path)) : std::string()},
             {"class_label", r.class_label ? std::string(to_string(*r.class_label)) : std::string()},
             {"split_role", std::string(to_string(r.split_role))}};
    out << obj.dump() << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

SplitPlan SplitPlan::for_scheme(Scheme scheme) {
  SplitPlan plan;
  switch (scheme) {
    case Scheme::Classification3: plan.train_fraction = 0.70; break;
    case Scheme::Seg4:
      plan.train_count = 15;
      plan.validation_count = 3;
      plan.test_count = 2;
      break;
    case Scheme::Seg2:
      plan.train_count = 160;
      plan.validation_count = 39;
      break;
  }
  return plan;
}

DatasetManifest split_dataset(std::vector<CaseRecord> records, Scheme scheme, std::uint64_t seed,
                              std::optional<SplitPlan> plan_opt) {
  if (records.empty()) throw InvalidArgument("cannot split an empty record list");
  DatasetManifest out;
  out.labeling_scheme = scheme;
  out.seed = seed;
  out.records = std::move(records);
  out.validate();
  const SplitPlan plan = plan_opt.value_or(SplitPlan::for_scheme(scheme));

  std::vector<std::size_t> order(out.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return out.records[a].case_id < out.records[b].case_id; });
  Rng rng(mix64(seed));
  rng.shuffle(order);

  const auto floor_share = [&](std::size_t n) {
    return static_cast<std::size_t>(std::floor(*plan.train_fraction * static_cast<double>(n) + 1e-9));
  };

  if (plan.train_fraction) {
    if (!(*plan.train_fraction >= 0.0 && *plan.train_fraction <= 1.0)) {
      throw InvalidArgument("train_fraction must lie in [0, 1]");
    }
    if (plan.stratified) {
      std::map<int, std::vector<std::size_t>> groups;
      for (auto idx : order) {
        const auto& label = out.records[idx].class_label;
        groups[label ? static_cast<int>(*label) : -1].push_back(idx);
      }
      for (auto& [label, members] : groups) {
        const auto n_train = floor_share(members.size());
        for (std::size_t k = 0; k < members.size(); ++k) {
          out.records[members[k]].split_role = k < n_train ? SplitRole::Train : SplitRole::Validation;
        }
      }
    } else {
      const auto n_train = floor_share(order.size());
      for (std::size_t k = 0; k < order.size(); ++k) {
        out.records[order[k]].split_role = k < n_train ? SplitRole::Train : SplitRole::Validation;
      }
    }
    return out;
  }

  const std::size_t need =
      static_cast<std::size_t>(plan.train_count) + plan.validation_count + plan.test_count;
  if (plan.train_count < 0 || plan.validation_count < 0 || plan.test_count < 0) {
    throw InvalidArgument("split counts must be non-negative");
  }
  if (order.size() < need) {
    throw InvalidArgument("scheme " + std::string(to_string(scheme)) + " needs at least " + std::to_string(need) +
                          " records, got " + std::to_string(order.size()));
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    SplitRole role = SplitRole::Train;
    if (k >= static_cast<std::size_t>(plan.train_count)) {
      const std::size_t j = k - plan.train_count;
      if (j < static_cast<std::size_t>(plan.validation_count)) {
        role = SplitRole::Validation;
      } else if (j < static_cast<std::size_t>(plan.validation_count + plan.test_count)) {
        role = SplitRole::Test;
      }
    }
    out.records[order[k]].split_role = role;
  }
  return out;
}

}  // namespace lungtriage
