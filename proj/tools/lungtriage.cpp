#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lungtriage/checkpoint.hpp"
#include "lungtriage/phantom.hpp"
#include "lungtriage/rng.hpp"
#include "lungtriage/service.hpp"
#include "lungtriage/training.hpp"
#include "lungtriage/triage.hpp"
#include "lungtriage/volume_io.hpp"

namespace fs = std::filesystem;
using namespace lungtriage;
using Json = nlohmann::ordered_json;

namespace {

// Raised for invalid flag values discovered after parsing.
struct UsageError : Error {
  using Error::Error;
};

template <typename T, typename Parse>
T parse_or_throw(const std::string& text, Parse parse, const char* what) {
  const auto v = parse(text);
  if (!v) throw UsageError(std::string("unknown ") + what + " '" + text + "'");
  return *v;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text << '\n';
}

Shape3 parse_shape(const std::vector<int>& v) {
  if (v.size() != 3) throw UsageError("--shape needs three values nx ny nz");
  return {v[0], v[1], v[2]};
}

struct PhantomArgs {
  fs::path out;
  int count = 10;
  std::vector<int> shape{64, 64, 64};
  std::uint64_t seed = 0;
  std::string scheme = "seg4";
  std::string label;
  double noise = 0.01;
  bool split = false;
};

int run_phantom_gen(const PhantomArgs& a) {
  const Scheme scheme = parse_or_throw<Scheme>(a.scheme, parse_scheme, "scheme");
  std::optional<ClassLabel> fixed;
  if (!a.label.empty()) fixed = parse_or_throw<ClassLabel>(a.label, parse_class_label, "class label");
  if (a.count < 1) throw UsageError("--count must be >= 1");
  const Shape3 shape = parse_shape(a.shape);
  fs::create_directories(a.out);
  std::vector<CaseRecord> records;
  for (int i = 0; i < a.count; ++i) {
    const ClassLabel label = fixed ? *fixed : static_cast<ClassLabel>(i % 3);
    auto spec = PhantomSpec::for_class(label, shape, derive_seed(a.seed, "phantom", i));
    spec.noise_sigma = a.noise;
    const auto ph = generate_phantom(spec);
    char id[32];
    std::snprintf(id, sizeof id, "phantom-%04d", i);
    CaseRecord r;
    r.case_id = id;
    r.image_path = a.out / (r.case_id + ".nii.gz");
    save_volume(ph.volume, r.image_path);
    if (scheme != Scheme::Classification3) {
      r.mask_path = a.out / (r.case_id + "_mask.nii.gz");
      save_mask(ph.mask, *r.mask_path, &ph.volume);
    }
    r.class_label = label;
    records.push_back(std::move(r));
  }
  DatasetManifest m;
  if (a.split) {
    m = split_dataset(records, scheme, a.seed);
  } else {
    m.records = records;
    m.labeling_scheme = scheme;
    m.seed = a.seed;
  }
  save_manifest(m, a.out / "manifest.jsonl");
  Json j{{"manifest", (a.out / "manifest.jsonl").string()}, {"cases", a.count}};
  std::cout << j.dump() << '\n';
  return 0;
}

struct SplitArgs {
  fs::path manifest;
  fs::path out;
  std::string scheme;
  std::uint64_t seed = 0;
  std::optional<double> train_fraction;
  std::vector<int> counts;
  bool stratified = false;
};

int run_split(const SplitArgs& a) {
  auto loaded = load_manifest(a.manifest);
  const Scheme scheme =
      a.scheme.empty() ? loaded.manifest.labeling_scheme : parse_or_throw<Scheme>(a.scheme, parse_scheme, "scheme");
  SplitPlan plan = SplitPlan::for_scheme(scheme);
  if (a.train_fraction) {
    plan = SplitPlan{};
    plan.train_fraction = *a.train_fraction;
  }
  if (!a.counts.empty()) {
    if (a.counts.size() != 3) throw UsageError("--counts needs train validation test");
    plan = SplitPlan{};
    plan.train_count = a.counts[0];
    plan.validation_count = a.counts[1];
    plan.test_count = a.counts[2];
  }
  plan.stratified = a.stratified;
  const auto m = split_dataset(loaded.manifest.records, scheme, a.seed, plan);
  save_manifest(m, a.out);
  Json j{{"manifest", a.out.string()}, {"warnings", loaded.warnings}};
  for (auto role : {SplitRole::Train, SplitRole::Validation, SplitRole::Test}) {
    j["counts"][std::string(to_string(role))] = m.with_role(role).size();
  }
  std::cout << j.dump() << '\n';
  return 0;
}

// Flag overrides applied on top of the config file or task defaults.
struct TrainOverrides {
  std::string task;
  std::optional<int> batch_size;
  std::optional<int> epochs;
  std::optional<double> learning_rate;
  std::optional<double> momentum;
  std::optional<std::uint64_t> seed;
  bool no_cache = false;
  std::optional<int> iterations_per_epoch;
  std::optional<int> workers;
  std::optional<int> base_channels;
  std::optional<int> width;
  std::optional<int> input_size;
  std::optional<int> max_clicks;
};

TrainConfig resolve_config(const std::optional<fs::path>& file, const TrainOverrides& o, Scheme manifest_scheme) {
  TrainConfig c;
  if (file) {
    c = load_train_config(*file);
  } else {
    c = TrainConfig::defaults_for(o.task.empty() ? manifest_scheme : parse_or_throw<Scheme>(o.task, parse_scheme, "task"));
  }
  if (!o.task.empty()) c.task = parse_or_throw<Scheme>(o.task, parse_scheme, "task");
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.learning_rate) c.learning_rate = *o.learning_rate;
  if (o.momentum) c.momentum = *o.momentum;
  if (o.seed) c.seed = *o.seed;
  if (o.no_cache) c.cache_enabled = false;
  if (o.iterations_per_epoch) c.iterations_per_epoch = *o.iterations_per_epoch;
  if (o.workers) c.workers = *o.workers;
  if (o.base_channels) c.segmenter_base_channels = *o.base_channels;
  if (o.width) c.classifier_width = *o.width;
  if (o.input_size) c.classifier_input_size = *o.input_size;
  if (o.max_clicks) c.max_positive_clicks = c.max_negative_clicks = *o.max_clicks;
  c.validate();
  return c;
}

int run_train(const fs::path& manifest_path, const std::optional<fs::path>& config_path, const TrainOverrides& o,
              const fs::path& out, bool quiet) {
  const auto loaded = load_manifest(manifest_path);
  const TrainConfig cfg = resolve_config(config_path, o, loaded.manifest.labeling_scheme);
  fs::create_directories(out);
  save_train_config(cfg, out / "config.json");
  TrainHooks hooks;
  if (!quiet) {
    hooks.on_epoch_end = [](const EpochRecord& r) {
      Json j{{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"seconds", r.seconds}};
      if (r.validation_metric) j["validation_metric"] = *r.validation_metric;
      std::cerr << j.dump() << '\n';
    };
  }
  const auto result = train(cfg, loaded.manifest, hooks);
  save_checkpoint(result.best, out / "best.ckpt");
  save_checkpoint(result.last, out / "last.ckpt");
  write_text(out / "train_report.json", result.report.to_json());
  Json j{{"best_checkpoint", (out / "best.ckpt").string()},
         {"best_epoch", result.report.best_epoch},
         {"metric", result.best.metric_name},
         {"value", result.best.metric}};
  std::cout << j.dump() << '\n';
  return 0;
}

int run_evaluate(const fs::path& manifest_path, const fs::path& ckpt_path, const std::string& role_text,
                 const std::optional<fs::path>& out) {
  const auto loaded = load_manifest(manifest_path);
  const SplitRole role = parse_or_throw<SplitRole>(role_text, parse_split_role, "split role");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  TrainConfig cfg = ckpt.train_config ? *ckpt.train_config : TrainConfig::defaults_for(ckpt.scheme());
  cfg.task = ckpt.scheme();
  if (ckpt.classifier) cfg.classifier_input_size = ckpt.classifier->input_size;
  const auto data = CachedDataset::build(loaded.manifest, role, cfg);
  if (data.empty()) throw UsageError("no records with role " + role_text);
  const MetricsReport report = ckpt.kind == ModelKind::Classifier ? evaluate_classifier(load_classifier(ckpt), data)
                                                                   : evaluate_segmenter(load_segmenter(ckpt), data);
  const std::string text = report.to_json();
  if (out) write_text(*out, text);
  std::cout << text << '\n';
  return 0;
}

int run_triage(const fs::path& manifest_path, const fs::path& cls_path, const fs::path& seg_path,
               const std::string& scheme_text, bool segment_pneumonia, const fs::path& out) {
  const auto loaded = load_manifest(manifest_path);
  TriageOptions options;
  options.seg_scheme = parse_or_throw<Scheme>(scheme_text, parse_scheme, "scheme");
  options.segment_pneumonia = segment_pneumonia;
  const Checkpoint cls = load_checkpoint(cls_path);
  const Checkpoint seg = load_checkpoint(seg_path);
  if (seg.scheme() != options.seg_scheme) {
    throw UsageError("segmenter checkpoint is " + std::string(to_string(seg.scheme())) + " but --scheme is " +
                     scheme_text);
  }
  const auto batch = triage_batch(loaded.manifest, load_classifier(cls), load_segmenter(seg), options, out);
  std::cout << batch.summary.to_json() << '\n';
  return 0;
}

int run_serve(const std::optional<fs::path>& cls, const std::vector<fs::path>& segs, const std::string& host,
              int port) {
  ServiceModels models;
  if (cls) models.classifier = load_checkpoint(*cls);
  for (const auto& p : segs) {
    auto ckpt = load_checkpoint(p);
    const Scheme s = ckpt.scheme();
    models.segmenters.emplace(s, std::move(ckpt));
  }
  InferenceService service(std::move(models));
  std::cerr << Json{{"listening", host + ":" + std::to_string(port)}}.dump() << '\n';
  service.listen(host, port);
  return 0;
}

void report_error(const std::string& type, const std::string& message) {
  std::cerr << Json{{"error", message}, {"type", type}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lung CT triage: phantoms, splits, training, evaluation, triage and serving"};
  app.require_subcommand(1);

  auto* phantom = app.add_subcommand("phantom", "Synthetic phantom utilities");
  phantom->require_subcommand(1);
  PhantomArgs pa;
  auto* gen = phantom->add_subcommand("gen", "Write phantom volumes, masks and a manifest");
  gen->add_option("--out", pa.out, "Output directory")->required();
  gen->add_option("--count", pa.count, "Number of phantoms");
  gen->add_option("--shape", pa.shape, "nx ny nz")->expected(3);
  gen->add_option("--seed", pa.seed, "Generator seed");
  gen->add_option("--scheme", pa.scheme, "classification3, seg2 or seg4");
  gen->add_option("--class", pa.label, "Fix the class (covid, pneumonia, normal); default cycles");
  gen->add_option("--noise", pa.noise, "Noise sigma in normalized units");
  gen->add_flag("--split", pa.split, "Assign split roles with the scheme's plan");

  SplitArgs sa;
  auto* split = app.add_subcommand("split", "Assign train/validation/test roles");
  split->add_option("--manifest", sa.manifest, "Input manifest")->required();
  split->add_option("--out", sa.out, "Output manifest")->required();
  split->add_option("--scheme", sa.scheme, "Override the manifest scheme");
  split->add_option("--seed", sa.seed, "Split seed");
  split->add_option("--train-fraction", sa.train_fraction, "Fractional plan");
  split->add_option("--counts", sa.counts, "train validation test")->expected(3);
  split->add_flag("--stratified", sa.stratified, "Apply the fraction per class");

  fs::path manifest, out;
  std::optional<fs::path> config_path;
  TrainOverrides to;
  bool quiet = false;
  auto* trn = app.add_subcommand("train", "Train a classifier or segmenter");
  trn->add_option("--manifest", manifest, "Split manifest")->required();
  trn->add_option("--config", config_path, "Run config JSON");
  trn->add_option("--out", out, "Output directory")->required();
  trn->add_option("--task", to.task, "classification3, seg2 or seg4");
  trn->add_option("--batch-size", to.batch_size);
  trn->add_option("--epochs", to.epochs);
  trn->add_option("--lr", to.learning_rate, "Learning rate");
  trn->add_option("--momentum", to.momentum);
  trn->add_option("--seed", to.seed);
  trn->add_flag("--no-cache", to.no_cache, "Reload cases every epoch");
  trn->add_option("--iterations-per-epoch", to.iterations_per_epoch);
  trn->add_option("--workers", to.workers);
  trn->add_option("--base-channels", to.base_channels, "Segmenter base channels");
  trn->add_option("--width", to.width, "Classifier stem width");
  trn->add_option("--input-size", to.input_size, "Classifier input side");
  trn->add_option("--max-clicks", to.max_clicks, "Simulated clicks per polarity");
  trn->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  fs::path ckpt_path;
  std::string role = "validation";
  std::optional<fs::path> eval_out;
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on one split");
  eval->add_option("--manifest", manifest)->required();
  eval->add_option("--checkpoint", ckpt_path)->required();
  eval->add_option("--role", role, "train, validation or test");
  eval->add_option("--out", eval_out, "Report path");

  fs::path cls_path, seg_path;
  std::string scheme = "seg2";
  bool segment_pneumonia = false;
  auto* tri = app.add_subcommand("triage", "Classify every case and segment the COVID ones");
  tri->add_option("--manifest", manifest)->required();
  tri->add_option("--classifier", cls_path)->required();
  tri->add_option("--segmenter", seg_path)->required();
  tri->add_option("--scheme", scheme, "seg2 or seg4");
  tri->add_flag("--segment-pneumonia", segment_pneumonia, "Also segment pneumonia predictions");
  tri->add_option("--out", out, "Report directory")->required();

  std::optional<fs::path> serve_cls;
  std::vector<fs::path> serve_segs;
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "Run the HTTP inference service");
  srv->add_option("--classifier", serve_cls);
  srv->add_option("--segmenter", serve_segs, "Repeat for seg2 and seg4");
  srv->add_option("--host", host);
  srv->add_option("--port", port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  try {
    if (*gen) return run_phantom_gen(pa);
    if (*split) return run_split(sa);
    if (*trn) return run_train(manifest, config_path, to, out, quiet);
    if (*eval) return run_evaluate(manifest, ckpt_path, role, eval_out);
    if (*tri) return run_triage(manifest, cls_path, seg_path, scheme, segment_pneumonia, out);
    if (*srv) return run_serve(serve_cls, serve_segs, host, port);
  } catch (const UsageError& e) {
    report_error("usage", e.what());
    return 2;
  } catch (const TrainingDiverged& e) {
    report_error("diverged", e.what());
    return 1;
  } catch (const VolumeIoError& e) {
    report_error("volume_io", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error("error", e.what());
    return 1;
  }
  return 0;
}
