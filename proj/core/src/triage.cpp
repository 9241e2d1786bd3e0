#include "lungtriage/triage.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace lungtriage {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) { return std::chrono::duration<double, std::milli>(Clock::now() - t0).count(); }

const std::uint8_t* label_color(Scheme scheme, std::uint8_t label) {
  if (label == 0) return nullptr;
  if (scheme == Scheme::Seg2) return kLesionColor;
  switch (label) {
    case 1:
      return kLeftLungColor;
    case 2:
      return kRightLungColor;
    default:
      return kLesionColor;
  }
}

std::uint8_t gray_level(double hu, const IntensityWindow& w) {
  const double t = std::clamp((hu - w.hu_min) / (w.hu_max - w.hu_min), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(255.0 * t));
}

void png_append(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

void png_warn(png_structp, png_const_charp) {}

// libpng reports errors by longjmp to png_jmpbuf; no C++ exception crosses its frames.
bool encode_png_rows(png_structp png, png_infop info, std::vector<std::uint8_t>* out, int width, int height,
                     const std::uint8_t* rgb) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_write_fn(png, out, png_append, png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(rgb + static_cast<std::size_t>(r) * width * 3));
  }
  png_write_end(png, nullptr);
  return true;
}

std::vector<std::uint8_t> encode_png(int width, int height, const std::vector<std::uint8_t>& rgb) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  if (png == nullptr) throw Error("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  const bool ok = info != nullptr && encode_png_rows(png, info, &out, width, height, rgb.data());
  png_destroy_write_struct(&png, &info);
  if (!ok) throw Error("png: encoding failed");
  return out;
}

struct PngReader {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos = 0;
};

void png_read_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* r = static_cast<PngReader*>(png_get_io_ptr(png));
  if (r->pos + length > r->bytes->size()) png_error(png, "truncated PNG");
  std::copy_n(r->bytes->data() + r->pos, length, data);
  r->pos += length;
}

std::optional<SegmentationMask> load_truth(const CaseRecord& record, Scheme manifest_scheme, Scheme seg_scheme) {
  if (!record.mask_path || manifest_scheme == Scheme::Classification3) return std::nullopt;
  SegmentationMask m = load_mask(*record.mask_path, manifest_scheme);
  if (m.scheme == seg_scheme) return m;
  if (m.scheme == Scheme::Seg4 && seg_scheme == Scheme::Seg2) return to_seg2(m);
  return std::nullopt;
}

}  // namespace

TriageResult triage_case(const ClassifierModel& classifier, const SegmenterModel& segmenter, const Volume3D& volume,
                         const TriageOptions& options, const std::vector<GuidanceClick>& clicks,
                         const SegmentationMask* truth) {
  if (segmenter.config().scheme() != options.seg_scheme) {
    throw InvalidArgument("segmenter produces " + std::string(to_string(segmenter.config().scheme())) +
                          " masks but " + std::string(to_string(options.seg_scheme)) + " was requested");
  }
  TriageResult r;
  auto t0 = Clock::now();
  const auto cls = classify_volume(classifier, volume, options.window);
  r.timings.classify_ms = ms_since(t0);
  r.probabilities = cls.probabilities;
  r.predicted = cls.predicted;
  const bool route = r.predicted == ClassLabel::Covid ||
                     (options.segment_pneumonia && r.predicted == ClassLabel::Pneumonia);
  if (!route) return r;

  t0 = Clock::now();
  const auto guidance = make_guidance_maps(clicks, volume.shape(), options.guidance_sigma);
  auto out = segment(segmenter, normalize_intensity(volume, options.window), guidance);
  r.timings.segment_ms = ms_since(t0);
  if (truth != nullptr) {
    r.dice = per_label_dice(out.mask, *truth);
    r.mean_dice = mean_foreground_dice(out.mask, *truth);
  }
  r.mask = std::move(out.mask);
  return r;
}

TriageResult triage_case(const Checkpoint& classifier, const Checkpoint& segmenter, const Volume3D& volume,
                         const TriageOptions& options, const std::vector<GuidanceClick>& clicks) {
  if (segmenter.scheme() != options.seg_scheme) {
    throw InvalidArgument("segmenter checkpoint is " + std::string(to_string(segmenter.scheme())) + " but " +
                          std::string(to_string(options.seg_scheme)) + " was requested");
  }
  return triage_case(load_classifier(classifier), load_segmenter(segmenter), volume, options, clicks);
}

TriageBatch triage_batch(const DatasetManifest& manifest, const ClassifierModel& classifier,
                         const SegmenterModel& segmenter, const TriageOptions& options,
                         const std::optional<std::filesystem::path>& out_dir) {
  manifest.validate();
  if (segmenter.config().scheme() != options.seg_scheme) {
    throw InvalidArgument("segmenter scheme does not match the requested " + std::string(to_string(options.seg_scheme)));
  }
  std::vector<const CaseRecord*> records;
  for (const auto& r : manifest.records) records.push_back(&r);
  std::sort(records.begin(), records.end(), [](auto* a, auto* b) { return a->case_id < b->case_id; });
  if (out_dir) std::filesystem::create_directories(*out_dir);

  TriageBatch batch;
  for (const auto* rec : records) {
    TriageResult r;
    try {
      const Volume3D volume = load_volume(rec->image_path);
      const auto truth = load_truth(*rec, manifest.labeling_scheme, options.seg_scheme);
      r = triage_case(classifier, segmenter, volume, options, {}, truth ? &*truth : nullptr);
      if (out_dir && r.mask) {
        save_mask(*r.mask, *out_dir / (rec->case_id + "_mask.nii.gz"), &volume);
        export_overlay(volume, *r.mask, Axis::Z, volume.shape()[2] / 2, *out_dir / (rec->case_id + "_overlay.png"),
                       options.window);
      }
    } catch (const std::exception& e) {
      r = TriageResult{};
      r.error = e.what();
    }
    r.case_id = rec->case_id;
    r.truth_label = rec->class_label;
    batch.results.push_back(std::move(r));
  }

  std::vector<ClassLabel> pred, truth;
  std::vector<double> per_case;
  for (const auto& r : batch.results) {
    if (r.error) continue;
    if (r.truth_label) {
      pred.push_back(r.predicted);
      truth.push_back(*r.truth_label);
    }
    if (r.mean_dice) {
      per_case.push_back(*r.mean_dice);
      batch.summary.case_dice.push_back({r.case_id, *r.dice, *r.mean_dice, 0.0});
    }
  }
  if (!pred.empty()) batch.summary.accuracy = classification_accuracy(pred, truth);
  if (!per_case.empty()) {
    const auto ms = mean_dice_std(per_case);
    batch.summary.mean_dice = ms.mean;
    batch.summary.std_dice = ms.std;
  }
  if (out_dir) {
    std::ofstream f(*out_dir / "report.json");
    if (!f) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "cannot write report in " + out_dir->string());
    f << triage_report_json(batch) << "\n";
  }
  return batch;
}

std::string triage_report_json(const TriageBatch& batch, bool include_timings) {
  nlohmann::ordered_json j;
  j["format"] = "lungtriage-triage";
  j["version"] = 1;
  auto cases = nlohmann::ordered_json::array();
  for (const auto& r : batch.results) {
    nlohmann::ordered_json c;
    c["case_id"] = r.case_id;
    if (r.error) {
      c["error"] = *r.error;
      cases.push_back(c);
      continue;
    }
    c["probabilities"] = {{"covid", r.probabilities.p[0]}, {"pneumonia", r.probabilities.p[1]},
                          {"normal", r.probabilities.p[2]}};
    c["predicted"] = std::string(to_string(r.predicted));
    c["truth"] = r.truth_label ? nlohmann::ordered_json(std::string(to_string(*r.truth_label)))
                               : nlohmann::ordered_json(nullptr);
    if (r.mask) {
      c["mask_scheme"] = std::string(to_string(r.mask->scheme));
      c["label_voxel_counts"] = r.mask->label_histogram();
    } else {
      c["mask_scheme"] = nullptr;
    }
    c["dice"] = r.dice ? nlohmann::ordered_json(*r.dice) : nlohmann::ordered_json(nullptr);
    c["mean_dice"] = r.mean_dice ? nlohmann::ordered_json(*r.mean_dice) : nlohmann::ordered_json(nullptr);
    if (include_timings) c["timings_ms"] = {{"classify", r.timings.classify_ms}, {"segment", r.timings.segment_ms}};
    cases.push_back(c);
  }
  j["cases"] = cases;
  j["summary"] = nlohmann::ordered_json::parse(batch.summary.to_json());
  return j.dump(2);
}

std::vector<std::uint8_t> render_slice_png(const Volume3D& volume, const SegmentationMask* mask, Axis axis, int index,
                                           const IntensityWindow& window) {
  window.validate();
  const SliceImage2D slice = extract_slice(volume, axis, index);
  std::vector<std::uint8_t> labels;
  if (mask != nullptr) {
    if (mask->shape != volume.shape()) throw ShapeMismatch("overlay mask grid differs from the volume");
    int rows = 0, cols = 0;
    labels = extract_mask_plane(*mask, axis, index, rows, cols);
  }
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(slice.height) * slice.width * 3);
  for (std::size_t i = 0; i < static_cast<std::size_t>(slice.height) * slice.width; ++i) {
    const std::uint8_t g = gray_level(slice.pixels[i], window);
    const std::uint8_t* color = labels.empty() ? nullptr : label_color(mask->scheme, labels[i]);
    for (int ch = 0; ch < 3; ++ch) {
      rgb[i * 3 + ch] = color == nullptr
                            ? g
                            : static_cast<std::uint8_t>(std::lround((1.0 - kOverlayAlpha) * g + kOverlayAlpha * color[ch]));
    }
  }
  return encode_png(slice.width, slice.height, rgb);
}

void export_overlay(const Volume3D& volume, const SegmentationMask& mask, Axis axis, int index,
                    const std::filesystem::path& path, const IntensityWindow& window) {
  const auto bytes = render_slice_png(volume, &mask, axis, index, window);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "cannot write overlay " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

bool decode_png_rows(png_structp png, png_infop info, PngReader* reader, RgbImage* img) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_read_fn(png, reader, png_read_bytes);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB || png_get_bit_depth(png, info) != 8) return false;
  img->width = static_cast<int>(png_get_image_width(png, info));
  img->height = static_cast<int>(png_get_image_height(png, info));
  img->rgb.resize(static_cast<std::size_t>(img->width) * img->height * 3);
  for (int r = 0; r < img->height; ++r) {
    png_read_row(png, img->rgb.data() + static_cast<std::size_t>(r) * img->width * 3, nullptr);
  }
  png_read_end(png, nullptr);
  return true;
}

}  // namespace

RgbImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
  if (png == nullptr) throw Error("png: cannot create reader");
  png_infop info = png_create_info_struct(png);
  RgbImage img;
  PngReader reader{&bytes};
  const bool ok = info != nullptr && decode_png_rows(png, info, &reader, &img);
  png_destroy_read_struct(&png, &info, nullptr);
  if (!ok) throw Error("png: not a decodable 8-bit RGB image");
  return img;
}

}  // namespace lungtriage
