#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lungtriage/types.hpp"
#include "lungtriage/volume.hpp"

namespace lungtriage {

/// Failure while reading or writing volume files. `kind()` tells the failure modes apart.
class VolumeIoError : public Error {
 public:
  enum class Kind { MissingFile, MalformedHeader, NonVolumetric, Truncated, UnsupportedType, Unwritable };

  VolumeIoError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// NIfTI-1 single-file (.nii) volumes, optionally gzip-compressed (.nii.gz). Voxels are
// read in file order, which is x fastest. Integer and floating payloads are accepted and
// converted to float32 after applying scl_slope/scl_inter. Volumes are written as float32,
// masks as uint8.

Volume3D load_volume(const std::filesystem::path& path);
void save_volume(const Volume3D& volume, const std::filesystem::path& path);

/// Parse an in-memory NIfTI-1 image; gzip payloads are detected by their magic bytes.
Volume3D decode_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_volume(const Volume3D& volume, bool gzip = false);

/// Load integer label ids; throws when an id falls outside `scheme`.
SegmentationMask load_mask(const std::filesystem::path& path, Scheme scheme);
SegmentationMask decode_mask(std::span<const std::uint8_t> bytes, Scheme scheme);
void save_mask(const SegmentationMask& mask, const std::filesystem::path& path,
               const Volume3D* geometry = nullptr);

/// Read a file, transparently gunzipping it.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> gzip_bytes(std::span<const std::uint8_t> bytes, int level = 6);

/// Volume header without reading the payload.
Shape3 read_volume_shape(const std::filesystem::path& path);

struct CaseRecord {
  std::string case_id;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> mask_path;
  std::optional<ClassLabel> class_label;
  SplitRole split_role = SplitRole::Train;

  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

struct DatasetManifest {
  std::vector<CaseRecord> records;
  Scheme labeling_scheme = Scheme::Classification3;
  std::uint64_t seed = 0;

  std::vector<const CaseRecord*> with_role(SplitRole role) const;
  /// Throws on empty or duplicate case ids.
  void validate() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct ManifestLoadResult {
  DatasetManifest manifest;
  /// Dangling image/mask paths and grid mismatches; not fatal.
  std::vector<std::string> warnings;
};

/// JSON-lines manifest: a header object followed by one record object per line.
/// Relative paths are resolved against the manifest's directory.
ManifestLoadResult load_manifest(const std::filesystem::path& path);
/// Paths inside the manifest directory are written relative to it.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// How records are divided among train/validation/test.
struct SplitPlan {
  /// Fractional plan: train = floor(train_fraction * N), remainder to validation.
  std::optional<double> train_fraction;
  /// Count plan: exactly these many train/validation/test; surplus records go to train.
  int train_count = 0;
  int validation_count = 0;
  int test_count = 0;
  /// Fractional plans only: apply the fraction per class label.
  bool stratified = false;

  /// 70/30 for classification3, 15/3/2 for seg4, 160/39 for seg2.
  static SplitPlan for_scheme(Scheme scheme);
};

/// Deterministic split. Records are ordered by case_id, permuted with `seed`, and the
/// leading positions of the permutation become train, then validation, then test.
DatasetManifest split_dataset(std::vector<CaseRecord> records, Scheme scheme, std::uint64_t seed,
                              std::optional<SplitPlan> plan = std::nullopt);

}  // namespace lungtriage
