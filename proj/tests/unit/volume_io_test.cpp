#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "lungtriage/phantom.hpp"
#include "lungtriage/volume_io.hpp"
#include "test_support.hpp"

using namespace lungtriage;
using lungtriage::testing::TempDir;

namespace {

void expect_kind(const std::function<void()>& fn, VolumeIoError::Kind kind) {
  try {
    fn();
    FAIL() << "no exception";
  } catch (const VolumeIoError& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

std::vector<CaseRecord> make_records(int n, std::uint64_t seed = 0) {
  std::vector<CaseRecord> out;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    CaseRecord r;
    r.case_id = "case-" + std::to_string(1000 + i);
    r.image_path = r.case_id + ".nii.gz";
    r.class_label = static_cast<ClassLabel>(rng.uniform_int(0, 2));
    out.push_back(r);
  }
  return out;
}

std::map<SplitRole, int> role_counts(const DatasetManifest& m) {
  std::map<SplitRole, int> c;
  for (const auto& r : m.records) ++c[r.split_role];
  return c;
}

}  // namespace

TEST(Nifti, PhantomRoundTripIsBitIdentical) {
  TempDir dir;
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {24, 20, 16}, 5));
  Volume3D v = ph.volume;
  v.set_geometry({0.7, 0.8, 2.5}, {-10.0, 4.0, 100.0}, kIdentity3);
  for (const char* name : {"a.nii", "a.nii.gz"}) {
    save_volume(v, dir / name);
    const Volume3D back = load_volume(dir / name);
    EXPECT_EQ(back.shape(), v.shape());
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(back.spacing()[a], static_cast<double>(static_cast<float>(v.spacing()[a])));
      EXPECT_EQ(back.origin()[a], static_cast<double>(static_cast<float>(v.origin()[a])));
    }
    ASSERT_EQ(back.size(), v.size());
    EXPECT_EQ(std::memcmp(back.voxels().data(), v.voxels().data(), v.size() * sizeof(float)), 0);
  }
}

TEST(Nifti, ZeroVolumeRoundTrips) {
  TempDir dir;
  const Volume3D v(Shape3{8, 8, 8});
  save_volume(v, dir / "z.nii.gz");
  EXPECT_EQ(load_volume(dir / "z.nii.gz"), v);
}

TEST(Nifti, RandomVolumesRoundTripInMemory) {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const Shape3 s{rng.uniform_int(1, 9), rng.uniform_int(1, 9), rng.uniform_int(1, 9)};
    const Volume3D v = lungtriage::testing::random_volume(s, rng);
    EXPECT_EQ(decode_volume(encode_volume(v, t % 2 == 0)), v);
  }
}

TEST(Nifti, HeaderShapeIsReported) {
  TempDir dir;
  save_volume(Volume3D(Shape3{132, 132, 116}), dir / "big.nii.gz");
  EXPECT_EQ(read_volume_shape(dir / "big.nii.gz"), (Shape3{132, 132, 116}));
  EXPECT_EQ(load_volume(dir / "big.nii.gz").shape(), (Shape3{132, 132, 116}));
}

TEST(Nifti, TwoDimensionalPayloadIsRejected) {
  auto bytes = encode_volume(Volume3D(Shape3{4, 4, 1}));
  const std::int16_t two = 2;
  std::memcpy(bytes.data() + 40, &two, sizeof two);
  try {
    decode_volume(bytes);
    FAIL();
  } catch (const VolumeIoError& e) {
    EXPECT_EQ(e.kind(), VolumeIoError::Kind::NonVolumetric);
    EXPECT_NE(std::string(e.what()).find("non-3D payload"), std::string::npos);
  }
}

TEST(Nifti, FourDimensionalPayloadIsRejected) {
  auto bytes = encode_volume(Volume3D(Shape3{2, 2, 2}));
  const std::int16_t four = 4, two = 2;
  std::memcpy(bytes.data() + 40, &four, 2);
  std::memcpy(bytes.data() + 48, &two, 2);
  expect_kind([&] { decode_volume(bytes); }, VolumeIoError::Kind::NonVolumetric);
}

TEST(Nifti, ErrorsAreDistinct) {
  TempDir dir;
  expect_kind([&] { load_volume(dir / "missing.nii"); }, VolumeIoError::Kind::MissingFile);

  std::vector<std::uint8_t> junk(400, 7);
  expect_kind([&] { decode_volume(junk); }, VolumeIoError::Kind::MalformedHeader);

  auto bytes = encode_volume(Volume3D(Shape3{6, 6, 6}));
  bytes.resize(bytes.size() - 10);
  expect_kind([&] { decode_volume(bytes); }, VolumeIoError::Kind::Truncated);

  auto gz = encode_volume(Volume3D(Shape3{6, 6, 6}), true);
  gz.resize(gz.size() / 2);
  expect_kind([&] { decode_volume(gz); }, VolumeIoError::Kind::Truncated);
}

TEST(Nifti, UnwritablePathIsReported) {
  TempDir dir;
  std::ofstream(dir / "file") << "x";
  expect_kind([&] { save_volume(Volume3D(Shape3{2, 2, 2}), dir / "file" / "v.nii"); },
              VolumeIoError::Kind::Unwritable);
}

TEST(Nifti, MaskRoundTripAndSchemeCheck) {
  TempDir dir;
  const auto ph = generate_phantom(PhantomSpec::for_class(ClassLabel::Covid, {16, 16, 8}, 2));
  save_mask(ph.mask, dir / "m.nii.gz", &ph.volume);
  EXPECT_EQ(load_mask(dir / "m.nii.gz", Scheme::Seg4), ph.mask);
  EXPECT_THROW(load_mask(dir / "m.nii.gz", Scheme::Seg2), InvalidArgument);
}

TEST(Manifest, RoundTrip) {
  TempDir dir;
  DatasetManifest m;
  m.labeling_scheme = Scheme::Seg4;
  m.seed = 9;
  for (int i = 0; i < 3; ++i) {
    CaseRecord r;
    r.case_id = "c" + std::to_string(i);
    r.image_path = dir / (r.case_id + ".nii.gz");
    save_volume(Volume3D(Shape3{2, 2, 2}), r.image_path);
    if (i != 1) {
      r.mask_path = dir / (r.case_id + "_mask.nii.gz");
      save_mask(SegmentationMask({2, 2, 2}, Scheme::Seg4), *r.mask_path);
    }
    if (i != 2) r.class_label = static_cast<ClassLabel>(i);
    r.split_role = static_cast<SplitRole>(i);
    m.records.push_back(r);
  }
  save_manifest(m, dir / "m.jsonl");
  const auto loaded = load_manifest(dir / "m.jsonl");
  EXPECT_TRUE(loaded.warnings.empty());
  EXPECT_EQ(loaded.manifest, m);
}

TEST(Manifest, DuplicateIdsAreRejected) {
  TempDir dir;
  DatasetManifest m;
  m.records = make_records(2);
  m.records[1].case_id = m.records[0].case_id;
  EXPECT_THROW(m.validate(), InvalidArgument);
  EXPECT_THROW(save_manifest(m, dir / "m.jsonl"), InvalidArgument);
  std::ofstream(dir / "dup.jsonl") << R"({"format":"lungtriage-manifest","version":1,"labeling_scheme":"seg2","seed":0})"
                                   << "\n"
                                   << R"({"case_id":"a","image_path":"a.nii"})" << "\n"
                                   << R"({"case_id":"a","image_path":"b.nii"})" << "\n";
  EXPECT_THROW(load_manifest(dir / "dup.jsonl"), InvalidArgument);
}

TEST(Manifest, MissingMaskGivesOneWarning) {
  TempDir dir;
  DatasetManifest m;
  m.labeling_scheme = Scheme::Seg2;
  CaseRecord r;
  r.case_id = "only";
  r.image_path = dir / "only.nii.gz";
  r.mask_path = dir / "only_mask.nii.gz";
  save_volume(Volume3D(Shape3{2, 2, 2}), r.image_path);
  m.records.push_back(r);
  save_manifest(m, dir / "m.jsonl");
  const auto loaded = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(loaded.warnings.size(), 1u);
  EXPECT_NE(loaded.warnings[0].find("only"), std::string::npos);
}

TEST(Split, PlanCounts) {
  auto c = role_counts(split_dataset(make_records(20), Scheme::Seg4, 1));
  EXPECT_EQ(c[SplitRole::Train], 15);
  EXPECT_EQ(c[SplitRole::Validation], 3);
  EXPECT_EQ(c[SplitRole::Test], 2);
  c = role_counts(split_dataset(make_records(199), Scheme::Seg2, 1));
  EXPECT_EQ(c[SplitRole::Train], 160);
  EXPECT_EQ(c[SplitRole::Validation], 39);
  EXPECT_EQ(c[SplitRole::Test], 0);
  c = role_counts(split_dataset(make_records(10), Scheme::Classification3, 1));
  EXPECT_EQ(c[SplitRole::Train], 7);
  EXPECT_EQ(c[SplitRole::Validation], 3);
}

TEST(Split, FractionalFloorForManySizes) {
  for (int n = 10; n <= 120; n += 7) {
    auto c = role_counts(split_dataset(make_records(n), Scheme::Classification3, n));
    EXPECT_EQ(c[SplitRole::Train], 7 * n / 10) << n;
    EXPECT_EQ(c[SplitRole::Train] + c[SplitRole::Validation], n);
  }
}

TEST(Split, TooFewRecordsForCountPlan) {
  EXPECT_THROW(split_dataset(make_records(19), Scheme::Seg4, 0), InvalidArgument);
  EXPECT_THROW(split_dataset(make_records(198), Scheme::Seg2, 0), InvalidArgument);
  EXPECT_THROW(split_dataset({}, Scheme::Classification3, 0), InvalidArgument);
}

TEST(Split, DeterministicAndOrderIndependent) {
  auto recs = make_records(40);
  const auto a = split_dataset(recs, Scheme::Classification3, 77);
  std::reverse(recs.begin(), recs.end());
  const auto b = split_dataset(recs, Scheme::Classification3, 77);
  std::map<std::string, SplitRole> ra, rb;
  for (const auto& r : a.records) ra[r.case_id] = r.split_role;
  for (const auto& r : b.records) rb[r.case_id] = r.split_role;
  EXPECT_EQ(ra, rb);
  const auto c = split_dataset(make_records(40), Scheme::Classification3, 78);
  std::map<std::string, SplitRole> rc;
  for (const auto& r : c.records) rc[r.case_id] = r.split_role;
  EXPECT_NE(ra, rc);
}

TEST(Split, RolesPartitionRecords) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const int n = rng.uniform_int(10, 60);
    const auto m = split_dataset(make_records(n, t), Scheme::Classification3, rng.next_u64());
    std::set<std::string> seen;
    std::size_t total = 0;
    for (auto role : {SplitRole::Train, SplitRole::Validation, SplitRole::Test}) {
      for (const auto* r : m.with_role(role)) {
        EXPECT_TRUE(seen.insert(r->case_id).second);
        ++total;
      }
    }
    EXPECT_EQ(total, static_cast<std::size_t>(n));
  }
}

TEST(Split, StratifiedAppliesFractionPerClass) {
  auto recs = make_records(30);
  for (int i = 0; i < 30; ++i) recs[i].class_label = static_cast<ClassLabel>(i % 3);
  SplitPlan plan = SplitPlan::for_scheme(Scheme::Classification3);
  plan.stratified = true;
  const auto m = split_dataset(recs, Scheme::Classification3, 5, plan);
  std::map<ClassLabel, int> train;
  for (const auto* r : m.with_role(SplitRole::Train)) ++train[*r->class_label];
  for (int k = 0; k < 3; ++k) EXPECT_EQ(train[static_cast<ClassLabel>(k)], 7);
}
