#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lungtriage/volume_io.hpp"

namespace lungtriage {

namespace fs = std::filesystem;

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

int bytes_per_voxel(std::int16_t datatype) {
  switch (datatype) {
    case kUInt8:
    case kInt8: return 1;
    case kInt16:
    case kUInt16: return 2;
    case kInt32:
    case kUInt32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

/// Little/big-endian aware reader over the raw header.
class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(std::size_t offset) const {
    T value;
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool swap_;
};

template <typename T>
void put(std::vector<std::uint8_t>& buf, std::size_t offset, T value) {
  static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
  std::memcpy(buf.data() + offset, &value, sizeof(T));
}

struct ParsedHeader {
  Shape3 shape{};
  std::int16_t datatype = 0;
  std::size_t vox_offset = 0;
  float slope = 1.0f;
  float inter = 0.0f;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  Mat3 orientation = kIdentity3;
  bool swap = false;
};

Mat3 orthonormalize(Mat3 m) {
  // Gram-Schmidt over columns.
  for (int j = 0; j < 3; ++j) {
    for (int k = 0; k < j; ++k) {
      double dot = 0.0;
      for (int r = 0; r < 3; ++r) dot += m[r][j] * m[r][k];
      for (int r = 0; r < 3; ++r) m[r][j] -= dot * m[r][k];
    }
    double norm = 0.0;
    for (int r = 0; r < 3; ++r) norm += m[r][j] * m[r][j];
    norm = std::sqrt(norm);
    if (norm < 1e-12) return kIdentity3;
    for (int r = 0; r < 3; ++r) m[r][j] /= norm;
  }
  return m;
}

ParsedHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "file shorter than a NIfTI-1 header");
  }
  ParsedHeader h;
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  if (sizeof_hdr != kHeaderSize) {
    if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr))) != kHeaderSize) {
      throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "sizeof_hdr is not 348; not a NIfTI-1 file");
    }
    h.swap = true;
  }
  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::memcmp(magic, "n+1\0", 4) != 0) {
    throw VolumeIoError(VolumeIoError::Kind::MalformedHeader,
                        "magic is not 'n+1' (only single-file NIfTI-1 is supported)");
  }
  HeaderReader r(bytes, h.swap);
  const auto ndim = r.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) {
    throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "dim[0] out of range: " + std::to_string(ndim));
  }
  std::array<int, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = r.get<std::int16_t>(40 + 2 * i);
  if (ndim < 3) {
    throw VolumeIoError(VolumeIoError::Kind::NonVolumetric,
                        "non-3D payload: image has " + std::to_string(ndim) + " dimension(s)");
  }
  for (int i = 4; i <= ndim; ++i) {
    if (dim[i] > 1) {
      throw VolumeIoError(VolumeIoError::Kind::NonVolumetric,
                          "non-3D payload: dimension " + std::to_string(i) + " has extent " + std::to_string(dim[i]));
    }
  }
  for (int i = 1; i <= 3; ++i) {
    if (dim[i] < 1) {
      throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "non-positive extent in dim[" + std::to_string(i) + "]");
    }
  }
  h.shape = {dim[1], dim[2], dim[3]};
  h.datatype = r.get<std::int16_t>(70);
  if (bytes_per_voxel(h.datatype) == 0) {
    throw VolumeIoError(VolumeIoError::Kind::UnsupportedType, "unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  const float vox_offset = r.get<float>(108);
  if (!(vox_offset >= static_cast<float>(kHeaderSize)) || !std::isfinite(vox_offset)) {
    throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "vox_offset must be >= 348");
  }
  h.vox_offset = static_cast<std::size_t>(vox_offset);
  h.slope = r.get<float>(112);
  h.inter = r.get<float>(116);
  if (h.slope == 0.0f || !std::isfinite(h.slope)) {
    h.slope = 1.0f;
    h.inter = 0.0f;
  }
  if (!std::isfinite(h.inter)) h.inter = 0.0f;

  for (int i = 0; i < 3; ++i) {
    const float p = r.get<float>(80 + 4 * i);
    h.spacing[i] = (std::isfinite(p) && p != 0.0f) ? std::abs(static_cast<double>(p)) : 1.0;
  }
  const auto qform_code = r.get<std::int16_t>(252);
  const auto sform_code = r.get<std::int16_t>(254);
  if (sform_code > 0) {
    Mat3 m{};
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col) m[row][col] = r.get<float>(280 + 16 * row + 4 * col);
      h.origin[row] = r.get<float>(280 + 16 * row + 12);
    }
    for (int col = 0; col < 3; ++col) {
      for (int row = 0; row < 3; ++row) m[row][col] /= h.spacing[col];
    }
    h.orientation = orthonormalize(m);
  } else if (qform_code > 0) {
    const double b = r.get<float>(256);
    const double c = r.get<float>(260);
    const double d = r.get<float>(264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = r.get<float>(76) < 0.0f ? -1.0 : 1.0;
    Mat3 m{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
    for (int row = 0; row < 3; ++row) m[row][2] *= qfac;
    h.orientation = orthonormalize(m);
    h.origin = {r.get<float>(268), r.get<float>(272), r.get<float>(276)};
  }
  return h;
}

template <typename T>
T read_raw(const std::uint8_t* p, bool swap) {
  std::array<std::uint8_t, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if (swap) std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

double read_voxel(const std::uint8_t* p, std::int16_t datatype, bool swap) {
  switch (datatype) {
    case kUInt8: return *p;
    case kInt8: return static_cast<std::int8_t>(*p);
    case kInt16: return read_raw<std::int16_t>(p, swap);
    case kUInt16: return read_raw<std::uint16_t>(p, swap);
    case kInt32: return read_raw<std::int32_t>(p, swap);
    case kUInt32: return read_raw<std::uint32_t>(p, swap);
    case kFloat32: return read_raw<float>(p, swap);
    case kFloat64: return read_raw<double>(p, swap);
    default: return 0.0;
  }
}

struct DecodedPayload {
  ParsedHeader header;
  std::vector<double> values;
};

DecodedPayload decode_payload(std::span<const std::uint8_t> raw) {
  std::vector<std::uint8_t> inflated;
  if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
    inflated = gunzip(raw);
    raw = inflated;
  }
  DecodedPayload out;
  out.header = parse_header(raw);
  const auto& h = out.header;
  const std::size_t n = voxel_count(h.shape);
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(h.datatype));
  if (raw.size() < h.vox_offset + n * bpv) {
    throw VolumeIoError(VolumeIoError::Kind::Truncated,
                        "payload truncated: expected " + std::to_string(n * bpv) + " bytes of voxel data after offset " +
                            std::to_string(h.vox_offset) + ", file has " + std::to_string(raw.size()));
  }
  out.values.resize(n);
  const std::uint8_t* base = raw.data() + h.vox_offset;
  for (std::size_t i = 0; i < n; ++i) out.values[i] = read_voxel(base + i * bpv, h.datatype, h.swap);
  return out;
}

std::array<float, 4> mat_to_quaternion(const Mat3& m, float& qfac) {
  // Rotation part only; a reflection is folded into qfac by negating the third column.
  Mat3 r = m;
  const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                     r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                     r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
  qfac = 1.0f;
  if (det < 0.0) {
    qfac = -1.0f;
    for (int row = 0; row < 3; ++row) r[row][2] = -r[row][2];
  }
  double a = r[0][0] + r[1][1] + r[2][2] + 1.0;
  double b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (r[2][1] - r[1][2]) / a;
    c = 0.25 * (r[0][2] - r[2][0]) / a;
    d = 0.25 * (r[1][0] - r[0][1]) / a;
  } else {
    const double xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
    const double yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
    const double zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (r[0][1] + r[1][0]) / b;
      d = 0.25 * (r[0][2] + r[2][0]) / b;
      a = 0.25 * (r[2][1] - r[1][2]) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (r[0][1] + r[1][0]) / c;
      d = 0.25 * (r[1][2] + r[2][1]) / c;
      a = 0.25 * (r[0][2] - r[2][0]) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (r[0][2] + r[2][0]) / d;
      c = 0.25 * (r[1][2] + r[2][1]) / d;
      a = 0.25 * (r[1][0] - r[0][1]) / d;
    }
    if (a < 0.0) {
      b = -b;
      c = -c;
      d = -d;
    }
  }
  return {static_cast<float>(a), static_cast<float>(b), static_cast<float>(c), static_cast<float>(d)};
}

std::vector<std::uint8_t> encode_image(Shape3 shape, const Vec3& spacing, const Vec3& origin, const Mat3& orient,
                                       std::int16_t datatype, std::span<const std::uint8_t> payload) {
  std::vector<std::uint8_t> buf(kVoxOffset + payload.size(), 0);
  put<std::int32_t>(buf, 0, kHeaderSize);
  buf[39] = 0;  // dim_info
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(shape[0]), static_cast<std::int16_t>(shape[1]),
                                        static_cast<std::int16_t>(shape[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  put<std::int16_t>(buf, 70, datatype);
  put<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * bytes_per_voxel(datatype)));
  float qfac = 1.0f;
  const auto quat = mat_to_quaternion(orient, qfac);
  const std::array<float, 8> pixdim{qfac, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                                    static_cast<float>(spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pixdim[i]);
  put<float>(buf, 108, static_cast<float>(kVoxOffset));
  put<float>(buf, 112, 1.0f);
  put<float>(buf, 116, 0.0f);
  buf[123] = 2;  // xyzt_units: millimetres
  put<std::int16_t>(buf, 252, 1);
  put<std::int16_t>(buf, 254, 1);
  put<float>(buf, 256, quat[1]);
  put<float>(buf, 260, quat[2]);
  put<float>(buf, 264, quat[3]);
  for (int i = 0; i < 3; ++i) put<float>(buf, 268 + 4 * i, static_cast<float>(origin[i]));
  for (int row = 0; row < 3; ++row) {
    for (int col = 0; col < 3; ++col) {
      put<float>(buf, 280 + 16 * row + 4 * col, static_cast<float>(orient[row][col] * spacing[col]));
    }
    put<float>(buf, 280 + 16 * row + 12, static_cast<float>(origin[row]));
  }
  std::memcpy(buf.data() + 344, "n+1\0", 4);
  std::copy(payload.begin(), payload.end(), buf.begin() + kVoxOffset);
  return buf;
}

bool wants_gzip(const fs::path& path) { return path.extension() == ".gz"; }

void write_file_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw VolumeIoError(VolumeIoError::Kind::Unwritable, "write failed: " + path.string());
}

}  // namespace

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw Error("zlib inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk;
  int ret = Z_OK;
  while (ret != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    ret = inflate(&zs, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      throw VolumeIoError(VolumeIoError::Kind::Truncated, "corrupt or truncated gzip stream");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (ret == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw VolumeIoError(VolumeIoError::Kind::Truncated, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::vector<std::uint8_t> gzip_bytes(std::span<const std::uint8_t> bytes, int level) {
  z_stream zs{};
  if (deflateInit2(&zs, level, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw Error("zlib deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(bytes.size())) + 32);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int ret = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (ret != Z_STREAM_END) throw Error("zlib deflate failed");
  out.resize(zs.total_out);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) {
    throw VolumeIoError(VolumeIoError::Kind::MissingFile, "missing file: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeIoError(VolumeIoError::Kind::MissingFile, "cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes);
  return bytes;
}

Volume3D decode_volume(std::span<const std::uint8_t> bytes) {
  auto decoded = decode_payload(bytes);
  const auto& h = decoded.header;
  std::vector<float> voxels(decoded.values.size());
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const double v = decoded.values[i] * h.slope + h.inter;
    if (!std::isfinite(v)) throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "non-finite voxel value in payload");
    voxels[i] = static_cast<float>(v);
  }
  return Volume3D(h.shape, std::move(voxels), h.spacing, h.origin, h.orientation);
}

std::vector<std::uint8_t> encode_volume(const Volume3D& volume, bool gzip) {
  const auto voxels = volume.voxels();
  std::span<const std::uint8_t> payload(reinterpret_cast<const std::uint8_t*>(voxels.data()), voxels.size_bytes());
  auto bytes = encode_image(volume.shape(), volume.spacing(), volume.origin(), volume.orientation(), kFloat32, payload);
  return gzip ? gzip_bytes(bytes) : bytes;
}

Volume3D load_volume(const fs::path& path) { return decode_volume(read_file_bytes(path)); }

void save_volume(const Volume3D& volume, const fs::path& path) {
  write_file_bytes(path, encode_volume(volume, wants_gzip(path)));
}

SegmentationMask decode_mask(std::span<const std::uint8_t> bytes, Scheme scheme) {
  auto decoded = decode_payload(bytes);
  SegmentationMask mask(decoded.header.shape, scheme);
  const int n = label_count(scheme);
  for (std::size_t i = 0; i < decoded.values.size(); ++i) {
    const double v = decoded.values[i] * decoded.header.slope + decoded.header.inter;
    const double rounded = std::round(v);
    if (std::abs(v - rounded) > 1e-3 || rounded < 0.0 || rounded >= n) {
      throw InvalidArgument("mask value " + std::to_string(v) + " is not a label id of scheme " +
                            std::string(to_string(scheme)));
    }
    mask.labels[i] = static_cast<std::uint8_t>(rounded);
  }
  return mask;
}

SegmentationMask load_mask(const fs::path& path, Scheme scheme) { return decode_mask(read_file_bytes(path), scheme); }

void save_mask(const SegmentationMask& mask, const fs::path& path, const Volume3D* geometry) {
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  Mat3 orient = kIdentity3;
  if (geometry != nullptr) {
    if (geometry->shape() != mask.shape) throw ShapeMismatch("mask and geometry volume shapes differ");
    spacing = geometry->spacing();
    origin = geometry->origin();
    orient = geometry->orientation();
  }
  auto bytes = encode_image(mask.shape, spacing, origin, orient, kUInt8, mask.labels);
  write_file_bytes(path, wants_gzip(path) ? gzip_bytes(bytes) : bytes);
}

Shape3 read_volume_shape(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw VolumeIoError(VolumeIoError::Kind::MissingFile, "missing file: " + path.string());
  std::vector<std::uint8_t> header(kHeaderSize);
  const int got = gzread(f, header.data(), kHeaderSize);
  gzclose(f);
  if (got != kHeaderSize) throw VolumeIoError(VolumeIoError::Kind::MalformedHeader, "file shorter than a NIfTI-1 header");
  return parse_header(header).shape;
}

}  // namespace lungtriage
