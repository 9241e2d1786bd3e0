#include "lungtriage/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lungtriage/nn/loss.hpp"

namespace lungtriage {

SegmenterConfig SegmenterConfig::for_scheme(Scheme scheme, int base_channels, std::uint64_t seed) {
  SegmenterConfig c;
  c.out_channels = label_count(scheme);
  c.base_channels = base_channels;
  c.seed = seed;
  return c;
}

Scheme SegmenterConfig::scheme() const {
  if (out_channels == 2) return Scheme::Seg2;
  if (out_channels == 4) return Scheme::Seg4;
  throw InvalidArgument("out_channels " + std::to_string(out_channels) + " matches no segmentation scheme");
}

void SegmenterConfig::validate() const {
  if (levels < 2 || levels > 6) throw InvalidArgument("levels must be in [2, 6]");
  if (in_channels != 3) throw InvalidArgument("segmenter input is image + positive + negative guidance (3 channels)");
  if (out_channels != 2 && out_channels != 4) throw InvalidArgument("out_channels must be 2 or 4");
  if (base_channels < 2 || base_channels % 2 != 0) throw InvalidArgument("base_channels must be even and >= 2");
}

GuidanceMaps GuidanceMaps::zeros(Shape3 shape) {
  GuidanceMaps g;
  g.shape = shape;
  g.positive.assign(voxel_count(shape), 0.0f);
  g.negative.assign(voxel_count(shape), 0.0f);
  return g;
}

GuidanceMaps make_guidance_maps(const std::vector<GuidanceClick>& clicks, Shape3 shape, double sigma_vox) {
  if (!(sigma_vox > 0.0)) throw InvalidArgument("sigma_vox must be > 0");
  for (std::size_t i = 0; i < clicks.size(); ++i) {
    const auto& c = clicks[i];
    if (!in_bounds(shape, c.x, c.y, c.z)) {
      throw OutOfRange("click " + std::to_string(i) + " at (" + std::to_string(c.x) + "," + std::to_string(c.y) +
                            "," + std::to_string(c.z) + ") is outside " + shape_string(shape));
    }
  }
  GuidanceMaps g = GuidanceMaps::zeros(shape);
  const double k = 1.0 / (2.0 * sigma_vox * sigma_vox);
  for (const auto& c : clicks) {
    auto& field = c.polarity == Polarity::Positive ? g.positive : g.negative;
    for (int z = 0; z < shape[2]; ++z) {
      const double dz2 = static_cast<double>(z - c.z) * (z - c.z);
      for (int y = 0; y < shape[1]; ++y) {
        const double dy2 = static_cast<double>(y - c.y) * (y - c.y);
        float* row = field.data() + linear_index(shape, 0, y, z);
        for (int x = 0; x < shape[0]; ++x) {
          const double d2 = dz2 + dy2 + static_cast<double>(x - c.x) * (x - c.x);
          row[x] = std::max(row[x], static_cast<float>(std::exp(-d2 * k)));
        }
      }
    }
  }
  return g;
}

namespace nn {

namespace {

constexpr Triple kCube3{3, 3, 3};
constexpr Triple kOne{1, 1, 1};
constexpr Triple kPad1{1, 1, 1};
constexpr Triple kZero{0, 0, 0};
constexpr Triple kTwo{2, 2, 2};

}  // namespace

template <typename T>
struct ConvBnRelu {
  Conv<T> conv;
  BatchNorm<T> bn;
  ReLU<T> relu;

  ConvBnRelu() = default;
  ConvBnRelu(const std::string& name, int in, int out)
      : conv(name + ".conv", in, out, kCube3, kOne, kPad1, false), bn(name + ".bn", out) {}

  Tensor<T> infer(const Tensor<T>& x) const { return relu.infer(bn.infer(conv.infer(x))); }
  Tensor<T> forward(const Tensor<T>& x) { return relu.forward(bn.forward(conv.forward(x))); }
  Tensor<T> backward(const Tensor<T>& dy) { return conv.backward(bn.backward(relu.backward(dy))); }
  void collect(ParameterList<T>& out) {
    conv.collect(out);
    bn.collect(out);
  }
};

template <typename T>
struct UNet3D<T>::Impl {
  struct Encoder {
    ConvBnRelu<T> a, b;
  };
  struct Decoder {
    UpConv<T> up;
    ConvBnRelu<T> a, b;
    int skip_channels = 0;
  };
  std::vector<Encoder> enc;       // levels entries, the last is the bottleneck
  std::vector<MaxPool<T>> pools;  // levels - 1
  std::vector<Decoder> dec;       // dec[l] produces level l, l = 0..levels-2
  Conv<T> head;
  std::vector<Tensor<T>> skips;  // forward() cache

  Tensor<T> run_infer(const Tensor<T>& x) const {
    const int L = static_cast<int>(enc.size());
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (int l = 0; l < L; ++l) {
      h = enc[l].b.infer(enc[l].a.infer(h));
      if (l + 1 < L) {
        skips.push_back(h);
        h = pools[l].infer(h);
      }
    }
    for (int l = L - 2; l >= 0; --l) {
      h = concat_channels(dec[l].up.infer(h), skips[l]);
      h = dec[l].b.infer(dec[l].a.infer(h));
    }
    return head.infer(h);
  }
};

template <typename T>
UNet3D<T>::UNet3D(const SegmenterConfig& config) : config_(config), impl_(std::make_unique<Impl>()) {
  config_.validate();
  const int L = config_.levels;
  auto& m = *impl_;
  int in = config_.in_channels;
  for (int l = 0; l < L; ++l) {
    const int c = config_.base_channels << l;
    const std::string name = "enc" + std::to_string(l);
    m.enc.push_back({ConvBnRelu<T>(name + ".a", in, c / 2), ConvBnRelu<T>(name + ".b", c / 2, c)});
    if (l + 1 < L) m.pools.emplace_back(kTwo, kTwo, kZero);
    in = c;
  }
  m.dec.resize(static_cast<std::size_t>(L - 1));
  for (int l = L - 2; l >= 0; --l) {
    const int below = config_.base_channels << (l + 1);
    const int c = config_.base_channels << l;
    const std::string name = "dec" + std::to_string(l);
    m.dec[l].up = UpConv<T>(name + ".up", below, below, kTwo);
    m.dec[l].a = ConvBnRelu<T>(name + ".a", below + c, c);
    m.dec[l].b = ConvBnRelu<T>(name + ".b", c, c);
    m.dec[l].skip_channels = c;
  }
  m.head = Conv<T>("head", config_.base_channels, config_.out_channels, kOne, kOne, kZero, true);

  Rng rng(mix64(config_.seed ^ 0x554E45543344ULL));
  for (auto& e : m.enc) {
    e.a.conv.init(rng);
    e.b.conv.init(rng);
  }
  for (int l = L - 2; l >= 0; --l) {
    m.dec[l].up.init(rng);
    m.dec[l].a.conv.init(rng);
    m.dec[l].b.conv.init(rng);
  }
  m.head.init(rng);
}

template <typename T>
UNet3D<T>::~UNet3D() = default;
template <typename T>
UNet3D<T>::UNet3D(UNet3D&&) noexcept = default;
template <typename T>
UNet3D<T>& UNet3D<T>::operator=(UNet3D&&) noexcept = default;

template <typename T>
void UNet3D<T>::check_input(const Tensor<T>& x) const {
  if (x.channels() != config_.in_channels) {
    throw ShapeMismatch("segmenter expects " + std::to_string(config_.in_channels) + " input channels, got " +
                        std::to_string(x.channels()));
  }
  const int div = config_.size_divisor();
  for (int a = 2; a < 5; ++a) {
    if (x.dims[a] < div || x.dims[a] % div != 0) {
      throw ShapeMismatch("segmenter input spatial dims " + dims_string(x.dims) + " must be positive multiples of " +
                          std::to_string(div));
    }
  }
}

template <typename T>
Tensor<T> UNet3D<T>::infer(const Tensor<T>& x) const {
  check_input(x);
  return impl_->run_infer(x);
}

template <typename T>
Tensor<T> UNet3D<T>::forward(const Tensor<T>& x) {
  check_input(x);
  auto& m = *impl_;
  const int L = config_.levels;
  m.skips.clear();
  Tensor<T> h = x;
  for (int l = 0; l < L; ++l) {
    h = m.enc[l].b.forward(m.enc[l].a.forward(h));
    if (l + 1 < L) {
      m.skips.push_back(h);
      h = m.pools[l].forward(h);
    }
  }
  for (int l = L - 2; l >= 0; --l) {
    h = concat_channels(m.dec[l].up.forward(h), m.skips[l]);
    h = m.dec[l].b.forward(m.dec[l].a.forward(h));
  }
  return m.head.forward(h);
}

template <typename T>
void UNet3D<T>::backward(const Tensor<T>& dlogits) {
  auto& m = *impl_;
  const int L = config_.levels;
  std::vector<Tensor<T>> dskip(static_cast<std::size_t>(L - 1));
  Tensor<T> g = m.head.backward(dlogits);
  for (int l = 0; l <= L - 2; ++l) {
    g = m.dec[l].a.backward(m.dec[l].b.backward(g));
    Tensor<T> gup;
    split_channels(g, g.channels() - m.dec[l].skip_channels, gup, dskip[l]);
    g = m.dec[l].up.backward(gup);
  }
  for (int l = L - 1; l >= 0; --l) {
    g = m.enc[l].a.backward(m.enc[l].b.backward(g));
    if (l > 0) g = add(m.pools[l - 1].backward(g), dskip[l - 1]);
  }
  m.skips.clear();
}

template <typename T>
ParameterList<T> UNet3D<T>::parameters() {
  ParameterList<T> out;
  auto& m = *impl_;
  for (auto& e : m.enc) {
    e.a.collect(out);
    e.b.collect(out);
  }
  for (int l = config_.levels - 2; l >= 0; --l) {
    m.dec[l].up.collect(out);
    m.dec[l].a.collect(out);
    m.dec[l].b.collect(out);
  }
  m.head.collect(out);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> UNet3D<T>::parameters() const {
  auto list = const_cast<UNet3D*>(this)->parameters();
  return {list.begin(), list.end()};
}

template <typename T>
std::vector<int> UNet3D<T>::encoder_channels() const {
  std::vector<int> out;
  for (const auto& e : impl_->enc) out.push_back(e.b.conv.out_channels());
  return out;
}

template <typename T>
std::vector<int> UNet3D<T>::encoder_first_conv_channels() const {
  std::vector<int> out;
  for (const auto& e : impl_->enc) out.push_back(e.a.conv.out_channels());
  return out;
}

template <typename T>
int UNet3D<T>::conv3_count() const {
  return 2 * config_.levels + 2 * (config_.levels - 1);
}

template class UNet3D<float>;
template class UNet3D<double>;

}  // namespace nn

namespace {

// Copies the overlapping (d, h, w) corner of `src` into a zero tensor of dims `to`.
nn::Tensor<float> crop_or_pad(const nn::Tensor<float>& src, const nn::Dims& to) {
  nn::Tensor<float> out(to);
  const int d = std::min(src.depth(), to[2]);
  const int h = std::min(src.height(), to[3]);
  const int w = std::min(src.width(), to[4]);
  for (int n = 0; n < to[0]; ++n)
    for (int c = 0; c < to[1]; ++c)
      for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y) {
          const float* s = src.channel(n, c) + (static_cast<std::size_t>(z) * src.height() + y) * src.width();
          float* o = out.channel(n, c) + (static_cast<std::size_t>(z) * to[3] + y) * to[4];
          std::copy(s, s + w, o);
        }
  return out;
}

}  // namespace

nn::Tensor<float> make_segmenter_input(const Volume3D& normalized, const GuidanceMaps& guidance) {
  const Shape3& s = normalized.shape();
  if (guidance.shape != s || guidance.positive.size() != normalized.size() ||
      guidance.negative.size() != normalized.size()) {
    throw ShapeMismatch("guidance shape " + shape_string(guidance.shape) + " differs from volume " + shape_string(s));
  }
  nn::Tensor<float> t({1, 3, s[2], s[1], s[0]});
  const auto img = normalized.voxels();
  std::copy(img.begin(), img.end(), t.channel(0, 0));
  std::copy(guidance.positive.begin(), guidance.positive.end(), t.channel(0, 1));
  std::copy(guidance.negative.begin(), guidance.negative.end(), t.channel(0, 2));
  return t;
}

SegmentationMask argmax_mask(const nn::Tensor<float>& scores, Scheme scheme) {
  if (scores.batch() != 1 || scores.channels() != label_count(scheme)) {
    throw ShapeMismatch("scores " + nn::dims_string(scores.dims) + " do not match scheme " +
                        std::string(to_string(scheme)));
  }
  SegmentationMask mask({scores.width(), scores.height(), scores.depth()}, scheme);
  const int c = scores.channels();
  for (std::size_t i = 0; i < scores.spatial(); ++i) {
    int best = 0;
    float v = scores.channel(0, 0)[i];
    for (int k = 1; k < c; ++k) {
      const float s = scores.channel(0, k)[i];
      if (s > v) {
        v = s;
        best = k;
      }
    }
    mask.labels[i] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

SegmentationOutput segment(const SegmenterModel& model, const Volume3D& volume_normalized,
                           const GuidanceMaps& guidance) {
  const auto input = make_segmenter_input(volume_normalized, guidance);
  const int div = model.config().size_divisor();
  nn::Dims padded = input.dims;
  for (int a = 2; a < 5; ++a) padded[a] = std::max(div, (input.dims[a] + div - 1) / div * div);
  SegmentationOutput out;
  if (padded == input.dims) {
    out.scores = nn::softmax_channels(model.infer(input));
  } else {
    // Zero-pad to the network's size divisor, then crop the scores back to the volume grid.
    const auto full = nn::softmax_channels(model.infer(crop_or_pad(input, padded)));
    out.scores = crop_or_pad(full, {1, full.channels(), input.dims[2], input.dims[3], input.dims[4]});
  }
  out.mask = argmax_mask(out.scores, model.config().scheme());
  return out;
}

}  // namespace lungtriage
