#include "lungtriage/nn/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace lungtriage::nn {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using RowMap = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const MatRM<T>>;

constexpr std::size_t kIm2colBudget = std::size_t{1} << 22;  // elements per column chunk

/// Geometry of the zero-padded grid used by stride-1 same convolutions.
struct PaddedGrid {
  int d, h, w;     // unpadded
  int pd, ph, pw;  // padding
  int dp, hp, wp;  // padded
  std::size_t size() const { return static_cast<std::size_t>(dp) * hp * wp; }
  std::ptrdiff_t first() const { return static_cast<std::ptrdiff_t>(pd) * hp * wp + static_cast<std::ptrdiff_t>(ph) * wp + pw; }
  std::ptrdiff_t offset(int kz, int ky, int kx) const {
    return static_cast<std::ptrdiff_t>(kz - pd) * hp * wp + static_cast<std::ptrdiff_t>(ky - ph) * wp + (kx - pw);
  }
};

PaddedGrid make_grid(const Dims& x, const Triple& pad) {
  return {x[2], x[3], x[4], pad[0], pad[1], pad[2], x[2] + 2 * pad[0], x[3] + 2 * pad[1], x[4] + 2 * pad[2]};
}

template <typename T>
void pad_into(const T* src, int channels, const PaddedGrid& g, T* dst) {
  const std::size_t plane = g.size();
  std::fill(dst, dst + plane * channels, T(0));
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < g.d; ++z) {
      for (int y = 0; y < g.h; ++y) {
        const T* s = src + ((static_cast<std::size_t>(c) * g.d + z) * g.h + y) * g.w;
        T* t = dst + c * plane + (static_cast<std::size_t>(z + g.pd) * g.hp + (y + g.ph)) * g.wp + g.pw;
        std::copy(s, s + g.w, t);
      }
    }
  }
}

template <typename T>
void crop_from(const T* src, int channels, const PaddedGrid& g, T* dst) {
  const std::size_t plane = g.size();
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < g.d; ++z) {
      for (int y = 0; y < g.h; ++y) {
        const T* s = src + c * plane + (static_cast<std::size_t>(z + g.pd) * g.hp + (y + g.ph)) * g.wp + g.pw;
        T* t = dst + ((static_cast<std::size_t>(c) * g.d + z) * g.h + y) * g.w;
        std::copy(s, s + g.w, t);
      }
    }
  }
}

/// Tap offsets on the padded grid in (kz, ky, kx) order.
std::vector<std::ptrdiff_t> tap_offsets(const PaddedGrid& g, const Triple& kernel) {
  std::vector<std::ptrdiff_t> off;
  for (int kz = 0; kz < kernel[0]; ++kz)
    for (int ky = 0; ky < kernel[1]; ++ky)
      for (int kx = 0; kx < kernel[2]; ++kx) off.push_back(g.offset(kz, ky, kx));
  return off;
}

/// Per-thread reusable buffer; avoids refaulting large padded grids on every call.
template <typename T>
T* scratch(int slot, std::size_t size) {
  thread_local std::vector<T> buffers[3];
  auto& b = buffers[slot];
  if (b.size() < size) b.resize(size);
  return b.data();
}

/// One 64-byte SIMD register of T.
template <typename T>
struct Simd {
  static constexpr int lanes = 64 / sizeof(T);
  typedef T V __attribute__((vector_size(64)));
};

template <typename T>
typename Simd<T>::V load(const T* p) {
  typename Simd<T>::V v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}

/// y(o, p) = sum_{c, t} w(o, c, t) x(c, p + off[t]) for CO outputs and p in [lo, hi).
/// `wp` is packed as [c][t][o].
template <typename T, int CO>
void direct_block(const T* x, int cin, std::ptrdiff_t plane, const std::vector<std::ptrdiff_t>& off, const T* wp,
                  std::ptrdiff_t lo, std::ptrdiff_t hi, T* y) {
  using V = typename Simd<T>::V;
  constexpr int L = Simd<T>::lanes;
  const int taps = static_cast<int>(off.size());
  std::ptrdiff_t p = lo;
  for (; p + L <= hi; p += L) {
    V acc[CO];
    for (int o = 0; o < CO; ++o) acc[o] = V{};
    const T* wc = wp;
    for (int c = 0; c < cin; ++c) {
      const T* xc = x + c * plane + p;
      for (int t = 0; t < taps; ++t, wc += CO) {
        const V xv = load(xc + off[t]);
        for (int o = 0; o < CO; ++o) acc[o] += wc[o] * xv;
      }
    }
    for (int o = 0; o < CO; ++o) __builtin_memcpy(y + o * plane + p, &acc[o], sizeof(V));
  }
  for (; p < hi; ++p) {
    T acc[CO] = {};
    const T* wc = wp;
    for (int c = 0; c < cin; ++c)
      for (int t = 0; t < taps; ++t, wc += CO)
        for (int o = 0; o < CO; ++o) acc[o] += wc[o] * x[c * plane + p + off[t]];
    for (int o = 0; o < CO; ++o) y[o * plane + p] = acc[o];
  }
}

/// Stride-1 convolution on padded grids; `w(o, c, t)` reads the weights.
template <typename T, typename W>
void direct_conv(const T* x, int cin, std::ptrdiff_t plane, const std::vector<std::ptrdiff_t>& off, int cout, W w,
                 std::ptrdiff_t lo, std::ptrdiff_t hi, T* y) {
  const int taps = static_cast<int>(off.size());
  std::vector<T> wp;
  for (int o0 = 0; o0 < cout;) {
    const int rest = cout - o0;
    const int co = rest >= 8 ? 8 : rest >= 4 ? 4 : rest >= 2 ? 2 : 1;
    wp.resize(static_cast<std::size_t>(cin) * taps * co);
    for (int c = 0; c < cin; ++c)
      for (int t = 0; t < taps; ++t)
        for (int o = 0; o < co; ++o) wp[(static_cast<std::size_t>(c) * taps + t) * co + o] = w(o0 + o, c, t);
    T* yo = y + o0 * plane;
    switch (co) {
      case 8: direct_block<T, 8>(x, cin, plane, off, wp.data(), lo, hi, yo); break;
      case 4: direct_block<T, 4>(x, cin, plane, off, wp.data(), lo, hi, yo); break;
      case 2: direct_block<T, 2>(x, cin, plane, off, wp.data(), lo, hi, yo); break;
      default: direct_block<T, 1>(x, cin, plane, off, wp.data(), lo, hi, yo); break;
    }
    o0 += co;
  }
}

/// dw(o, c, t) += sum_p dy(o, p) x(c, p + off[t]) over p in [lo, hi) for CO outputs;
/// `dw` rows are `ldw` apart.
template <typename T, int CO>
void weight_grad_block(const T* dy, const T* x, int cin, std::ptrdiff_t plane, const std::vector<std::ptrdiff_t>& off,
                       std::ptrdiff_t lo, std::ptrdiff_t hi, T* dw, std::ptrdiff_t ldw) {
  using V = typename Simd<T>::V;
  constexpr int L = Simd<T>::lanes;
  constexpr std::ptrdiff_t kChunk = 64 * L;
  const int taps = static_cast<int>(off.size());
  const std::ptrdiff_t vend = lo + (hi - lo) / L * L;
  std::vector<V> part(static_cast<std::size_t>(cin) * taps * CO, V{});
  for (std::ptrdiff_t c0 = lo; c0 < vend; c0 += kChunk) {
    const std::ptrdiff_t c1 = std::min(vend, c0 + kChunk);
    for (int c = 0; c < cin; ++c) {
      const T* xc = x + c * plane;
      int t = 0;
      for (; t + 3 <= taps; t += 3) {
        V acc[3][CO];
        for (int k = 0; k < 3; ++k)
          for (int o = 0; o < CO; ++o) acc[k][o] = V{};
        const T* x0 = xc + off[t];
        const T* x1 = xc + off[t + 1];
        const T* x2 = xc + off[t + 2];
        for (std::ptrdiff_t p = c0; p < c1; p += L) {
          const V a = load(x0 + p), b = load(x1 + p), d = load(x2 + p);
          for (int o = 0; o < CO; ++o) {
            const V g = load(dy + o * plane + p);
            acc[0][o] += g * a;
            acc[1][o] += g * b;
            acc[2][o] += g * d;
          }
        }
        for (int k = 0; k < 3; ++k) {
          V* dst = part.data() + (static_cast<std::size_t>(c) * taps + t + k) * CO;
          for (int o = 0; o < CO; ++o) dst[o] += acc[k][o];
        }
      }
      for (; t < taps; ++t) {
        V acc[CO];
        for (int o = 0; o < CO; ++o) acc[o] = V{};
        for (std::ptrdiff_t p = c0; p < c1; p += L) {
          const V xv = load(xc + p + off[t]);
          for (int o = 0; o < CO; ++o) acc[o] += load(dy + o * plane + p) * xv;
        }
        V* dst = part.data() + (static_cast<std::size_t>(c) * taps + t) * CO;
        for (int o = 0; o < CO; ++o) dst[o] += acc[o];
      }
    }
  }
  for (int c = 0; c < cin; ++c)
    for (int t = 0; t < taps; ++t)
      for (int o = 0; o < CO; ++o) {
        const V& v = part[(static_cast<std::size_t>(c) * taps + t) * CO + o];
        T sum = T(0);
        for (int l = 0; l < L; ++l) sum += v[l];
        for (std::ptrdiff_t p = vend; p < hi; ++p) sum += dy[o * plane + p] * x[c * plane + p + off[t]];
        dw[o * ldw + static_cast<std::ptrdiff_t>(c) * taps + t] += sum;
      }
}

template <typename T>
void weight_grad(const T* dy, int cout, const T* x, int cin, std::ptrdiff_t plane, const std::vector<std::ptrdiff_t>& off,
                 std::ptrdiff_t lo, std::ptrdiff_t hi, T* dw) {
  const std::ptrdiff_t ldw = static_cast<std::ptrdiff_t>(cin) * static_cast<std::ptrdiff_t>(off.size());
  for (int o0 = 0; o0 < cout;) {
    const int rest = cout - o0;
    const int co = rest >= 8 ? 8 : rest >= 4 ? 4 : rest >= 2 ? 2 : 1;
    const T* d = dy + o0 * plane;
    T* g = dw + o0 * ldw;
    switch (co) {
      case 8: weight_grad_block<T, 8>(d, x, cin, plane, off, lo, hi, g, ldw); break;
      case 4: weight_grad_block<T, 4>(d, x, cin, plane, off, lo, hi, g, ldw); break;
      case 2: weight_grad_block<T, 2>(d, x, cin, plane, off, lo, hi, g, ldw); break;
      default: weight_grad_block<T, 1>(d, x, cin, plane, off, lo, hi, g, ldw); break;
    }
    o0 += co;
  }
}

struct Im2colGeometry {
  int cin, d, h, w;
  int kd, kh, kw;
  int sd, sh, sw;
  int pd, ph, pw;
  int od, oh, ow;
  std::size_t k() const { return static_cast<std::size_t>(cin) * kd * kh * kw; }
  std::size_t out_positions() const { return static_cast<std::size_t>(od) * oh * ow; }
};

/// cols(row = (c, kz, ky, kx), col = q - q0) for output positions [q0, q0 + count).
template <typename T>
void im2col(const T* x, const Im2colGeometry& g, std::size_t q0, std::size_t count, T* cols) {
  std::vector<int> bz(count), by(count), bx(count);
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t q = q0 + j;
    const int ox = static_cast<int>(q % g.ow);
    const int oy = static_cast<int>((q / g.ow) % g.oh);
    const int oz = static_cast<int>(q / (static_cast<std::size_t>(g.ow) * g.oh));
    bz[j] = oz * g.sd - g.pd;
    by[j] = oy * g.sh - g.ph;
    bx[j] = ox * g.sw - g.pw;
  }
  std::size_t row = 0;
  for (int c = 0; c < g.cin; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          T* out = cols + row * count;
          for (std::size_t j = 0; j < count; ++j) {
            const int z = bz[j] + kz;
            const int y = by[j] + ky;
            const int xx = bx[j] + kx;
            out[j] = (z >= 0 && z < g.d && y >= 0 && y < g.h && xx >= 0 && xx < g.w)
                         ? xc[(static_cast<std::size_t>(z) * g.h + y) * g.w + xx]
                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const Im2colGeometry& g, std::size_t q0, std::size_t count, T* dx) {
  std::vector<int> bz(count), by(count), bx(count);
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t q = q0 + j;
    const int ox = static_cast<int>(q % g.ow);
    const int oy = static_cast<int>((q / g.ow) % g.oh);
    const int oz = static_cast<int>(q / (static_cast<std::size_t>(g.ow) * g.oh));
    bz[j] = oz * g.sd - g.pd;
    by[j] = oy * g.sh - g.ph;
    bx[j] = ox * g.sw - g.pw;
  }
  std::size_t row = 0;
  for (int c = 0; c < g.cin; ++c) {
    T* xc = dx + static_cast<std::size_t>(c) * g.d * g.h * g.w;
    for (int kz = 0; kz < g.kd; ++kz) {
      for (int ky = 0; ky < g.kh; ++ky) {
        for (int kx = 0; kx < g.kw; ++kx, ++row) {
          const T* in = cols + row * count;
          for (std::size_t j = 0; j < count; ++j) {
            const int z = bz[j] + kz;
            const int y = by[j] + ky;
            const int xx = bx[j] + kx;
            if (z >= 0 && z < g.d && y >= 0 && y < g.h && xx >= 0 && xx < g.w) {
              xc[(static_cast<std::size_t>(z) * g.h + y) * g.w + xx] += in[j];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void he_normal(std::vector<T>& w, int fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / std::max(1, fan_in));
  for (auto& v : w) v = static_cast<T>(stddev * rng.normal());
}

}  // namespace

std::string dims_string(const Dims& d) {
  return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) + "," +
         std::to_string(d[3]) + "," + std::to_string(d[4]) + ")";
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims != b.dims) throw ShapeMismatch("add: " + dims_string(a.dims) + " vs " + dims_string(b.dims));
  Tensor<T> out(a.dims);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dims[0] != b.dims[0] || a.dims[2] != b.dims[2] || a.dims[3] != b.dims[3] || a.dims[4] != b.dims[4]) {
    throw ShapeMismatch("concat: " + dims_string(a.dims) + " vs " + dims_string(b.dims));
  }
  Tensor<T> out({a.dims[0], a.dims[1] + b.dims[1], a.dims[2], a.dims[3], a.dims[4]});
  for (int n = 0; n < a.batch(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.sample_size(), out.sample(n));
    std::copy(b.sample(n), b.sample(n) + b.sample_size(), out.sample(n) + a.sample_size());
  }
  return out;
}

template <typename T>
void split_channels(const Tensor<T>& g, int channels_a, Tensor<T>& ga, Tensor<T>& gb) {
  ga = Tensor<T>({g.dims[0], channels_a, g.dims[2], g.dims[3], g.dims[4]});
  gb = Tensor<T>({g.dims[0], g.dims[1] - channels_a, g.dims[2], g.dims[3], g.dims[4]});
  for (int n = 0; n < g.batch(); ++n) {
    std::copy(g.sample(n), g.sample(n) + ga.sample_size(), ga.sample(n));
    std::copy(g.sample(n) + ga.sample_size(), g.sample(n) + g.sample_size(), gb.sample(n));
  }
}

// ---------------------------------------------------------------------------------------
// Conv

template <typename T>
Conv<T>::Conv(std::string name, int in_channels, int out_channels, Triple kernel, Triple stride, Triple pad, bool bias)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(bias),
      weight_(name + ".weight", {out_channels, in_channels, kernel[0], kernel[1], kernel[2]}),
      bias_(name + ".bias", {bias ? out_channels : 0}) {}

template <typename T>
void Conv<T>::init(Rng& rng) {
  he_normal(weight_.value, in_ * kernel_[0] * kernel_[1] * kernel_[2], rng);
  std::fill(bias_.value.begin(), bias_.value.end(), T(0));
}

template <typename T>
void Conv<T>::collect(ParameterList<T>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

template <typename T>
bool Conv<T>::same_padding() const {
  for (int a = 0; a < 3; ++a) {
    if (stride_[a] != 1 || kernel_[a] % 2 == 0 || pad_[a] != kernel_[a] / 2) return false;
  }
  return true;
}

template <typename T>
Dims Conv<T>::output_dims(const Dims& in) const {
  Dims out{in[0], out_, 0, 0, 0};
  for (int a = 0; a < 3; ++a) out[2 + a] = (in[2 + a] + 2 * pad_[a] - kernel_[a]) / stride_[a] + 1;
  return out;
}

template <typename T>
void Conv<T>::check_input(const Tensor<T>& x) const {
  if (x.channels() != in_) {
    throw ShapeMismatch(weight_.name + ": expected " + std::to_string(in_) + " input channels, got " +
                        std::to_string(x.channels()));
  }
  for (int a = 0; a < 3; ++a) {
    if (x.dims[2 + a] + 2 * pad_[a] < kernel_[a]) throw ShapeMismatch(weight_.name + ": input smaller than kernel");
  }
}

template <typename T>
Tensor<T> Conv<T>::infer(const Tensor<T>& x) const {
  check_input(x);
  Tensor<T> y(output_dims(x.dims));
  const int taps = kernel_[0] * kernel_[1] * kernel_[2];
  const std::size_t out_plane = y.spatial();

  if (same_padding()) {
    const auto g = make_grid(x.dims, pad_);
    const auto off = tap_offsets(g, kernel_);
    const auto plane = static_cast<std::ptrdiff_t>(g.size());
    T* xp = scratch<T>(0, static_cast<std::size_t>(plane) * in_);
    T* yp = scratch<T>(1, static_cast<std::size_t>(plane) * out_);
    const std::ptrdiff_t lo = g.first();
    const std::ptrdiff_t hi = plane - lo;
    const T* w = weight_.value.data();
    const auto wat = [&](int o, int c, int t) { return w[(static_cast<std::size_t>(o) * in_ + c) * taps + t]; };
    for (int n = 0; n < x.batch(); ++n) {
      pad_into(x.sample(n), in_, g, xp);
      direct_conv(xp, in_, plane, off, out_, wat, lo, hi, yp);
      crop_from(yp, out_, g, y.sample(n));
    }
  } else {
    const Im2colGeometry g{in_,         x.dims[2],  x.dims[3],  x.dims[4], kernel_[0], kernel_[1], kernel_[2],
                           stride_[0],  stride_[1], stride_[2], pad_[0],   pad_[1],    pad_[2],    y.dims[2],
                           y.dims[3],   y.dims[4]};
    const std::size_t k = g.k();
    const std::size_t total = g.out_positions();
    const std::size_t chunk = std::max<std::size_t>(1, std::min(total, kIm2colBudget / k));
    std::vector<T> cols(k * chunk);
    ConstRowMap<T> w(weight_.value.data(), out_, static_cast<Eigen::Index>(k));
    for (int n = 0; n < x.batch(); ++n) {
      for (std::size_t q0 = 0; q0 < total; q0 += chunk) {
        const std::size_t cnt = std::min(chunk, total - q0);
        im2col(x.sample(n), g, q0, cnt, cols.data());
        ConstRowMap<T> c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cnt));
        StridedMap<T> yblk(y.sample(n) + q0, out_, static_cast<Eigen::Index>(cnt),
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
        yblk.noalias() = w * c;
      }
    }
  }
  if (has_bias_) {
    for (int n = 0; n < y.batch(); ++n)
      for (int c = 0; c < out_; ++c) {
        T* p = y.channel(n, c);
        const T b = bias_.value[c];
        for (std::size_t i = 0; i < out_plane; ++i) p[i] += b;
      }
  }
  return y;
}

template <typename T>
Tensor<T> Conv<T>::forward(const Tensor<T>& x) {
  cached_input_ = x;
  return infer(x);
}

template <typename T>
Tensor<T> Conv<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = cached_input_;
  if (dy.dims != output_dims(x.dims)) throw ShapeMismatch(weight_.name + ": gradient shape mismatch");
  Tensor<T> dx(x.dims);
  const int taps = kernel_[0] * kernel_[1] * kernel_[2];

  if (has_bias_) {
    for (int n = 0; n < dy.batch(); ++n)
      for (int c = 0; c < out_; ++c) {
        const T* p = dy.channel(n, c);
        T s = T(0);
        for (std::size_t i = 0; i < dy.spatial(); ++i) s += p[i];
        bias_.grad[c] += s;
      }
  }

  if (same_padding()) {
    const auto g = make_grid(x.dims, pad_);
    const auto off = tap_offsets(g, kernel_);
    const auto plane = static_cast<std::ptrdiff_t>(g.size());
    std::vector<std::ptrdiff_t> back(off.size());
    std::transform(off.begin(), off.end(), back.begin(), [](std::ptrdiff_t o) { return -o; });
    const T* w = weight_.value.data();
    // dx is the convolution of dy with the mirrored taps and transposed channels
    const auto wt = [&](int i, int o, int t) { return w[(static_cast<std::size_t>(o) * in_ + i) * taps + t]; };
    T* xp = scratch<T>(0, static_cast<std::size_t>(plane) * in_);
    T* dyp = scratch<T>(1, static_cast<std::size_t>(plane) * out_);
    T* dxp = scratch<T>(2, static_cast<std::size_t>(plane) * in_);
    const std::ptrdiff_t lo = g.first();
    const std::ptrdiff_t hi = plane - lo;
    for (int n = 0; n < x.batch(); ++n) {
      pad_into(x.sample(n), in_, g, xp);
      pad_into(dy.sample(n), out_, g, dyp);
      weight_grad(dyp, out_, xp, in_, plane, off, lo, hi, weight_.grad.data());
      direct_conv(dyp, out_, plane, back, in_, wt, lo, hi, dxp);
      crop_from(dxp, in_, g, dx.sample(n));
    }
  } else {
    const Im2colGeometry g{in_,        x.dims[2],  x.dims[3],  x.dims[4], kernel_[0], kernel_[1], kernel_[2],
                           stride_[0], stride_[1], stride_[2], pad_[0],   pad_[1],    pad_[2],    dy.dims[2],
                           dy.dims[3], dy.dims[4]};
    const std::size_t k = g.k();
    const std::size_t total = g.out_positions();
    const std::size_t chunk = std::max<std::size_t>(1, std::min(total, kIm2colBudget / k));
    std::vector<T> cols(k * chunk);
    std::vector<T> dcols(k * chunk);
    ConstRowMap<T> w(weight_.value.data(), out_, static_cast<Eigen::Index>(k));
    RowMap<T> dw(weight_.grad.data(), out_, static_cast<Eigen::Index>(k));
    for (int n = 0; n < x.batch(); ++n) {
      for (std::size_t q0 = 0; q0 < total; q0 += chunk) {
        const std::size_t cnt = std::min(chunk, total - q0);
        im2col(x.sample(n), g, q0, cnt, cols.data());
        ConstRowMap<T> c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cnt));
        ConstStridedMap<T> dyblk(dy.sample(n) + q0, out_, static_cast<Eigen::Index>(cnt),
                                 Eigen::OuterStride<>(static_cast<Eigen::Index>(total)));
        dw.noalias() += dyblk * c.transpose();
        RowMap<T> dc(dcols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cnt));
        dc.noalias() = w.transpose() * dyblk;
        col2im(dcols.data(), g, q0, cnt, dx.sample(n));
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------------------
// BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::string name, int channels)
    : channels_(channels),
      gamma_(name + ".weight", {channels}),
      beta_(name + ".bias", {channels}),
      running_mean_(name + ".running_mean", {channels}, false),
      running_var_(name + ".running_var", {channels}, false) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  std::fill(running_var_.value.begin(), running_var_.value.end(), T(1));
}

template <typename T>
void BatchNorm<T>::collect(ParameterList<T>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

template <typename T>
Tensor<T> BatchNorm<T>::infer(const Tensor<T>& x) const {
  if (x.channels() != channels_) throw ShapeMismatch(gamma_.name + ": channel mismatch");
  Tensor<T> y(x.dims);
  for (int c = 0; c < channels_; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_.value[c]) + kEps);
    const T scale = static_cast<T>(gamma_.value[c] * inv);
    const T shift = static_cast<T>(beta_.value[c] - running_mean_.value[c] * gamma_.value[c] * inv);
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel(n, c);
      T* q = y.channel(n, c);
      for (std::size_t i = 0; i < x.spatial(); ++i) q[i] = p[i] * scale + shift;
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x) {
  if (x.channels() != channels_) throw ShapeMismatch(gamma_.name + ": channel mismatch");
  Tensor<T> y(x.dims);
  xhat_ = Tensor<T>(x.dims);
  inv_std_.assign(static_cast<std::size_t>(channels_), T(0));
  const std::size_t m = x.spatial() * static_cast<std::size_t>(x.batch());
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel(n, c);
      for (std::size_t i = 0; i < x.spatial(); ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(m);
    double sq = 0.0;
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel(n, c);
      for (std::size_t i = 0; i < x.spatial(); ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = static_cast<T>(inv);
    for (int n = 0; n < x.batch(); ++n) {
      const T* p = x.channel(n, c);
      T* h = xhat_.channel(n, c);
      T* q = y.channel(n, c);
      for (std::size_t i = 0; i < x.spatial(); ++i) {
        h[i] = static_cast<T>((p[i] - mean) * inv);
        q[i] = gamma_.value[c] * h[i] + beta_.value[c];
      }
    }
    const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
    running_mean_.value[c] = static_cast<T>((1.0 - kMomentum) * running_mean_.value[c] + kMomentum * mean);
    running_var_.value[c] = static_cast<T>((1.0 - kMomentum) * running_var_.value[c] + kMomentum * unbiased);
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.dims);
  const auto m = static_cast<double>(dy.spatial() * static_cast<std::size_t>(dy.batch()));
  for (int c = 0; c < channels_; ++c) {
    double dgamma = 0.0;
    double dbeta = 0.0;
    for (int n = 0; n < dy.batch(); ++n) {
      const T* g = dy.channel(n, c);
      const T* h = xhat_.channel(n, c);
      for (std::size_t i = 0; i < dy.spatial(); ++i) {
        dgamma += static_cast<double>(g[i]) * h[i];
        dbeta += g[i];
      }
    }
    gamma_.grad[c] += static_cast<T>(dgamma);
    beta_.grad[c] += static_cast<T>(dbeta);
    const double k = static_cast<double>(gamma_.value[c]) * inv_std_[c] / m;
    for (int n = 0; n < dy.batch(); ++n) {
      const T* g = dy.channel(n, c);
      const T* h = xhat_.channel(n, c);
      T* d = dx.channel(n, c);
      for (std::size_t i = 0; i < dy.spatial(); ++i) {
        d[i] = static_cast<T>(k * (m * g[i] - dbeta - h[i] * dgamma));
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> ReLU<T>::infer(const Tensor<T>& x) const {
  Tensor<T> y(x.dims);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x) {
  cached_output_ = infer(x);
  return cached_output_;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.dims);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] = cached_output_.data[i] > T(0) ? dy.data[i] : T(0);
  return dx;
}

// ---------------------------------------------------------------------------------------
// MaxPool

template <typename T>
Dims MaxPool<T>::output_dims(const Dims& in) const {
  Dims out{in[0], in[1], 0, 0, 0};
  for (int a = 0; a < 3; ++a) out[2 + a] = (in[2 + a] + 2 * pad_[a] - kernel_[a]) / stride_[a] + 1;
  return out;
}

template <typename T>
Tensor<T> MaxPool<T>::run(const Tensor<T>& x, std::vector<std::size_t>* argmax) const {
  const Dims od = output_dims(x.dims);
  for (int a = 0; a < 3; ++a) {
    if (od[2 + a] < 1) throw ShapeMismatch("maxpool: input " + dims_string(x.dims) + " too small");
  }
  Tensor<T> y(od);
  if (argmax != nullptr) argmax->assign(y.size(), 0);
  const int d = x.dims[2], h = x.dims[3], w = x.dims[4];
  std::size_t o = 0;
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < x.channels(); ++c) {
      const T* p = x.channel(n, c);
      const std::size_t base = static_cast<std::size_t>(p - x.data.data());
      for (int oz = 0; oz < od[2]; ++oz)
        for (int oy = 0; oy < od[3]; ++oy)
          for (int ox = 0; ox < od[4]; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_i = 0;
            bool found = false;
            for (int kz = 0; kz < kernel_[0]; ++kz) {
              const int z = oz * stride_[0] - pad_[0] + kz;
              if (z < 0 || z >= d) continue;
              for (int ky = 0; ky < kernel_[1]; ++ky) {
                const int yy = oy * stride_[1] - pad_[1] + ky;
                if (yy < 0 || yy >= h) continue;
                for (int kx = 0; kx < kernel_[2]; ++kx) {
                  const int xx = ox * stride_[2] - pad_[2] + kx;
                  if (xx < 0 || xx >= w) continue;
                  const std::size_t i = (static_cast<std::size_t>(z) * h + yy) * w + xx;
                  if (!found || p[i] > best) {
                    best = p[i];
                    best_i = i;
                    found = true;
                  }
                }
              }
            }
            y.data[o] = best;
            if (argmax != nullptr) (*argmax)[o] = base + best_i;
          }
    }
  }
  return y;
}

template <typename T>
Tensor<T> MaxPool<T>::infer(const Tensor<T>& x) const {
  return run(x, nullptr);
}

template <typename T>
Tensor<T> MaxPool<T>::forward(const Tensor<T>& x) {
  input_dims_ = x.dims;
  return run(x, &argmax_);
}

template <typename T>
Tensor<T> MaxPool<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(input_dims_);
  for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax_[o]] += dy.data[o];
  return dx;
}

// ---------------------------------------------------------------------------------------
// UpConv

template <typename T>
UpConv<T>::UpConv(std::string name, int in_channels, int out_channels, Triple kernel)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      weight_(name + ".weight", {in_channels, out_channels, kernel[0], kernel[1], kernel[2]}),
      bias_(name + ".bias", {out_channels}) {}

template <typename T>
void UpConv<T>::init(Rng& rng) {
  he_normal(weight_.value, in_, rng);
  std::fill(bias_.value.begin(), bias_.value.end(), T(0));
}

template <typename T>
void UpConv<T>::collect(ParameterList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
Tensor<T> UpConv<T>::infer(const Tensor<T>& x) const {
  if (x.channels() != in_) throw ShapeMismatch(weight_.name + ": channel mismatch");
  const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
  const int taps = kd * kh * kw;
  const int d = x.dims[2], h = x.dims[3], w = x.dims[4];
  Tensor<T> y({x.batch(), out_, d * kd, h * kh, w * kw});
  const auto p = static_cast<Eigen::Index>(x.spatial());
  // W as (in x out*taps) row-major; taps vary fastest within an output channel.
  ConstRowMap<T> wm(weight_.value.data(), in_, static_cast<Eigen::Index>(out_) * taps);
  MatRM<T> cols(static_cast<Eigen::Index>(out_) * taps, p);
  for (int n = 0; n < x.batch(); ++n) {
    ConstRowMap<T> xm(x.sample(n), in_, p);
    cols.noalias() = wm.transpose() * xm;
    for (int co = 0; co < out_; ++co) {
      T* yc = y.channel(n, co);
      const T b = bias_.value[co];
      int t = 0;
      for (int tz = 0; tz < kd; ++tz)
        for (int ty = 0; ty < kh; ++ty)
          for (int tx = 0; tx < kw; ++tx, ++t) {
            const T* src = cols.data() + (static_cast<std::size_t>(co) * taps + t) * p;
            std::size_t q = 0;
            for (int z = 0; z < d; ++z)
              for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx, ++q) {
                  yc[(static_cast<std::size_t>(z * kd + tz) * (h * kh) + (yy * kh + ty)) * (w * kw) + (xx * kw + tx)] =
                      src[q] + b;
                }
          }
    }
  }
  return y;
}

template <typename T>
Tensor<T> UpConv<T>::forward(const Tensor<T>& x) {
  cached_input_ = x;
  return infer(x);
}

template <typename T>
Tensor<T> UpConv<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = cached_input_;
  const int kd = kernel_[0], kh = kernel_[1], kw = kernel_[2];
  const int taps = kd * kh * kw;
  const int d = x.dims[2], h = x.dims[3], w = x.dims[4];
  const auto p = static_cast<Eigen::Index>(x.spatial());
  Tensor<T> dx(x.dims);
  ConstRowMap<T> wm(weight_.value.data(), in_, static_cast<Eigen::Index>(out_) * taps);
  RowMap<T> dwm(weight_.grad.data(), in_, static_cast<Eigen::Index>(out_) * taps);
  MatRM<T> gcols(static_cast<Eigen::Index>(out_) * taps, p);
  for (int n = 0; n < x.batch(); ++n) {
    for (int co = 0; co < out_; ++co) {
      const T* gc = dy.channel(n, co);
      T bsum = T(0);
      int t = 0;
      for (int tz = 0; tz < kd; ++tz)
        for (int ty = 0; ty < kh; ++ty)
          for (int tx = 0; tx < kw; ++tx, ++t) {
            T* dst = gcols.data() + (static_cast<std::size_t>(co) * taps + t) * p;
            std::size_t q = 0;
            for (int z = 0; z < d; ++z)
              for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx, ++q) {
                  dst[q] =
                      gc[(static_cast<std::size_t>(z * kd + tz) * (h * kh) + (yy * kh + ty)) * (w * kw) + (xx * kw + tx)];
                  bsum += dst[q];
                }
          }
      bias_.grad[co] += bsum;
    }
    ConstRowMap<T> xm(x.sample(n), in_, p);
    dwm.noalias() += xm * gcols.transpose();
    RowMap<T> dxm(dx.sample(n), in_, p);
    dxm.noalias() = wm * gcols;
  }
  return dx;
}

// ---------------------------------------------------------------------------------------
// GlobalAvgPool

template <typename T>
Tensor<T> GlobalAvgPool<T>::infer(const Tensor<T>& x) const {
  Tensor<T> y({x.batch(), x.channels(), 1, 1, 1});
  const double inv = 1.0 / static_cast<double>(x.spatial());
  for (int n = 0; n < x.batch(); ++n)
    for (int c = 0; c < x.channels(); ++c) {
      const T* p = x.channel(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < x.spatial(); ++i) s += p[i];
      y.data[static_cast<std::size_t>(n) * x.channels() + c] = static_cast<T>(s * inv);
    }
  return y;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x) {
  input_dims_ = x.dims;
  return infer(x);
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx(input_dims_);
  const T inv = static_cast<T>(1.0 / static_cast<double>(dx.spatial()));
  for (int n = 0; n < dx.batch(); ++n)
    for (int c = 0; c < dx.channels(); ++c) {
      const T g = dy.data[static_cast<std::size_t>(n) * dx.channels() + c] * inv;
      T* p = dx.channel(n, c);
      std::fill(p, p + dx.spatial(), g);
    }
  return dx;
}

// ---------------------------------------------------------------------------------------
// Linear

template <typename T>
Linear<T>::Linear(std::string name, int in_features, int out_features)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", {out_features, in_features}),
      bias_(name + ".bias", {out_features}) {}

template <typename T>
void Linear<T>::init(Rng& rng) {
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) as in common framework defaults.
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, in_)));
  for (auto& v : weight_.value) v = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& v : bias_.value) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void Linear<T>::collect(ParameterList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
Tensor<T> Linear<T>::infer(const Tensor<T>& x) const {
  if (static_cast<int>(x.sample_size()) != in_) throw ShapeMismatch(weight_.name + ": feature size mismatch");
  Tensor<T> y({x.batch(), out_, 1, 1, 1});
  ConstRowMap<T> w(weight_.value.data(), out_, in_);
  ConstRowMap<T> xm(x.data.data(), x.batch(), in_);
  RowMap<T> ym(y.data.data(), x.batch(), out_);
  ym.noalias() = xm * w.transpose();
  for (int n = 0; n < x.batch(); ++n)
    for (int o = 0; o < out_; ++o) ym(n, o) += bias_.value[o];
  return y;
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) {
  cached_input_ = x;
  return infer(x);
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy) {
  const Tensor<T>& x = cached_input_;
  Tensor<T> dx(x.dims);
  ConstRowMap<T> w(weight_.value.data(), out_, in_);
  ConstRowMap<T> xm(x.data.data(), x.batch(), in_);
  ConstRowMap<T> g(dy.data.data(), x.batch(), out_);
  RowMap<T> dw(weight_.grad.data(), out_, in_);
  dw.noalias() += g.transpose() * xm;
  for (int n = 0; n < x.batch(); ++n)
    for (int o = 0; o < out_; ++o) bias_.grad[o] += g(n, o);
  RowMap<T> dxm(dx.data.data(), x.batch(), in_);
  dxm.noalias() = g * w;
  return dx;
}

#define LUNGTRIAGE_INSTANTIATE(T)                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                 \
  template void split_channels(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);            \
  template class Conv<T>;                                                                 \
  template class BatchNorm<T>;                                                            \
  template class ReLU<T>;                                                                 \
  template class MaxPool<T>;                                                              \
  template class UpConv<T>;                                                               \
  template class GlobalAvgPool<T>;                                                        \
  template class Linear<T>;

LUNGTRIAGE_INSTANTIATE(float)
LUNGTRIAGE_INSTANTIATE(double)

#undef LUNGTRIAGE_INSTANTIATE

}  // namespace lungtriage::nn
