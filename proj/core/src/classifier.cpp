#include "lungtriage/classifier.hpp"

#include <cmath>
#include <string>

namespace lungtriage {

void ClassifierConfig::validate() const {
  if (num_classes != kNumClasses) throw InvalidArgument("classifier must have 3 classes");
  if (width < 1) throw InvalidArgument("classifier width must be >= 1");
  for (int b : stage_block_counts) {
    if (b < 1) throw InvalidArgument("every stage needs at least one block");
  }
  if (input_size < 32 || input_size % 32 != 0) throw InvalidArgument("input_size must be a positive multiple of 32");
}

int ClassifierConfig::conv_layer_count() const {
  int blocks = 0;
  for (int b : stage_block_counts) blocks += b;
  return 1 + 3 * blocks;
}

ClassLabel ClassProbabilities::argmax() const {
  int best = 0;
  for (int k = 1; k < kNumClasses; ++k) {
    if (p[k] > p[best]) best = k;
  }
  return static_cast<ClassLabel>(best);
}

namespace nn {

namespace {

Triple k2(int k) { return {1, k, k}; }

}  // namespace

template <typename T>
struct Bottleneck {
  Conv<T> c1, c2, c3;
  BatchNorm<T> b1, b2, b3;
  ReLU<T> r1, r2, r3;
  bool project = false;
  Conv<T> proj;
  BatchNorm<T> proj_bn;

  Bottleneck(const std::string& name, int in, int planes, int stride, bool projection)
      : c1(name + ".conv1", in, planes, k2(1), k2(1), {0, 0, 0}, false),
        c2(name + ".conv2", planes, planes, k2(3), {1, stride, stride}, {0, 1, 1}, false),
        c3(name + ".conv3", planes, planes * 4, k2(1), k2(1), {0, 0, 0}, false),
        b1(name + ".bn1", planes),
        b2(name + ".bn2", planes),
        b3(name + ".bn3", planes * 4),
        project(projection) {
    if (project) {
      proj = Conv<T>(name + ".downsample.0", in, planes * 4, k2(1), {1, stride, stride}, {0, 0, 0}, false);
      proj_bn = BatchNorm<T>(name + ".downsample.1", planes * 4);
    }
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    Tensor<T> h = r1.infer(b1.infer(c1.infer(x)));
    h = r2.infer(b2.infer(c2.infer(h)));
    h = b3.infer(c3.infer(h));
    const Tensor<T> s = project ? proj_bn.infer(proj.infer(x)) : x;
    return r3.infer(add(h, s));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = r1.forward(b1.forward(c1.forward(x)));
    h = r2.forward(b2.forward(c2.forward(h)));
    h = b3.forward(c3.forward(h));
    const Tensor<T> s = project ? proj_bn.forward(proj.forward(x)) : x;
    return r3.forward(add(h, s));
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T> g = r3.backward(dy);
    Tensor<T> dx = c1.backward(b1.backward(r1.backward(c2.backward(b2.backward(r2.backward(c3.backward(b3.backward(g))))))));
    const Tensor<T> ds = project ? proj.backward(proj_bn.backward(g)) : g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
  }

  void init(Rng& rng) {
    c1.init(rng);
    c2.init(rng);
    c3.init(rng);
    if (project) proj.init(rng);
  }

  void collect(ParameterList<T>& out) {
    c1.collect(out);
    b1.collect(out);
    c2.collect(out);
    b2.collect(out);
    c3.collect(out);
    b3.collect(out);
    if (project) {
      proj.collect(out);
      proj_bn.collect(out);
    }
  }
};

template <typename T>
struct ResNet50<T>::Impl {
  Conv<T> stem;
  BatchNorm<T> stem_bn;
  ReLU<T> stem_relu;
  MaxPool<T> pool{k2(3), {1, 2, 2}, {0, 1, 1}};
  std::vector<Bottleneck<T>> blocks;
  GlobalAvgPool<T> gap;
  Linear<T> fc;

  Tensor<T> features(const Tensor<T>& x) const {
    Tensor<T> h = pool.infer(stem_relu.infer(stem_bn.infer(stem.infer(x))));
    for (const auto& b : blocks) h = b.infer(h);
    return h;
  }
};

template <typename T>
ResNet50<T>::ResNet50(const ClassifierConfig& config) : config_(config), impl_(std::make_unique<Impl>()) {
  config_.validate();
  const int w = config_.width;
  impl_->stem = Conv<T>("conv1", 3, w, k2(7), {1, 2, 2}, {0, 3, 3}, false);
  impl_->stem_bn = BatchNorm<T>("bn1", w);
  int in = w;
  for (int s = 0; s < 4; ++s) {
    const int planes = w << s;
    for (int b = 0; b < config_.stage_block_counts[s]; ++b) {
      const std::string name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      impl_->blocks.emplace_back(name, in, planes, stride, b == 0);
      in = planes * 4;
    }
  }
  impl_->fc = Linear<T>("fc", in, config_.num_classes);

  Rng rng(mix64(config_.seed ^ 0x5245534E4554ULL));
  impl_->stem.init(rng);
  for (auto& b : impl_->blocks) b.init(rng);
  impl_->fc.init(rng);
}

template <typename T>
ResNet50<T>::~ResNet50() = default;
template <typename T>
ResNet50<T>::ResNet50(ResNet50&&) noexcept = default;
template <typename T>
ResNet50<T>& ResNet50<T>::operator=(ResNet50&&) noexcept = default;

template <typename T>
Tensor<T> ResNet50<T>::infer_features(const Tensor<T>& x) const {
  if (x.channels() != 3 || x.depth() != 1) throw ShapeMismatch("classifier expects (N, 3, 1, H, W), got " + dims_string(x.dims));
  return impl_->features(x);
}

template <typename T>
Tensor<T> ResNet50<T>::infer(const Tensor<T>& x) const {
  return impl_->fc.infer(impl_->gap.infer(infer_features(x)));
}

template <typename T>
Tensor<T> ResNet50<T>::forward(const Tensor<T>& x) {
  if (x.channels() != 3 || x.depth() != 1) throw ShapeMismatch("classifier expects (N, 3, 1, H, W), got " + dims_string(x.dims));
  auto& m = *impl_;
  Tensor<T> h = m.pool.forward(m.stem_relu.forward(m.stem_bn.forward(m.stem.forward(x))));
  for (auto& b : m.blocks) h = b.forward(h);
  return m.fc.forward(m.gap.forward(h));
}

template <typename T>
void ResNet50<T>::backward(const Tensor<T>& dlogits) {
  auto& m = *impl_;
  Tensor<T> g = m.gap.backward(m.fc.backward(dlogits));
  for (auto it = m.blocks.rbegin(); it != m.blocks.rend(); ++it) g = it->backward(g);
  m.stem.backward(m.stem_bn.backward(m.stem_relu.backward(m.pool.backward(g))));
}

template <typename T>
ParameterList<T> ResNet50<T>::parameters() {
  ParameterList<T> out;
  impl_->stem.collect(out);
  impl_->stem_bn.collect(out);
  for (auto& b : impl_->blocks) b.collect(out);
  impl_->fc.collect(out);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ResNet50<T>::parameters() const {
  auto list = const_cast<ResNet50*>(this)->parameters();
  return {list.begin(), list.end()};
}

template <typename T>
int ResNet50<T>::conv_layer_count() const {
  return 1 + 3 * static_cast<int>(impl_->blocks.size());
}

template <typename T>
int ResNet50<T>::projection_conv_count() const {
  int n = 0;
  for (const auto& b : impl_->blocks) n += b.project ? 1 : 0;
  return n;
}

template <typename T>
std::vector<int> ResNet50<T>::stage_block_counts() const {
  return {config_.stage_block_counts.begin(), config_.stage_block_counts.end()};
}

template <typename T>
std::array<int, 3> ResNet50<T>::feature_shape(int input_size) const {
  Dims d{1, 3, 1, input_size, input_size};
  d = impl_->stem.output_dims(d);
  d = impl_->pool.output_dims(d);
  for (const auto& b : impl_->blocks) {
    d = b.c2.output_dims(b.c1.output_dims(d));
    d = b.c3.output_dims(d);
  }
  return {d[1], d[3], d[4]};
}

template class ResNet50<float>;
template class ResNet50<double>;

}  // namespace nn

nn::Tensor<float> slice_to_tensor(const SliceImage2D& image) {
  nn::Tensor<float> t({1, image.channels, 1, image.height, image.width});
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < image.channels; ++c) t.data[c * plane + i] = image.pixels[i * image.channels + c];
  return t;
}

ClassProbabilities probabilities_from_logits(const float* logits, int count) {
  if (count != kNumClasses) throw ShapeMismatch("expected 3 logits");
  double m = logits[0];
  for (int k = 1; k < count; ++k) m = std::max(m, static_cast<double>(logits[k]));
  ClassProbabilities out;
  double z = 0.0;
  for (int k = 0; k < count; ++k) {
    out.p[k] = std::exp(static_cast<double>(logits[k]) - m);
    z += out.p[k];
  }
  for (auto& v : out.p) v /= z;
  return out;
}

ClassProbabilities classify_slice(const ClassifierModel& model, const SliceImage2D& slice) {
  const int s = model.config().input_size;
  if (slice.height != s || slice.width != s || slice.channels != 3) {
    throw ShapeMismatch("classifier input must be " + std::to_string(s) + "x" + std::to_string(s) + "x3, got " +
                        std::to_string(slice.height) + "x" + std::to_string(slice.width) + "x" +
                        std::to_string(slice.channels));
  }
  const auto logits = model.infer(slice_to_tensor(slice));
  return probabilities_from_logits(logits.data.data(), kNumClasses);
}

ClassProbabilities aggregate_probabilities(const std::vector<ClassProbabilities>& slices) {
  if (slices.empty()) throw InvalidArgument("cannot aggregate zero slices");
  ClassProbabilities out;
  for (const auto& s : slices)
    for (int k = 0; k < kNumClasses; ++k) out.p[k] += s.p[k];
  for (auto& v : out.p) v /= static_cast<double>(slices.size());
  return out;
}

VolumeClassification classify_volume(const ClassifierModel& model, const Volume3D& volume,
                                     const IntensityWindow& window) {
  if (volume.size() == 0) throw InvalidArgument("cannot classify an empty volume");
  const Volume3D norm = normalize_intensity(volume, window);
  VolumeClassification out;
  for (int z = 0; z < volume.shape()[2]; ++z) {
    const auto input = prepare_classifier_input(extract_slice(norm, Axis::Z, z), model.config().input_size);
    out.per_slice.push_back(classify_slice(model, input));
  }
  out.probabilities = aggregate_probabilities(out.per_slice);
  out.predicted = out.probabilities.argmax();
  return out;
}

}  // namespace lungtriage
