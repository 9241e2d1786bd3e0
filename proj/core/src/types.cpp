#include "lungtriage/types.hpp"

#include <algorithm>
#include <cctype>

namespace lungtriage {

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

std::string_view to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::Covid: return "COVID";
    case ClassLabel::Pneumonia: return "Pneumonia";
    case ClassLabel::Normal: return "Normal";
  }
  return "?";
}

std::string_view to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::Classification3: return "classification3";
    case Scheme::Seg2: return "seg2";
    case Scheme::Seg4: return "seg4";
  }
  return "?";
}

std::string_view to_string(SplitRole role) {
  switch (role) {
    case SplitRole::Train: return "train";
    case SplitRole::Validation: return "validation";
    case SplitRole::Test: return "test";
  }
  return "?";
}

std::string_view to_string(Axis axis) {
  switch (axis) {
    case Axis::X: return "x";
    case Axis::Y: return "y";
    case Axis::Z: return "z";
  }
  return "?";
}

std::optional<ClassLabel> parse_class_label(std::string_view text) {
  const auto t = lower(text);
  if (t == "covid") return ClassLabel::Covid;
  if (t == "pneumonia") return ClassLabel::Pneumonia;
  if (t == "normal") return ClassLabel::Normal;
  return std::nullopt;
}

std::optional<Scheme> parse_scheme(std::string_view text) {
  const auto t = lower(text);
  if (t == "classification3" || t == "classify3") return Scheme::Classification3;
  if (t == "seg2") return Scheme::Seg2;
  if (t == "seg4") return Scheme::Seg4;
  return std::nullopt;
}

std::optional<SplitRole> parse_split_role(std::string_view text) {
  const auto t = lower(text);
  if (t == "train") return SplitRole::Train;
  if (t == "validation" || t == "val") return SplitRole::Validation;
  if (t == "test" || t == "inference") return SplitRole::Test;
  return std::nullopt;
}

std::optional<Axis> parse_axis(std::string_view text) {
  const auto t = lower(text);
  if (t == "x") return Axis::X;
  if (t == "y") return Axis::Y;
  if (t == "z") return Axis::Z;
  return std::nullopt;
}

int label_count(Scheme scheme) {
  switch (scheme) {
    case Scheme::Seg2: return 2;
    case Scheme::Seg4: return 4;
    case Scheme::Classification3: break;
  }
  throw InvalidArgument("classification3 is not a segmentation scheme");
}

std::uint8_t lesion_label(Scheme scheme) {
  return static_cast<std::uint8_t>(label_count(scheme) - 1);
}

std::string shape_string(const Shape3& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

}  // namespace lungtriage
