#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lungtriage {

/// Study-level diagnosis. Numeric values double as classifier output indices.
enum class ClassLabel : std::uint8_t { Covid = 0, Pneumonia = 1, Normal = 2 };

inline constexpr int kNumClasses = 3;

/// Labelling scheme of a dataset or a segmentation mask.
///   Classification3: study labels only.
///   Seg2: 0 background, 1 lesion.
///   Seg4: 0 background, 1 left lung, 2 right lung, 3 lesion.
enum class Scheme : std::uint8_t { Classification3, Seg2, Seg4 };

enum class SplitRole : std::uint8_t { Train, Validation, Test };

enum class Axis : std::uint8_t { X = 0, Y = 1, Z = 2 };

std::string_view to_string(ClassLabel label);
std::string_view to_string(Scheme scheme);
std::string_view to_string(SplitRole role);
std::string_view to_string(Axis axis);

// Parsers accept the canonical spelling case-insensitively; "inference" is an
// accepted alias of the test role.
std::optional<ClassLabel> parse_class_label(std::string_view text);
std::optional<Scheme> parse_scheme(std::string_view text);
std::optional<SplitRole> parse_split_role(std::string_view text);
std::optional<Axis> parse_axis(std::string_view text);

/// Number of label ids of a segmentation scheme (2 or 4). Throws for Classification3.
int label_count(Scheme scheme);

/// Label id carrying the lesion class in a segmentation scheme.
std::uint8_t lesion_label(Scheme scheme);

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Index outside a valid range (slice indices, voxel coordinates).
class OutOfRange : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

using Shape3 = std::array<int, 3>;

inline std::size_t voxel_count(const Shape3& s) {
  return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]) *
         static_cast<std::size_t>(s[2]);
}

std::string shape_string(const Shape3& s);

}  // namespace lungtriage
