#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace mecca {

/// Extents of a dense volume, z-major: flat index of (z, y, x) is
/// (z * height + y) * width + x.
struct Shape3 {
  int depth = 1;
  int height = 1;
  int width = 1;

  std::size_t voxels() const {
    return static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(height) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x);
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && z < depth && y >= 0 && y < height && x >= 0 && x < width;
  }
  bool valid() const;
  /// Throws kValidation unless every extent is positive and the voxel count fits.
  void validate() const;

  std::string str() const;

  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Dense 32-bit real field. The same type carries the image, probability map,
/// hint map and confidence map.
class Volume {
 public:
  Volume() = default;
  explicit Volume(Shape3 shape, float fill = 0.0f);
  Volume(Shape3 shape, std::vector<float> data);

  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(int z, int y, int x) { return data_[shape_.index(z, y, x)]; }
  float at(int z, int y, int x) const { return data_[shape_.index(z, y, x)]; }

  bool all_finite() const;
  double mean() const;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  Shape3 shape_;
  std::vector<float> data_;
};

/// Volume of exact {0, 1} values.
class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Shape3 shape, std::uint8_t fill = 0);
  BinaryMask(Shape3 shape, std::vector<std::uint8_t> data);

  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<std::uint8_t> data() { return data_; }
  std::span<const std::uint8_t> data() const { return data_; }

  std::uint8_t& operator[](std::size_t i) { return data_[i]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  std::uint8_t& at(int z, int y, int x) { return data_[shape_.index(z, y, x)]; }
  std::uint8_t at(int z, int y, int x) const { return data_[shape_.index(z, y, x)]; }

  std::size_t count() const;

  Volume to_volume() const;
  /// Throws kValidation when any value is not exactly 0 or 1.
  static BinaryMask from_volume(const Volume& v);

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  Shape3 shape_;
  std::vector<std::uint8_t> data_;
};

struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  static Tensor zeros(std::vector<int> shape);
  std::size_t numel() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Name-ordered tensor container used for parameters, gradients and
/// optimizer moments.
class NamedTensorSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  /// Same names and shapes, all zero.
  NamedTensorSet zeros_like() const;
  void set_zero();
  bool same_layout(const NamedTensorSet& other) const;

  friend bool operator==(const NamedTensorSet&, const NamedTensorSet&) = default;

 private:
  Map entries_;
};

void require_same_shape(const Shape3& a, const Shape3& b, const char* what);

/// Clamp every element into [lo, hi].
Volume elementwise_clip(const Volume& v, float lo, float hi);

}  // namespace mecca
