#include "mecca/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mecca/error.hpp"

namespace mecca {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingFile: return "missing_file";
    case ErrorKind::kMalformedHeader: return "malformed_header";
    case ErrorKind::kPayloadMismatch: return "payload_mismatch";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kNotFound: return "not_found";
    case ErrorKind::kConflict: return "conflict";
  }
  return "unknown";
}

bool Shape3::valid() const {
  if (depth < 1 || height < 1 || width < 1) return false;
  const auto max = std::numeric_limits<std::size_t>::max();
  const auto d = static_cast<std::size_t>(depth);
  const auto h = static_cast<std::size_t>(height);
  const auto w = static_cast<std::size_t>(width);
  if (h > max / d) return false;
  return w <= max / (d * h);
}

void Shape3::validate() const {
  if (!valid()) fail(ErrorKind::kValidation, "invalid shape " + str());
}

std::string Shape3::str() const {
  std::ostringstream out;
  out << "(" << depth << "," << height << "," << width << ")";
  return out.str();
}

Volume::Volume(Shape3 shape, float fill) : shape_(shape) {
  shape_.validate();
  data_.assign(shape_.voxels(), fill);
}

Volume::Volume(Shape3 shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
  shape_.validate();
  if (data_.size() != shape_.voxels()) {
    fail(ErrorKind::kShapeMismatch, "volume data length does not match shape " + shape_.str());
  }
}

bool Volume::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

double Volume::mean() const {
  if (data_.empty()) return 0.0;
  double sum = 0.0;
  for (float v : data_) sum += v;
  return sum / static_cast<double>(data_.size());
}

BinaryMask::BinaryMask(Shape3 shape, std::uint8_t fill) : shape_(shape) {
  shape_.validate();
  if (fill > 1) fail(ErrorKind::kValidation, "mask fill must be 0 or 1");
  data_.assign(shape_.voxels(), fill);
}

BinaryMask::BinaryMask(Shape3 shape, std::vector<std::uint8_t> data)
    : shape_(shape), data_(std::move(data)) {
  shape_.validate();
  if (data_.size() != shape_.voxels()) {
    fail(ErrorKind::kShapeMismatch, "mask data length does not match shape " + shape_.str());
  }
  if (std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v > 1; })) {
    fail(ErrorKind::kValidation, "mask values must be 0 or 1");
  }
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

Volume BinaryMask::to_volume() const {
  std::vector<float> values(data_.size());
  std::transform(data_.begin(), data_.end(), values.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v); });
  return Volume(shape_, std::move(values));
}

BinaryMask BinaryMask::from_volume(const Volume& v) {
  std::vector<std::uint8_t> bits(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == 0.0f) {
      bits[i] = 0;
    } else if (v[i] == 1.0f) {
      bits[i] = 1;
    } else {
      fail(ErrorKind::kValidation, "mask volume holds a value other than 0 or 1");
    }
  }
  return BinaryMask(v.shape(), std::move(bits));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(t.numel(), 0.0f);
  return t;
}

std::size_t Tensor::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int e) { return acc * static_cast<std::size_t>(e); });
}

void NamedTensorSet::insert(const std::string& name, Tensor tensor) {
  if (entries_.count(name) != 0) fail(ErrorKind::kValidation, "duplicate tensor name " + name);
  for (int e : tensor.shape) {
    if (e < 1) fail(ErrorKind::kValidation, "tensor " + name + " has a non-positive extent");
  }
  if (tensor.data.size() != tensor.numel()) {
    fail(ErrorKind::kShapeMismatch, "tensor " + name + " data length does not match its shape");
  }
  entries_.emplace(name, std::move(tensor));
}

Tensor& NamedTensorSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::kNotFound, "no tensor named " + name);
  return it->second;
}

const Tensor& NamedTensorSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::kNotFound, "no tensor named " + name);
  return it->second;
}

std::size_t NamedTensorSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.data.size();
  return n;
}

NamedTensorSet NamedTensorSet::zeros_like() const {
  NamedTensorSet out;
  for (const auto& [name, t] : entries_) out.entries_.emplace(name, Tensor::zeros(t.shape));
  return out;
}

void NamedTensorSet::set_zero() {
  for (auto& [_, t] : entries_) std::fill(t.data.begin(), t.data.end(), 0.0f);
}

bool NamedTensorSet::same_layout(const NamedTensorSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape != b->second.shape) return false;
  }
  return true;
}

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  if (a != b) {
    fail(ErrorKind::kShapeMismatch, std::string(what) + ": shape " + a.str() + " vs " + b.str());
  }
}

Volume elementwise_clip(const Volume& v, float lo, float hi) {
  if (!(lo <= hi)) fail(ErrorKind::kInvalidArgument, "elementwise_clip: lo > hi");
  Volume out = v;
  for (float& x : out.values()) x = std::clamp(x, lo, hi);
  return out;
}

}  // namespace mecca
