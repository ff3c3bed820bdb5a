#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mecca/rng.hpp"
#include "mecca/volume.hpp"

namespace mecca {

struct Ellipsoid {
  std::array<double, 3> center{};  // z, y, x in voxel coordinates
  std::array<double, 3> radii{};
};

struct SynthSpec {
  Shape3 shape{16, 32, 32};
  std::uint64_t seed = 0;
  int blob_count = 2;
  double boundary_noise_amp = 1.5;  // voxels
  double intensity_noise_sd = 0.35;
  double foreground_contrast = 1.0;
  /// Background structures with foreground-like intensity that are not part
  /// of the label; they make intensity alone insufficient.
  int distractor_count = 1;
  /// When set, replaces the random blobs (and disables distractors).
  std::vector<Ellipsoid> ellipsoids;

  void validate() const;
};

struct Sample {
  Volume image;
  std::optional<BinaryMask> label;
  std::string id;
};

/// Deterministic in the spec.
Sample generate(const SynthSpec& spec);

/// Crops the label's bounding box, grown per face by a uniform integer in
/// [extension_lo, extension_hi] and clamped to the volume, then resizes to
/// `target` (trilinear image, nearest label) and z-scores the image.
Sample crop_and_resize(const Sample& s, Shape3 target, int extension_lo, int extension_hi, Rng& rng);

/// Resampling of a sub-box [lo, hi] (inclusive) to `target`. Half-voxel
/// aligned, so equal extents reproduce the input exactly.
Volume resize_trilinear(const Volume& v, std::array<int, 3> lo, std::array<int, 3> hi, Shape3 target);
BinaryMask resize_nearest(const BinaryMask& m, std::array<int, 3> lo, std::array<int, 3> hi, Shape3 target);

/// Zero mean, unit variance (mean removal only when the volume is constant).
Volume zscore(const Volume& v);

/// axis 0 = z, 1 = y, 2 = x.
Volume flip(const Volume& v, int axis);
BinaryMask flip(const BinaryMask& m, int axis);
/// Quarter turns in the y-x plane; odd turns require height == width.
Volume rotate90(const Volume& v, int turns);
BinaryMask rotate90(const BinaryMask& m, int turns);

/// Random flips on each axis and a random in-plane quarter turn (odd turns
/// only for square slices), applied identically to image and label.
Sample augment(const Sample& s, Rng& rng);

struct ManifestEntry {
  std::string id;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> label_path;
};

/// Relative paths resolve against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
Sample load_sample(const ManifestEntry& entry);

struct GenDataOptions {
  int count = 40;
  Shape3 shape{16, 32, 32};
  std::uint64_t seed = 7;
  int extension_lo = 1;
  int extension_hi = 11;
};

/// Writes `count` preprocessed samples and manifest.json into `dir`. Each
/// sample is generated at 1.5x the target extents and cropped/resized to
/// the target. Returns the manifest path.
std::filesystem::path generate_dataset(const GenDataOptions& opts, const std::filesystem::path& dir);

}  // namespace mecca
