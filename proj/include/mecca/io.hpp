#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mecca/volume.hpp"

namespace mecca {

// Volume file pair: <stem>.json header + <stem>.raw payload of little-endian
// f32 values in z-major order. `path` may name either file or the bare stem.

struct VolumeFile {
  Volume volume;
  std::string role;
};

VolumeFile read_volume_file(const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);
/// Rejects non-finite values (kValidation) before touching the filesystem.
void write_volume(const Volume& v, const std::filesystem::path& path,
                  const std::string& role = "image");

BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const BinaryMask& m, const std::filesystem::path& path);

std::filesystem::path header_path(const std::filesystem::path& path);
std::filesystem::path payload_path(const std::filesystem::path& path);

/// Single-file checkpoint: 8-byte magic "MECCAck1", u64 little-endian manifest
/// length, JSON manifest {"meta": ..., "tensors": [{name, shape, offset,
/// count}]}, then the concatenated little-endian f32 payloads. Offsets are
/// byte offsets relative to the start of the payload block.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  NamedTensorSet tensors;
};

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mecca
