#include "mecca/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mecca/error.hpp"

namespace mecca {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'E', 'C', 'C', 'A', 'c', 'k', '1'};

fs::path stem_of(const fs::path& path) {
  fs::path p = path;
  if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
  return p;
}

void to_little_endian(std::vector<float>& values) {
  if constexpr (std::endian::native == std::endian::big) {
    for (float& v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = (bits >> 24) | ((bits >> 8) & 0xff00u) | ((bits << 8) & 0xff0000u) | (bits << 24);
      v = std::bit_cast<float>(bits);
    }
  }
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_floats(std::ostream& out, std::vector<float> values) {
  to_little_endian(values);
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
}

std::vector<float> decode_floats(const char* bytes, std::size_t count) {
  std::vector<float> values(count);
  std::memcpy(values.data(), bytes, count * sizeof(float));
  to_little_endian(values);
  return values;
}

Shape3 parse_shape_header(const json& header, const fs::path& path) {
  if (!header.is_object() || !header.contains("shape") || !header["shape"].is_array() ||
      header["shape"].size() != 3) {
    fail(ErrorKind::kMalformedHeader, path.string() + ": header needs a 3-element shape");
  }
  for (const auto& e : header["shape"]) {
    if (!e.is_number_integer() || e.get<long long>() < 1 || e.get<long long>() > (1LL << 30)) {
      fail(ErrorKind::kMalformedHeader, path.string() + ": shape entries must be positive integers");
    }
  }
  if (header.contains("dtype") && header["dtype"] != "f32") {
    fail(ErrorKind::kMalformedHeader, path.string() + ": dtype must be f32");
  }
  if (header.contains("order") && header["order"] != "zyx") {
    fail(ErrorKind::kMalformedHeader, path.string() + ": order must be zyx");
  }
  Shape3 shape{header["shape"][0].get<int>(), header["shape"][1].get<int>(),
               header["shape"][2].get<int>()};
  if (!shape.valid()) fail(ErrorKind::kMalformedHeader, path.string() + ": shape too large");
  return shape;
}

}  // namespace

fs::path header_path(const fs::path& path) {
  fs::path p = stem_of(path);
  p += ".json";
  return p;
}

fs::path payload_path(const fs::path& path) {
  fs::path p = stem_of(path);
  p += ".raw";
  return p;
}

VolumeFile read_volume_file(const fs::path& path) {
  const fs::path hdr = header_path(path);
  const fs::path raw = payload_path(path);
  if (!fs::exists(hdr)) fail(ErrorKind::kMissingFile, "missing header " + hdr.string());
  if (!fs::exists(raw)) fail(ErrorKind::kMissingFile, "missing payload " + raw.string());

  json header;
  try {
    header = json::parse(read_all(hdr));
  } catch (const json::exception& e) {
    fail(ErrorKind::kMalformedHeader, hdr.string() + ": " + e.what());
  }
  const Shape3 shape = parse_shape_header(header, hdr);
  std::string role = header.value("role", std::string("image"));

  const std::string bytes = read_all(raw);
  if (bytes.size() != shape.voxels() * sizeof(float)) {
    fail(ErrorKind::kPayloadMismatch, raw.string() + ": expected " +
                                          std::to_string(shape.voxels() * sizeof(float)) +
                                          " bytes, found " + std::to_string(bytes.size()));
  }
  return {Volume(shape, decode_floats(bytes.data(), shape.voxels())), std::move(role)};
}

Volume read_volume(const fs::path& path) { return read_volume_file(path).volume; }

void write_volume(const Volume& v, const fs::path& path, const std::string& role) {
  if (!v.all_finite()) fail(ErrorKind::kValidation, "refusing to write a non-finite volume");
  const Shape3& s = v.shape();
  const json header = {{"shape", {s.depth, s.height, s.width}},
                       {"dtype", "f32"},
                       {"order", "zyx"},
                       {"role", role}};
  const fs::path hdr = header_path(path);
  if (hdr.has_parent_path()) fs::create_directories(hdr.parent_path());
  {
    std::ofstream out(hdr);
    if (!out) fail(ErrorKind::kIo, "cannot write " + hdr.string());
    out << header.dump() << "\n";
    if (!out) fail(ErrorKind::kIo, "write failed for " + hdr.string());
  }
  const fs::path raw = payload_path(path);
  std::ofstream out(raw, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write " + raw.string());
  write_floats(out, v.values());
  if (!out) fail(ErrorKind::kIo, "write failed for " + raw.string());
}

BinaryMask read_mask(const fs::path& path) { return BinaryMask::from_volume(read_volume(path)); }

void write_mask(const BinaryMask& m, const fs::path& path) { write_volume(m.to_volume(), path, "mask"); }

void write_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size() * sizeof(float);
  }
  const std::string manifest = json{{"meta", ckpt.meta}, {"tensors", entries}}.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    std::uint64_t length = manifest.size();
    unsigned char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((length >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(len_bytes), 8);
    out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    for (const auto& [_, t] : ckpt.tensors) write_floats(out, t.data);
    if (!out) fail(ErrorKind::kIo, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::kMissingFile, "missing checkpoint " + path.string());
  const std::string bytes = read_all(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    fail(ErrorKind::kMalformedHeader, path.string() + ": not a checkpoint file");
  }
  std::uint64_t length = 0;
  for (int i = 0; i < 8; ++i) {
    length |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  }
  if (length > bytes.size() - 16) fail(ErrorKind::kMalformedHeader, path.string() + ": truncated manifest");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, length));
  } catch (const json::exception& e) {
    fail(ErrorKind::kMalformedHeader, path.string() + ": " + e.what());
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    fail(ErrorKind::kMalformedHeader, path.string() + ": manifest lacks tensors");
  }

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", json::object());
  const std::size_t payload_start = 16 + length;
  const std::size_t payload_size = bytes.size() - payload_start;
  std::size_t expected = 0;
  for (const auto& entry : manifest["tensors"]) {
    Tensor t;
    try {
      t.shape = entry.at("shape").get<std::vector<int>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = entry.at("count").get<std::uint64_t>();
      if (count != t.numel() || offset + count * sizeof(float) > payload_size) {
        fail(ErrorKind::kPayloadMismatch, path.string() + ": tensor " +
                                              entry.at("name").get<std::string>() +
                                              " does not fit the payload");
      }
      t.data = decode_floats(bytes.data() + payload_start + offset, count);
      expected += count * sizeof(float);
      ckpt.tensors.insert(entry.at("name").get<std::string>(), std::move(t));
    } catch (const json::exception& e) {
      fail(ErrorKind::kMalformedHeader, path.string() + ": " + e.what());
    }
  }
  if (expected != payload_size) fail(ErrorKind::kPayloadMismatch, path.string() + ": trailing bytes");
  return ckpt;
}

}  // namespace mecca
