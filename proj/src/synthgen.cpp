#include "mecca/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "mecca/error.hpp"
#include "mecca/io.hpp"

namespace mecca {

void SynthSpec::validate() const {
  shape.validate();
  if (!(intensity_noise_sd >= 0.0) || !(boundary_noise_amp >= 0.0)) {
    fail(ErrorKind::kValidation, "synth noise parameters must be non-negative");
  }
  if (!std::isfinite(foreground_contrast)) fail(ErrorKind::kValidation, "synth contrast must be finite");
  if (distractor_count < 0) fail(ErrorKind::kValidation, "synth distractor count must be non-negative");
  if (ellipsoids.empty()) {
    if (blob_count < 1 || blob_count > 8) fail(ErrorKind::kValidation, "synth blob_count must be in [1, 8]");
    if (shape.depth < 4 || shape.height < 4 || shape.width < 4) {
      fail(ErrorKind::kValidation, "synth shape must be at least 4 voxels per axis");
    }
  }
  const std::array<int, 3> dims{shape.depth, shape.height, shape.width};
  for (const Ellipsoid& e : ellipsoids) {
    for (int a = 0; a < 3; ++a) {
      if (!(e.radii[a] > 0.0)) fail(ErrorKind::kValidation, "ellipsoid radii must be positive");
      if (2.0 * e.radii[a] > dims[a]) fail(ErrorKind::kValidation, "ellipsoid larger than the volume");
    }
  }
}

namespace {

struct Blob {
  Ellipsoid shape;
  // Smooth radial deformation: sum of plane waves.
  std::vector<std::array<double, 5>> waves;  // wz, wy, wx, phase, unused
  double amp = 0.0;

  bool contains(double z, double y, double x) const {
    const double dz = (z - shape.center[0]) / shape.radii[0];
    const double dy = (y - shape.center[1]) / shape.radii[1];
    const double dx = (x - shape.center[2]) / shape.radii[2];
    double bound = 1.0;
    if (amp > 0.0 && !waves.empty()) {
      double f = 0.0;
      for (const auto& w : waves) f += std::sin(w[0] * z + w[1] * y + w[2] * x + w[3]);
      const double mean_r = (shape.radii[0] + shape.radii[1] + shape.radii[2]) / 3.0;
      bound = std::max(0.2, 1.0 + amp * f / static_cast<double>(waves.size()) / mean_r);
    }
    return dz * dz + dy * dy + dx * dx <= bound * bound;
  }
};

Blob random_blob(Rng& rng, const std::array<int, 3>& dims, const std::array<double, 3>& anchor, double rmin,
                 double rmax, double amp) {
  Blob b;
  for (int a = 0; a < 3; ++a) {
    b.shape.radii[a] = rng.uniform(rmin, rmax) * dims[a];
    b.shape.center[a] = anchor[a];
  }
  b.amp = amp;
  for (int k = 0; k < 3; ++k) {
    // Random direction, low spatial frequency.
    double v[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + 1e-12;
    const double freq = rng.uniform(0.25, 0.6);
    b.waves.push_back({v[0] / n * freq, v[1] / n * freq, v[2] / n * freq,
                       rng.uniform(0.0, 2.0 * std::numbers::pi), 0.0});
  }
  return b;
}

}  // namespace

Sample generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Shape3& s = spec.shape;
  const std::array<int, 3> dims{s.depth, s.height, s.width};

  std::vector<Blob> blobs;
  std::vector<Blob> distractors;
  double contrast = spec.foreground_contrast;
  if (!spec.ellipsoids.empty()) {
    for (const Ellipsoid& e : spec.ellipsoids) blobs.push_back(Blob{e, {}, 0.0});
  } else {
    contrast *= rng.uniform(0.7, 1.0);
    std::array<double, 3> c0{};
    for (int a = 0; a < 3; ++a) c0[a] = rng.uniform(0.4, 0.6) * (dims[a] - 1);
    for (int b = 0; b < spec.blob_count; ++b) {
      std::array<double, 3> c = c0;
      if (b > 0) {
        for (int a = 0; a < 3; ++a) c[a] += rng.uniform(-0.15, 0.15) * dims[a];
      }
      blobs.push_back(random_blob(rng, dims, c, 0.16, 0.26, spec.boundary_noise_amp));
    }
    for (int d = 0; d < spec.distractor_count; ++d) {
      std::array<double, 3> c{};
      // Keep distractors toward the periphery so they rarely touch the target.
      for (int a = 0; a < 3; ++a) {
        const double side = rng.uniform() < 0.5 ? rng.uniform(0.1, 0.25) : rng.uniform(0.75, 0.9);
        c[a] = side * (dims[a] - 1);
      }
      Blob blob = random_blob(rng, dims, c, 0.08, 0.14, 0.0);
      distractors.push_back(std::move(blob));
    }
  }
  const double distractor_contrast = contrast * rng.uniform(0.6, 0.9);

  // Smooth background bias field.
  const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double p3 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double bias_amp = spec.ellipsoids.empty() ? 0.25 : 0.0;

  Sample out;
  out.image = Volume(s);
  BinaryMask label(s);
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        bool fg = false;
        for (const Blob& b : blobs) fg = fg || b.contains(z, y, x);
        bool distract = false;
        if (!fg) {
          for (const Blob& b : distractors) distract = distract || b.contains(z, y, x);
        }
        double v = bias_amp * (std::sin(0.21 * z + p1) * std::cos(0.13 * y + p2) + 0.5 * std::sin(0.17 * x + p3));
        if (fg) v += contrast;
        if (distract) v += distractor_contrast;
        if (spec.intensity_noise_sd > 0.0) v += spec.intensity_noise_sd * rng.normal();
        out.image.at(z, y, x) = static_cast<float>(v);
        label.at(z, y, x) = fg ? 1 : 0;
      }
  const std::size_t fg = label.count();
  if (fg == 0 || fg == label.size()) fail(ErrorKind::kValidation, "synth spec produced a degenerate mask");
  out.label = std::move(label);
  out.id = "synth_" + std::to_string(spec.seed);
  return out;
}

Volume resize_trilinear(const Volume& v, std::array<int, 3> lo, std::array<int, 3> hi, Shape3 target) {
  target.validate();
  const std::array<int, 3> out_dims{target.depth, target.height, target.width};
  std::array<std::vector<int>, 3> i0, i1;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    const double n_in = hi[a] - lo[a] + 1;
    for (int o = 0; o < out_dims[a]; ++o) {
      double c = lo[a] + (o + 0.5) * n_in / out_dims[a] - 0.5;
      c = std::clamp(c, static_cast<double>(lo[a]), static_cast<double>(hi[a]));
      const int f = static_cast<int>(std::floor(c));
      i0[a].push_back(f);
      i1[a].push_back(std::min(f + 1, hi[a]));
      frac[a].push_back(c - f);
    }
  }
  Volume out(target);
  for (int z = 0; z < target.depth; ++z)
    for (int y = 0; y < target.height; ++y)
      for (int x = 0; x < target.width; ++x) {
        const double fz = frac[0][z], fy = frac[1][y], fx = frac[2][x];
        auto at = [&](int zz, int yy, int xx) { return static_cast<double>(v.at(zz, yy, xx)); };
        const int z0 = i0[0][z], z1 = i1[0][z], y0 = i0[1][y], y1 = i1[1][y], x0 = i0[2][x], x1 = i1[2][x];
        const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
        const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
        const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
        const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        out.at(z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
  return out;
}

BinaryMask resize_nearest(const BinaryMask& m, std::array<int, 3> lo, std::array<int, 3> hi, Shape3 target) {
  target.validate();
  const std::array<int, 3> out_dims{target.depth, target.height, target.width};
  std::array<std::vector<int>, 3> idx;
  for (int a = 0; a < 3; ++a) {
    const double n_in = hi[a] - lo[a] + 1;
    for (int o = 0; o < out_dims[a]; ++o) {
      const int i = lo[a] + static_cast<int>(std::floor((o + 0.5) * n_in / out_dims[a]));
      idx[a].push_back(std::min(i, hi[a]));
    }
  }
  BinaryMask out(target);
  for (int z = 0; z < target.depth; ++z)
    for (int y = 0; y < target.height; ++y)
      for (int x = 0; x < target.width; ++x) out.at(z, y, x) = m.at(idx[0][z], idx[1][y], idx[2][x]);
  return out;
}

Volume zscore(const Volume& v) {
  const std::size_t n = v.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += v[i];
  mean /= static_cast<double>(n);
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += (v[i] - mean) * (v[i] - mean);
  const double sd = std::sqrt(sq / static_cast<double>(n));
  Volume out(v.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(sd > 0.0 ? (v[i] - mean) / sd : v[i] - mean);
  }
  return out;
}

Sample crop_and_resize(const Sample& s, Shape3 target, int extension_lo, int extension_hi, Rng& rng) {
  if (!s.label) fail(ErrorKind::kInvalidArgument, "crop_and_resize needs a labeled sample");
  if (extension_lo < 0 || extension_hi < extension_lo) {
    fail(ErrorKind::kInvalidArgument, "crop_and_resize: bad extension range");
  }
  const BinaryMask& m = *s.label;
  require_same_shape(m.shape(), s.image.shape(), "crop_and_resize");
  if (m.count() == 0) fail(ErrorKind::kInvalidArgument, "crop_and_resize: empty label");
  const Shape3& sh = m.shape();
  std::array<int, 3> lo{sh.depth, sh.height, sh.width};
  std::array<int, 3> hi{-1, -1, -1};
  for (int z = 0; z < sh.depth; ++z)
    for (int y = 0; y < sh.height; ++y)
      for (int x = 0; x < sh.width; ++x) {
        if (!m.at(z, y, x)) continue;
        const int c[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], c[a]);
          hi[a] = std::max(hi[a], c[a]);
        }
      }
  const std::array<int, 3> dims{sh.depth, sh.height, sh.width};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, lo[a] - static_cast<int>(rng.uniform_int(extension_lo, extension_hi)));
    hi[a] = std::min(dims[a] - 1, hi[a] + static_cast<int>(rng.uniform_int(extension_lo, extension_hi)));
  }
  Sample out;
  out.id = s.id;
  out.image = zscore(resize_trilinear(s.image, lo, hi, target));
  out.label = resize_nearest(m, lo, hi, target);
  return out;
}

namespace {

template <typename V>
V flip_impl(const V& v, int axis) {
  if (axis < 0 || axis > 2) fail(ErrorKind::kInvalidArgument, "flip axis must be 0, 1 or 2");
  const Shape3& s = v.shape();
  V out(s);
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int zz = axis == 0 ? s.depth - 1 - z : z;
        const int yy = axis == 1 ? s.height - 1 - y : y;
        const int xx = axis == 2 ? s.width - 1 - x : x;
        out.at(z, y, x) = v.at(zz, yy, xx);
      }
  return out;
}

template <typename V>
V rotate_impl(const V& v, int turns) {
  turns = ((turns % 4) + 4) % 4;
  const Shape3& s = v.shape();
  if (turns % 2 == 1 && s.height != s.width) {
    fail(ErrorKind::kInvalidArgument, "odd quarter turns need square slices");
  }
  V out(s);
  const int H = s.height, W = s.width;
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int sy = y, sx = x;
        switch (turns) {
          case 1: sy = x; sx = W - 1 - y; break;
          case 2: sy = H - 1 - y; sx = W - 1 - x; break;
          case 3: sy = H - 1 - x; sx = y; break;
          default: break;
        }
        out.at(z, y, x) = v.at(z, sy, sx);
      }
  return out;
}

}  // namespace

Volume flip(const Volume& v, int axis) { return flip_impl(v, axis); }
BinaryMask flip(const BinaryMask& m, int axis) { return flip_impl(m, axis); }
Volume rotate90(const Volume& v, int turns) { return rotate_impl(v, turns); }
BinaryMask rotate90(const BinaryMask& m, int turns) { return rotate_impl(m, turns); }

Sample augment(const Sample& s, Rng& rng) {
  Sample out = s;
  for (int axis = 0; axis < 3; ++axis) {
    if (rng.uniform() < 0.5) {
      out.image = flip(out.image, axis);
      if (out.label) out.label = flip(*out.label, axis);
    }
  }
  const Shape3& sh = s.image.shape();
  const int turns = sh.height == sh.width ? static_cast<int>(rng.uniform_int(0, 3))
                                          : 2 * static_cast<int>(rng.uniform_int(0, 1));
  if (turns != 0) {
    out.image = rotate90(out.image, turns);
    if (out.label) out.label = rotate90(*out.label, turns);
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kMissingFile, "manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kMalformedHeader, "manifest is not valid JSON: " + path.string());
  }
  if (!j.is_array()) fail(ErrorKind::kMalformedHeader, "manifest must be a JSON list");
  const auto base = path.parent_path();
  auto resolve = [&base](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  std::vector<ManifestEntry> out;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("id") || !e.contains("image_path")) {
      fail(ErrorKind::kMalformedHeader, "manifest entries need id and image_path");
    }
    ManifestEntry m;
    m.id = e.at("id").get<std::string>();
    m.image_path = resolve(e.at("image_path").get<std::string>());
    if (e.contains("label_path") && !e.at("label_path").is_null()) {
      m.label_path = resolve(e.at("label_path").get<std::string>());
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json r{{"id", e.id}, {"image_path", e.image_path.string()}};
    if (e.label_path) r["label_path"] = e.label_path->string();
    j.push_back(std::move(r));
  }
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kIo, "cannot write manifest: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::kIo, "failed writing manifest: " + path.string());
}

Sample load_sample(const ManifestEntry& entry) {
  Sample s;
  s.id = entry.id;
  s.image = read_volume(entry.image_path);
  if (entry.label_path) {
    s.label = read_mask(*entry.label_path);
    require_same_shape(s.label->shape(), s.image.shape(), "load_sample");
  }
  return s;
}

std::filesystem::path generate_dataset(const GenDataOptions& opts, const std::filesystem::path& dir) {
  if (opts.count < 1) fail(ErrorKind::kInvalidArgument, "gen-data: count must be at least 1");
  opts.shape.validate();
  std::filesystem::create_directories(dir);
  const Rng root(opts.seed);
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < opts.count; ++i) {
    Rng rng = root.derive(static_cast<std::uint64_t>(i));
    SynthSpec spec;
    spec.shape = Shape3{(opts.shape.depth * 3 + 1) / 2, (opts.shape.height * 3 + 1) / 2,
                        (opts.shape.width * 3 + 1) / 2};
    spec.seed = rng.next_u64();
    spec.blob_count = static_cast<int>(rng.uniform_int(1, 3));
    Sample raw = generate(spec);
    Sample s = crop_and_resize(raw, opts.shape, opts.extension_lo, opts.extension_hi, rng);
    char id[32];
    std::snprintf(id, sizeof id, "sample_%03d", i);
    s.id = id;
    write_volume(s.image, dir / (s.id + "_image"), "image");
    write_mask(*s.label, dir / (s.id + "_label"));
    entries.push_back({s.id, s.id + "_image.json", s.id + "_label.json"});
  }
  const auto manifest = dir / "manifest.json";
  write_manifest(entries, manifest);
  return manifest;
}

}  // namespace mecca
