#include "mecca/expert.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mecca/error.hpp"

namespace mecca {

int HintSchedule::total() const { return std::accumulate(points_per_step.begin(), points_per_step.end(), 0); }

int HintSchedule::at_step(int step_index) const {
  if (step_index < 0 || step_index >= static_cast<int>(points_per_step.size())) return 0;
  return points_per_step[static_cast<std::size_t>(step_index)];
}

void HintSchedule::validate(int horizon) const {
  if (static_cast<int>(points_per_step.size()) != horizon) {
    fail(ErrorKind::kValidation, "hint schedule length must equal the episode horizon");
  }
  for (int k : points_per_step) {
    if (k < 0) fail(ErrorKind::kValidation, "hint schedule entries must be non-negative");
  }
  if (perturb_radius < 0) fail(ErrorKind::kValidation, "perturb radius must be non-negative");
}

namespace {

bool is_boundary(const BinaryMask& m, int z, int y, int x) {
  const Shape3& s = m.shape();
  if (!m.at(z, y, x)) return false;
  static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (const auto& o : kOffsets) {
    const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
    if (!s.contains(zz, yy, xx) || !m.at(zz, yy, xx)) return true;
  }
  return false;
}

}  // namespace

BinaryMask boundary_mask(const BinaryMask& mask) {
  const Shape3& s = mask.shape();
  BinaryMask out(s);
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        if (is_boundary(mask, z, y, x)) out.at(z, y, x) = 1;
  return out;
}

std::vector<HintPoint> boundary_voxels(const BinaryMask& mask) {
  if (mask.count() == 0) fail(ErrorKind::kInvalidArgument, "boundary of an empty mask");
  const Shape3& s = mask.shape();
  std::vector<HintPoint> pts;
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        if (is_boundary(mask, z, y, x)) pts.push_back({z, y, x});
  return pts;
}

std::vector<HintPoint> select_hints(const BinaryMask& gt, const BinaryMask& pred, int k, Rng& rng,
                                    int perturb_radius) {
  require_same_shape(gt.shape(), pred.shape(), "select_hints");
  if (k < 0) fail(ErrorKind::kInvalidArgument, "select_hints: negative k");
  if (k == 0 || gt.count() == 0) return {};

  const Shape3& s = gt.shape();
  std::vector<HintPoint> primary;
  std::vector<HintPoint> fallback;
  for (const HintPoint& p : boundary_voxels(gt)) {
    const std::size_t i = s.index(p.z, p.y, p.x);
    (gt[i] != pred[i] ? primary : fallback).push_back(p);
  }

  // Partial Fisher-Yates: the first `take` entries become a uniform sample.
  auto draw = [&rng](std::vector<HintPoint>& pool, std::size_t take, std::vector<HintPoint>& out) {
    take = std::min(take, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(pool.size() - 1)));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  };

  std::vector<HintPoint> chosen;
  draw(primary, static_cast<std::size_t>(k), chosen);
  if (chosen.size() < static_cast<std::size_t>(k)) {
    draw(fallback, static_cast<std::size_t>(k) - chosen.size(), chosen);
  }

  if (perturb_radius > 0) {
    for (HintPoint& p : chosen) {
      p.z = std::clamp(p.z + static_cast<int>(rng.uniform_int(-perturb_radius, perturb_radius)), 0, s.depth - 1);
      p.y = std::clamp(p.y + static_cast<int>(rng.uniform_int(-perturb_radius, perturb_radius)), 0, s.height - 1);
      p.x = std::clamp(p.x + static_cast<int>(rng.uniform_int(-perturb_radius, perturb_radius)), 0, s.width - 1);
    }
  }
  return chosen;
}

Volume gaussian_hint_map(Shape3 shape, std::span<const HintPoint> points, const Volume* prev,
                         const HintKernel& kernel) {
  Volume out = prev ? *prev : Volume(shape, 0.0f);
  require_same_shape(out.shape(), shape, "gaussian_hint_map");
  const int r = kernel.radius;
  const double inv_two_sigma2 = 1.0 / (2.0 * kernel.sigma * kernel.sigma);
  for (const HintPoint& p : points) {
    if (!shape.contains(p.z, p.y, p.x)) fail(ErrorKind::kValidation, "hint point outside the volume");
    for (int dz = -r; dz <= r; ++dz) {
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int d2 = dz * dz + dy * dy + dx * dx;
          if (d2 > r * r) continue;
          const int z = p.z + dz, y = p.y + dy, x = p.x + dx;
          if (!shape.contains(z, y, x)) continue;
          const float v = static_cast<float>(std::exp(-d2 * inv_two_sigma2));
          float& cell = out.at(z, y, x);
          cell = std::max(cell, v);
        }
      }
    }
  }
  return out;
}

nlohmann::json hints_to_json(std::span<const HintPoint> points) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : points) arr.push_back({p.z, p.y, p.x});
  return arr;
}

std::vector<HintPoint> hints_from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorKind::kValidation, "hints must be a JSON array of [z,y,x]");
  std::vector<HintPoint> out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3 || !e[0].is_number_integer() || !e[1].is_number_integer() ||
        !e[2].is_number_integer()) {
      fail(ErrorKind::kValidation, "each hint must be an integer triple [z,y,x]");
    }
    out.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>()});
  }
  return out;
}

}  // namespace mecca
