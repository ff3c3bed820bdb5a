#pragma once

#include <array>
#include <vector>

#include <json.hpp>

#include "mecca/volume.hpp"

namespace mecca {

struct SupervoxelLabels {
  Shape3 shape;
  std::vector<int> labels;  // z-major, ids in [0, count)
  int count = 0;

  int at(int z, int y, int x) const { return labels[shape.index(z, y, x)]; }
};

struct GuideConfig {
  std::array<double, 3> spacing{2.0, 2.0, 2.0};  // z, y, x
  double compactness = 0.1;
  int initial_count = 100;
  int top_k = 5;
  int decline_per_step = 20;
  int min_count = 20;
  int max_iter = 10;

  void validate() const;
};

void to_json(nlohmann::json& j, const GuideConfig& c);
void from_json(const nlohmann::json& j, GuideConfig& c);

/// SLIC over (intensity, z, y, x). Centers start on a regular grid of roughly
/// `n_target` cells; each center claims voxels within one grid step per axis;
/// distance is sqrt(dc^2 + (m * ds / S)^2) with ds measured in spacing units.
/// Disconnected fragments are merged into their most adjacent neighbour, and
/// ids are compacted in scan order.
SupervoxelLabels slic_supervoxels(const Volume& image, int n_target, double compactness,
                                  const std::array<double, 3>& spacing, int max_iter = 10);

/// Grid cells per axis used to seed `n_target` centers.
std::array<int, 3> slic_grid(Shape3 shape, int n_target, const std::array<double, 3>& spacing);

struct RegionScore {
  int label = 0;
  double mean_conf = 0.0;
  std::size_t voxel_count = 0;
  std::array<int, 6> bbox{};  // z0, y0, x0, z1, y1, x1 (inclusive)

  friend bool operator==(const RegionScore&, const RegionScore&) = default;
};

/// Every region's statistics, indexed by label.
std::vector<RegionScore> region_stats(const Volume& conf, const SupervoxelLabels& sv);

/// Least confident regions first, ties to the lower id; at most top_k entries.
std::vector<RegionScore> rank_regions(const Volume& conf, const SupervoxelLabels& sv, int top_k);

/// max(min_count, initial_count - decline_per_step * (step - 1)), step >= 1.
int supervoxel_count_at_step(const GuideConfig& cfg, int step);

struct Suggestions {
  SupervoxelLabels supervoxels;
  std::vector<RegionScore> regions;
};

/// Supervoxels at this step's count (capped at the voxel count) ranked by `conf`.
Suggestions suggest(const Volume& image, const Volume& conf, const GuideConfig& cfg, int step);

nlohmann::json suggestions_to_json(const std::vector<RegionScore>& regions);

}  // namespace mecca
