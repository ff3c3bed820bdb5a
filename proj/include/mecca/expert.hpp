#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "mecca/rng.hpp"
#include "mecca/volume.hpp"

namespace mecca {

struct HintPoint {
  int z = 0;
  int y = 0;
  int x = 0;

  friend auto operator<=>(const HintPoint&, const HintPoint&) = default;
};

/// Clicks per interaction step; default 25 then 5 per step (45 in total).
struct HintSchedule {
  std::vector<int> points_per_step{25, 5, 5, 5, 5};
  int perturb_radius = 0;

  int total() const;
  int at_step(int step_index) const;  // 0-based; 0 past the end
  void validate(int horizon) const;
};

/// Gaussian bump used to rasterize clicks: peak 1, isotropic sigma, truncated
/// to a ball of `radius` voxels.
struct HintKernel {
  double sigma = 2.0;
  int radius = 4;
};

/// Foreground voxels with at least one 6-connected background neighbour; the
/// outside of the volume counts as background. Throws on an empty mask.
std::vector<HintPoint> boundary_voxels(const BinaryMask& mask);

/// Same set as a mask.
BinaryMask boundary_mask(const BinaryMask& mask);

/// Picks `k` clicks uniformly without replacement from boundary(gt) intersected
/// with the error region (gt != pred), topping up from the rest of boundary(gt)
/// when the intersection is too small. Each click is then jittered uniformly by
/// up to `perturb_radius` voxels per axis and clamped into the volume.
std::vector<HintPoint> select_hints(const BinaryMask& gt, const BinaryMask& pred, int k, Rng& rng,
                                    int perturb_radius);

/// Rasterizes clicks and max-combines them with `prev` (when given).
Volume gaussian_hint_map(Shape3 shape, std::span<const HintPoint> points, const Volume* prev,
                         const HintKernel& kernel = {});

nlohmann::json hints_to_json(std::span<const HintPoint> points);
/// Parses [[z,y,x], ...]; throws kValidation on malformed input.
std::vector<HintPoint> hints_from_json(const nlohmann::json& j);

}  // namespace mecca
