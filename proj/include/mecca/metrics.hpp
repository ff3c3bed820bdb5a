#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mecca/volume.hpp"

namespace mecca {

/// 2|P∩G| / (|P| + |G|); 1 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

/// [p > threshold], strict.
BinaryMask binarize(const Volume& prob, double threshold = 0.5);

/// Average symmetric surface distance in voxel units. Surfaces are the
/// 6-connected boundary sets. Throws kInvalidArgument when either mask is empty.
double assd(const BinaryMask& pred, const BinaryMask& gt);

/// Squared Euclidean distance from every voxel to the nearest voxel of `feature`.
/// Voxels are at +inf when the feature set is empty.
std::vector<double> squared_distance_transform(const BinaryMask& feature);

struct StepReport {
  int step = 0;
  double dice = 0.0;
  std::optional<double> assd;  // absent when a mask is empty or no label exists
  double misunderstanding_rate = 0.0;
  double reward_sum = 0.0;

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

nlohmann::json to_json(const StepReport& r);

/// Aggregate over samples, one row per step.
struct StepSummary {
  int step = 0;
  double dice_mean = 0.0;
  double dice_sd = 0.0;
  double dice_delta = 0.0;  // change from the previous step; 0 for the first
  double assd_mean = 0.0;
  double assd_sd = 0.0;
  int assd_count = 0;
  double misunderstanding_mean = 0.0;
};

/// `per_sample[s][t]` is sample s at step t. Every sample must have the same
/// number of steps.
std::vector<StepSummary> summarize(const std::vector<std::vector<StepReport>>& per_sample);

std::string summary_csv(const std::vector<StepSummary>& rows);

}  // namespace mecca
