#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mecca/neural.hpp"
#include "mecca/rng.hpp"
#include "mecca/volume.hpp"

namespace mecca {

/// Discrete probability increments, ordered ascending. Zero is excluded.
inline constexpr std::array<float, 6> kActionValues{-0.4f, -0.2f, -0.1f, 0.1f, 0.2f, 0.4f};
inline constexpr int kActionCount = static_cast<int>(kActionValues.size());
inline constexpr float kActionScale = 0.4f;
inline constexpr double kLogEps = 1e-7;

struct EpisodeConfig {
  int horizon = 5;
  double gamma = 0.95;
  double alpha = 0.8;
  double beta = 1.0;

  void validate() const;
};

/// MDP state: image, probability map, hint map, step counter.
struct EpisodeState {
  Volume image;
  Volume prob;
  Volume hint;
  int step = 0;

  /// Probability map initialized to the constant 0.5, hint map empty.
  static EpisodeState initial(Volume image);
};

struct ActionMap {
  Shape3 shape;
  std::vector<std::uint8_t> indices;
  Volume values;

  static ActionMap from_indices(Shape3 shape, std::vector<std::uint8_t> indices);
  ActionMap negated() const;
};

struct RewardMap {
  Volume reward;
  double total = 0.0;
};

enum class SampleMode { kSample, kArgmax };
enum class AdvantageMode { kPerVoxel, kMeanReward };

/// Draws one action per voxel from a channel-major distribution (|A| x N).
/// Argmax mode breaks ties toward the lowest index. Rows must sum to 1.
ActionMap sample_actions(const nn::Activation& policy, Rng& rng, SampleMode mode);

/// p' = clip(p + a, 0, 1); step advances; image and hint carried forward.
EpisodeState apply_actions(const EpisodeState& state, const ActionMap& actions);

/// Binary cross-entropy of one probability against a {0,1} target, with p
/// clamped into [eps, 1 - eps].
double bce(double prob, int target);

/// Per-voxel binary cross-entropy with p clamped into [eps, 1 - eps].
Volume cross_entropy_map(const Volume& prob, const BinaryMask& label);

/// X(prev) - X(next): positive where the probability moved toward the label.
Volume gain_map(const Volume& prob_prev, const Volume& prob_next, const BinaryMask& label);

/// r_i = alpha * (2 - c_i)^beta * gain_i; `total` is the spatial sum.
RewardMap self_adaptive_reward(const Volume& gain, const Volume& conf, const EpisodeConfig& cfg);

/// Discounted per-voxel returns G^(t) = sum_{k >= t} gamma^(k - t) r^(k), finite
/// horizon. In kMeanReward mode r^(k) is replaced by its spatial mean.
std::vector<Volume> discounted_returns(const std::vector<RewardMap>& rewards, const EpisodeConfig& cfg,
                                       AdvantageMode mode);

/// A^(t) = G^(t) - V^(t).
std::vector<Volume> returns_and_advantages(const std::vector<RewardMap>& rewards,
                                           const std::vector<Volume>& values, const EpisodeConfig& cfg,
                                           AdvantageMode mode);

/// Fraction of changed voxels whose change direction contradicts the label.
/// Zero when nothing changed.
double misunderstanding_rate(const Volume& prob_prev, const Volume& prob_next, const BinaryMask& label);

}  // namespace mecca
