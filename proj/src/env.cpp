#include "mecca/env.hpp"

#include <algorithm>
#include <cmath>

#include "mecca/error.hpp"

namespace mecca {

void EpisodeConfig::validate() const {
  if (horizon < 1) fail(ErrorKind::kValidation, "episode horizon must be at least 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) fail(ErrorKind::kValidation, "gamma must lie in (0, 1]");
  if (!(alpha > 0.0)) fail(ErrorKind::kValidation, "alpha must be positive");
}

EpisodeState EpisodeState::initial(Volume image) {
  EpisodeState s;
  const Shape3 shape = image.shape();
  s.image = std::move(image);
  s.prob = Volume(shape, 0.5f);
  s.hint = Volume(shape, 0.0f);
  return s;
}

ActionMap ActionMap::from_indices(Shape3 shape, std::vector<std::uint8_t> indices) {
  if (indices.size() != shape.voxels()) fail(ErrorKind::kShapeMismatch, "action map size");
  ActionMap a;
  a.shape = shape;
  a.values = Volume(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= kActionCount) fail(ErrorKind::kValidation, "action index out of range");
    a.values[i] = kActionValues[indices[i]];
  }
  a.indices = std::move(indices);
  return a;
}

ActionMap ActionMap::negated() const {
  // The action set is symmetric and sorted, so index k mirrors to |A| - 1 - k.
  std::vector<std::uint8_t> mirrored(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    mirrored[i] = static_cast<std::uint8_t>(kActionCount - 1 - indices[i]);
  }
  return from_indices(shape, std::move(mirrored));
}

ActionMap sample_actions(const nn::Activation& policy, Rng& rng, SampleMode mode) {
  if (policy.channels != kActionCount) fail(ErrorKind::kShapeMismatch, "policy must have one channel per action");
  const std::size_t N = policy.voxels();
  std::vector<std::uint8_t> idx(N);
  for (std::size_t i = 0; i < N; ++i) {
    double sum = 0.0;
    for (int c = 0; c < kActionCount; ++c) {
      const float p = policy.data[c * N + i];
      if (!(p >= 0.0f)) fail(ErrorKind::kValidation, "policy row has a negative or NaN entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-4) fail(ErrorKind::kValidation, "policy row does not sum to 1");

    int chosen = 0;
    if (mode == SampleMode::kArgmax) {
      float best = policy.data[i];
      for (int c = 1; c < kActionCount; ++c) {
        if (policy.data[c * N + i] > best) {
          best = policy.data[c * N + i];
          chosen = c;
        }
      }
    } else {
      const double u = rng.uniform() * sum;
      double cum = 0.0;
      chosen = kActionCount - 1;
      for (int c = 0; c < kActionCount; ++c) {
        cum += policy.data[c * N + i];
        if (u < cum) {
          chosen = c;
          break;
        }
      }
      // Never land on a zero-probability action through rounding at the tail.
      while (chosen > 0 && policy.data[chosen * N + i] == 0.0f) --chosen;
    }
    idx[i] = static_cast<std::uint8_t>(chosen);
  }
  return ActionMap::from_indices(policy.shape, std::move(idx));
}

EpisodeState apply_actions(const EpisodeState& state, const ActionMap& actions) {
  require_same_shape(state.prob.shape(), actions.shape, "apply_actions");
  EpisodeState next = state;
  for (std::size_t i = 0; i < next.prob.size(); ++i) {
    next.prob[i] = std::clamp(state.prob[i] + actions.values[i], 0.0f, 1.0f);
  }
  next.step = state.step + 1;
  return next;
}

double bce(double prob, int target) {
  const double p = std::clamp(prob, kLogEps, 1.0 - kLogEps);
  return target ? -std::log(p) : -std::log(1.0 - p);
}

Volume cross_entropy_map(const Volume& prob, const BinaryMask& label) {
  require_same_shape(prob.shape(), label.shape(), "cross_entropy_map");
  Volume out(prob.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(bce(prob[i], label[i]));
  return out;
}

Volume gain_map(const Volume& prob_prev, const Volume& prob_next, const BinaryMask& label) {
  require_same_shape(prob_prev.shape(), label.shape(), "gain_map");
  require_same_shape(prob_next.shape(), label.shape(), "gain_map");
  Volume out(label.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(bce(prob_prev[i], label[i]) - bce(prob_next[i], label[i]));
  }
  return out;
}

RewardMap self_adaptive_reward(const Volume& gain, const Volume& conf, const EpisodeConfig& cfg) {
  require_same_shape(gain.shape(), conf.shape(), "self_adaptive_reward");
  RewardMap r;
  r.reward = Volume(gain.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < gain.size(); ++i) {
    const double weight = cfg.alpha * std::pow(2.0 - static_cast<double>(conf[i]), cfg.beta);
    const double v = weight * static_cast<double>(gain[i]);
    r.reward[i] = static_cast<float>(v);
    total += v;
  }
  r.total = total;
  return r;
}

std::vector<Volume> discounted_returns(const std::vector<RewardMap>& rewards, const EpisodeConfig& cfg,
                                       AdvantageMode mode) {
  std::vector<Volume> returns(rewards.size());
  if (rewards.empty()) return returns;
  const Shape3 shape = rewards.front().reward.shape();
  std::vector<double> running(shape.voxels(), 0.0);
  for (std::size_t k = rewards.size(); k-- > 0;) {
    const Volume& r = rewards[k].reward;
    require_same_shape(r.shape(), shape, "discounted_returns");
    if (mode == AdvantageMode::kMeanReward) {
      const double mean = r.mean();
      for (double& g : running) g = mean + cfg.gamma * g;
    } else {
      for (std::size_t i = 0; i < running.size(); ++i) running[i] = r[i] + cfg.gamma * running[i];
    }
    returns[k] = Volume(shape);
    for (std::size_t i = 0; i < running.size(); ++i) returns[k][i] = static_cast<float>(running[i]);
  }
  return returns;
}

std::vector<Volume> returns_and_advantages(const std::vector<RewardMap>& rewards,
                                           const std::vector<Volume>& values, const EpisodeConfig& cfg,
                                           AdvantageMode mode) {
  if (rewards.size() != values.size()) {
    fail(ErrorKind::kShapeMismatch, "returns_and_advantages: reward and value sequences differ in length");
  }
  std::vector<Volume> adv = discounted_returns(rewards, cfg, mode);
  for (std::size_t t = 0; t < adv.size(); ++t) {
    require_same_shape(values[t].shape(), adv[t].shape(), "returns_and_advantages");
    for (std::size_t i = 0; i < adv[t].size(); ++i) adv[t][i] -= values[t][i];
  }
  return adv;
}

double misunderstanding_rate(const Volume& prob_prev, const Volume& prob_next, const BinaryMask& label) {
  require_same_shape(prob_prev.shape(), label.shape(), "misunderstanding_rate");
  require_same_shape(prob_next.shape(), label.shape(), "misunderstanding_rate");
  std::size_t changed = 0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < label.size(); ++i) {
    const float delta = prob_next[i] - prob_prev[i];
    if (delta == 0.0f) continue;
    ++changed;
    if ((label[i] == 1) != (delta > 0.0f)) ++wrong;
  }
  return changed == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(changed);
}

}  // namespace mecca
