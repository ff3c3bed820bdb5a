#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mecca/env.hpp"
#include "mecca/volume.hpp"

namespace mecca {

/// g = 1 when the action direction agrees with the label (a > 0 and y = 1, or
/// a < 0 and y = 0), else 0.
BinaryMask confidence_target(const ActionMap& actions, const BinaryMask& label);

struct SymmetricLoss {
  double loss = 0.0;
  std::vector<float> d_logit;         // dL/dlogit for C(s, a)
  std::vector<float> d_logit_mirror;  // dL/dlogit for C(s, -a)
};

/// mean_i [ BCE(C(s,a)_i, g_i) + BCE(C(s,-a)_i, 1 - g_i) ] and its gradient with
/// respect to the pre-sigmoid logits of both evaluations.
SymmetricLoss symmetric_confidence_loss(const Volume& conf, const Volume& conf_mirror,
                                        const BinaryMask& target);

/// Evaluates C on the action map and on its negation, then applies the
/// symmetric loss.
using ConfidenceFn = std::function<Volume(const EpisodeState&, const ActionMap&)>;
double confidence_loss(const ConfidenceFn& conf_fwd, const EpisodeState& state, const ActionMap& actions,
                       const BinaryMask& target);

/// Keeps the action's direction where c >= threshold and flips it otherwise;
/// the label is 1 where the resulting direction is positive.
BinaryMask simulated_label(const ActionMap& actions, const Volume& conf, double threshold = 0.5);

/// M_i = [max(c_i, 1 - c_i) > delta].
BinaryMask gradient_mask(const Volume& conf, double delta);

struct DeltaSchedule {
  double start = 0.85;
  double end = 0.99;
  double increment_per_epoch = 0.00025;

  double at(long epoch) const;
  void validate() const;
};

/// Fraction of voxels where [c >= 0.5] equals the target g.
double directional_accuracy(const Volume& conf, const BinaryMask& target);

}  // namespace mecca
