#include "mecca/confidence.hpp"

#include <algorithm>
#include <cmath>

#include "mecca/error.hpp"

namespace mecca {

BinaryMask confidence_target(const ActionMap& actions, const BinaryMask& label) {
  require_same_shape(actions.shape, label.shape(), "confidence_target");
  BinaryMask g(label.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const bool up = actions.values[i] > 0.0f;
    const bool fg = label[i] > 0;
    g[i] = (up != fg) ? 0 : 1;
  }
  return g;
}

SymmetricLoss symmetric_confidence_loss(const Volume& conf, const Volume& conf_mirror,
                                        const BinaryMask& target) {
  require_same_shape(conf.shape(), target.shape(), "symmetric_confidence_loss");
  require_same_shape(conf_mirror.shape(), target.shape(), "symmetric_confidence_loss");
  const std::size_t n = target.size();
  SymmetricLoss out;
  out.d_logit.resize(n);
  out.d_logit_mirror.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int g = target[i];
    total += bce(conf[i], g) + bce(conf_mirror[i], 1 - g);
    // d BCE(sigmoid(z), g) / dz = sigmoid(z) - g
    out.d_logit[i] = static_cast<float>((conf[i] - g) * inv_n);
    out.d_logit_mirror[i] = static_cast<float>((conf_mirror[i] - (1 - g)) * inv_n);
  }
  out.loss = total * inv_n;
  return out;
}

double confidence_loss(const ConfidenceFn& conf_fwd, const EpisodeState& state, const ActionMap& actions,
                       const BinaryMask& target) {
  const Volume c = conf_fwd(state, actions);
  const Volume c_mirror = conf_fwd(state, actions.negated());
  return symmetric_confidence_loss(c, c_mirror, target).loss;
}

BinaryMask simulated_label(const ActionMap& actions, const Volume& conf, double threshold) {
  require_same_shape(actions.shape, conf.shape(), "simulated_label");
  BinaryMask y(conf.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool up = actions.values[i] > 0.0f;
    const bool keep = conf[i] >= threshold;
    y[i] = (up == keep) ? 1 : 0;
  }
  return y;
}

BinaryMask gradient_mask(const Volume& conf, double delta) {
  BinaryMask m(conf.shape());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double c = conf[i];
    m[i] = std::max(c, 1.0 - c) > delta ? 1 : 0;
  }
  return m;
}

double DeltaSchedule::at(long epoch) const {
  if (epoch < 0) fail(ErrorKind::kInvalidArgument, "delta schedule: negative epoch");
  return std::min(start + static_cast<double>(epoch) * increment_per_epoch, end);
}

void DeltaSchedule::validate() const {
  if (!(start >= 0.5 && start <= end && end < 1.0)) {
    fail(ErrorKind::kValidation, "delta schedule requires 0.5 <= start <= end < 1");
  }
  if (increment_per_epoch < 0.0) fail(ErrorKind::kValidation, "delta increment must be non-negative");
}

double directional_accuracy(const Volume& conf, const BinaryMask& target) {
  require_same_shape(conf.shape(), target.shape(), "directional_accuracy");
  if (target.size() == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if ((conf[i] >= 0.5f ? 1 : 0) == target[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(target.size());
}

}  // namespace mecca
