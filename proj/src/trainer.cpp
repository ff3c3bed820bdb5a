#include "mecca/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "mecca/error.hpp"

namespace mecca {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (epochs < 0) fail(ErrorKind::kValidation, "epochs must be non-negative");
  if (!(lr > 0.0) || !(conf_lr > 0.0)) fail(ErrorKind::kValidation, "learning rates must be positive");
  episode.validate();
  schedule.validate(episode.horizon);
  delta.validate();
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
    fail(ErrorKind::kValidation, "labeled_fraction must lie in (0, 1]");
  }
  if (eval_every < 0 || checkpoint_every < 0) fail(ErrorKind::kValidation, "intervals must be non-negative");
  if (accumulate_episodes < 1) fail(ErrorKind::kValidation, "accumulate_episodes must be at least 1");
  if (workers < 1) fail(ErrorKind::kValidation, "workers must be at least 1");
  if (!(hint_kernel.sigma > 0.0) || hint_kernel.radius < 0) fail(ErrorKind::kValidation, "bad hint kernel");
  nn::SegNetSpec::from_widths(widths);
  nn::ConfNetSpec::from_widths(widths);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs},
      {"lr", c.lr},
      {"conf_lr", c.conf_lr},
      {"episode", {{"horizon", c.episode.horizon}, {"gamma", c.episode.gamma},
                   {"alpha", c.episode.alpha}, {"beta", c.episode.beta}}},
      {"schedule", {{"points_per_step", c.schedule.points_per_step},
                    {"perturb_radius", c.schedule.perturb_radius}}},
      {"hint_kernel", {{"sigma", c.hint_kernel.sigma}, {"radius", c.hint_kernel.radius}}},
      {"delta", {{"start", c.delta.start}, {"end", c.delta.end},
                 {"increment_per_epoch", c.delta.increment_per_epoch}}},
      {"labeled_fraction", c.labeled_fraction},
      {"seed", c.seed},
      {"advantage_mode", c.advantage_mode == AdvantageMode::kPerVoxel ? "per_voxel" : "mean_reward"},
      {"eval_every", c.eval_every},
      {"checkpoint_every", c.checkpoint_every},
      {"accumulate_episodes", c.accumulate_episodes},
      {"augment", c.augment},
      {"workers", c.workers},
      {"widths", c.widths},
  };
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) fail(ErrorKind::kValidation, std::string(where) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) fail(ErrorKind::kValidation, std::string("unknown config key: ") + where + "." + it.key());
  }
}

}  // namespace

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"epochs", "lr", "conf_lr", "episode", "schedule", "hint_kernel", "delta", "labeled_fraction",
                  "seed", "advantage_mode", "eval_every", "checkpoint_every", "accumulate_episodes", "augment",
                  "workers", "widths"},
                 "config");
  try {
    const TrainConfig d;
    c = d;
    c.epochs = j.value("epochs", d.epochs);
    c.lr = j.value("lr", d.lr);
    c.conf_lr = j.value("conf_lr", d.conf_lr);
    if (j.contains("episode")) {
      const auto& e = j.at("episode");
      reject_unknown(e, {"horizon", "gamma", "alpha", "beta"}, "episode");
      c.episode.horizon = e.value("horizon", d.episode.horizon);
      c.episode.gamma = e.value("gamma", d.episode.gamma);
      c.episode.alpha = e.value("alpha", d.episode.alpha);
      c.episode.beta = e.value("beta", d.episode.beta);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      reject_unknown(s, {"points_per_step", "perturb_radius"}, "schedule");
      c.schedule.points_per_step = s.value("points_per_step", d.schedule.points_per_step);
      c.schedule.perturb_radius = s.value("perturb_radius", d.schedule.perturb_radius);
    }
    if (j.contains("hint_kernel")) {
      const auto& h = j.at("hint_kernel");
      reject_unknown(h, {"sigma", "radius"}, "hint_kernel");
      c.hint_kernel.sigma = h.value("sigma", d.hint_kernel.sigma);
      c.hint_kernel.radius = h.value("radius", d.hint_kernel.radius);
    }
    if (j.contains("delta")) {
      const auto& s = j.at("delta");
      reject_unknown(s, {"start", "end", "increment_per_epoch"}, "delta");
      c.delta.start = s.value("start", d.delta.start);
      c.delta.end = s.value("end", d.delta.end);
      c.delta.increment_per_epoch = s.value("increment_per_epoch", d.delta.increment_per_epoch);
    }
    c.labeled_fraction = j.value("labeled_fraction", d.labeled_fraction);
    c.seed = j.value("seed", d.seed);
    const std::string mode = j.value("advantage_mode", std::string("per_voxel"));
    if (mode == "per_voxel") {
      c.advantage_mode = AdvantageMode::kPerVoxel;
    } else if (mode == "mean_reward") {
      c.advantage_mode = AdvantageMode::kMeanReward;
    } else {
      fail(ErrorKind::kValidation, "advantage_mode must be per_voxel or mean_reward");
    }
    c.eval_every = j.value("eval_every", d.eval_every);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.accumulate_episodes = j.value("accumulate_episodes", d.accumulate_episodes);
    c.augment = j.value("augment", d.augment);
    c.workers = j.value("workers", d.workers);
    if (j.contains("widths")) c.widths = j.at("widths").get<nn::NetWidths>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kValidation, std::string("bad config value: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Engine

Models Models::create(const nn::NetWidths& widths, Rng& rng) {
  Models m{nn::SegNet(nn::SegNetSpec::from_widths(widths)), nn::ConfNet(nn::ConfNetSpec::from_widths(widths)),
           {}, {}};
  m.seg_params = m.seg.init(rng);
  m.conf_params = m.conf.init(rng);
  return m;
}

void add_hints(EpisodeState& state, const std::vector<HintPoint>& points, const HintKernel& kernel) {
  if (points.empty()) return;
  state.hint = gaussian_hint_map(state.hint.shape(), points, &state.hint, kernel);
}

EngineStep engine_step(const Models& m, const EpisodeState& state, SampleMode mode, Rng& rng) {
  EngineStep st;
  st.seg = m.seg.forward(m.seg_params, state.image, state.prob, state.hint);
  st.actions = sample_actions(st.seg.policy, rng, mode);
  st.conf = m.conf.forward(m.conf_params, state.image, state.prob, state.hint, st.actions.values);
  st.next = apply_actions(state, st.actions);
  return st;
}

std::vector<Volume> Trace::values() const {
  std::vector<Volume> out;
  for (const auto& s : steps) out.emplace_back(s.state.prob.shape(), s.seg.value.data);
  return out;
}

std::vector<RewardMap> Trace::rewards() const {
  std::vector<RewardMap> out;
  for (const auto& s : steps) out.push_back(s.reward);
  return out;
}

namespace {

Trace rollout(const Models& m, const Volume& image, const BinaryMask& hint_source, const TrainConfig& cfg,
              std::optional<double> delta, Rng& rng) {
  require_same_shape(image.shape(), hint_source.shape(), "rollout");
  Trace trace;
  trace.labeled = !delta.has_value();
  EpisodeState state = EpisodeState::initial(image);
  for (int t = 0; t < cfg.episode.horizon; ++t) {
    StepRecord rec;
    rec.hints = select_hints(hint_source, binarize(state.prob), cfg.schedule.at_step(t), rng,
                             cfg.schedule.perturb_radius);
    add_hints(state, rec.hints, cfg.hint_kernel);
    EngineStep st = engine_step(m, state, SampleMode::kSample, rng);
    if (delta) {
      rec.target = simulated_label(st.actions, st.conf.confidence);
      rec.mask = gradient_mask(st.conf.confidence, *delta);
    } else {
      rec.target = hint_source;
    }
    rec.gain = gain_map(state.prob, st.next.prob, rec.target);
    rec.reward = self_adaptive_reward(rec.gain, st.conf.confidence, cfg.episode);
    rec.state = state;
    rec.prob_next = st.next.prob;
    rec.seg = std::move(st.seg);
    rec.actions = std::move(st.actions);
    rec.conf = std::move(st.conf);
    state = std::move(st.next);
    trace.steps.push_back(std::move(rec));
  }
  return trace;
}

void accumulate(NamedTensorSet& into, const NamedTensorSet& g) {
  for (auto& [name, t] : into) {
    const Tensor& s = g.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += s.data[i];
  }
}

}  // namespace

Trace rollout_episode(const Models& m, const Sample& sample, const TrainConfig& cfg, Rng& rng) {
  if (!sample.label) fail(ErrorKind::kInvalidArgument, "rollout_episode needs a labeled sample");
  return rollout(m, sample.image, *sample.label, cfg, std::nullopt, rng);
}

Trace rollout_unlabeled(const Models& m, const Volume& image, const BinaryMask& hint_source,
                        const TrainConfig& cfg, double delta, Rng& rng) {
  return rollout(m, image, hint_source, cfg, delta, rng);
}

std::vector<Volume> trace_advantages(const Trace& trace, const TrainConfig& cfg) {
  return returns_and_advantages(trace.rewards(), trace.values(), cfg.episode, cfg.advantage_mode);
}

SegGradients segmentation_gradients(const Models& m, const Trace& trace, const std::vector<Volume>& advantages) {
  if (advantages.size() != trace.steps.size()) {
    fail(ErrorKind::kShapeMismatch, "segmentation_gradients: advantage count");
  }
  SegGradients out;
  out.value = m.seg_params.zeros_like();
  out.policy = m.seg_params.zeros_like();
  if (trace.steps.empty()) return out;
  const std::size_t N = trace.steps.front().state.prob.size();
  const double scale = 1.0 / (static_cast<double>(N) * static_cast<double>(trace.steps.size()));
  const int K = kActionCount;

  std::vector<float> d_value(N);
  std::vector<float> d_logits(N * K);
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const StepRecord& rec = trace.steps[t];
    const Volume& A = advantages[t];
    require_same_shape(A.shape(), rec.state.prob.shape(), "segmentation_gradients");
    const auto& pi = rec.seg.policy.data;
    bool any = false;
    double vloss = 0.0, ploss = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double mi = rec.mask ? (*rec.mask)[i] : 1.0;
      const double a = A[i];
      if (mi == 0.0) {
        d_value[i] = 0.0f;
        for (int k = 0; k < K; ++k) d_logits[k * N + i] = 0.0f;
        continue;
      }
      any = true;
      vloss += a * a;
      d_value[i] = static_cast<float>(-2.0 * a * scale);
      const int chosen = rec.actions.indices[i];
      ploss -= std::log(std::max(static_cast<double>(pi[chosen * N + i]), kLogEps)) * a;
      // d(-log pi_a)/dz_k = pi_k - [k == a]
      for (int k = 0; k < K; ++k) {
        const double ind = k == chosen ? 1.0 : 0.0;
        d_logits[k * N + i] = static_cast<float>(a * scale * (pi[k * N + i] - ind));
      }
    }
    out.value_loss += vloss * scale;
    out.policy_loss += ploss * scale;
    if (!any) continue;
    accumulate(out.value, m.seg.backward(m.seg_params, rec.seg, {}, d_value));
    accumulate(out.policy, m.seg.backward(m.seg_params, rec.seg, d_logits, {}));
  }
  return out;
}

ConfGradients confidence_gradients(const Models& m, const Trace& trace) {
  if (!trace.labeled) fail(ErrorKind::kInvalidArgument, "confidence gradients need a labeled trace");
  ConfGradients out;
  out.grads = m.conf_params.zeros_like();
  for (const StepRecord& rec : trace.steps) {
    const BinaryMask g = confidence_target(rec.actions, rec.target);
    const ActionMap mirrored = rec.actions.negated();
    const nn::ConfNet::Output mirror =
        m.conf.forward(m.conf_params, rec.state.image, rec.state.prob, rec.state.hint, mirrored.values);
    const SymmetricLoss sl = symmetric_confidence_loss(rec.conf.confidence, mirror.confidence, g);
    out.loss += sl.loss;
    out.accuracy += directional_accuracy(rec.conf.confidence, g);
    accumulate(out.grads, m.conf.backward(m.conf_params, rec.conf, sl.d_logit));
    accumulate(out.grads, m.conf.backward(m.conf_params, mirror, sl.d_logit_mirror));
  }
  if (!trace.steps.empty()) out.accuracy /= static_cast<double>(trace.steps.size());
  return out;
}

Optimizers Optimizers::create(const Models& m, const TrainConfig& cfg) {
  nn::AdamConfig seg_cfg;
  seg_cfg.lr = static_cast<float>(cfg.lr);
  nn::AdamConfig conf_cfg;
  conf_cfg.lr = static_cast<float>(cfg.conf_lr);
  return Optimizers{nn::Adam(seg_cfg, m.seg_params, m.seg.value_param_names()),
                    nn::Adam(seg_cfg, m.seg_params, m.seg.policy_param_names()),
                    nn::Adam(conf_cfg, m.conf_params)};
}

SegUpdate update_segmentation(Models& m, Optimizers& opt, const Trace& trace, const TrainConfig& cfg) {
  const SegGradients g = segmentation_gradients(m, trace, trace_advantages(trace, cfg));
  SegUpdate u;
  u.value_loss = g.value_loss;
  u.policy_loss = g.policy_loss;
  opt.value.step(m.seg_params, g.value);
  u.applied.push_back("value");
  opt.policy.step(m.seg_params, g.policy);
  u.applied.push_back("policy");
  return u;
}

double update_confidence(Models& m, Optimizers& opt, const Trace& trace) {
  const ConfGradients g = confidence_gradients(m, trace);
  opt.conf.step(m.conf_params, g.grads);
  return g.loss;
}

// ---------------------------------------------------------------------------
// Training loop

void to_json(nlohmann::json& j, const TrainLogRecord& r) {
  j = {{"epoch", r.epoch},
       {"policy_loss", r.policy_loss},
       {"value_loss", r.value_loss},
       {"conf_loss", r.conf_loss},
       {"dice_per_step", r.dice_per_step},
       {"misunderstanding_rate", r.misunderstanding_rate},
       {"conf_accuracy", r.conf_accuracy},
       {"delta", r.delta},
       {"unlabeled_mask_fraction", r.unlabeled_mask_fraction},
       {"labeled_episodes", r.labeled_episodes},
       {"unlabeled_episodes", r.unlabeled_episodes}};
}

void from_json(const nlohmann::json& j, TrainLogRecord& r) {
  r.epoch = j.at("epoch").get<int>();
  r.policy_loss = j.at("policy_loss").get<double>();
  r.value_loss = j.at("value_loss").get<double>();
  r.conf_loss = j.at("conf_loss").get<double>();
  r.dice_per_step = j.at("dice_per_step").get<std::vector<double>>();
  r.misunderstanding_rate = j.at("misunderstanding_rate").get<double>();
  r.conf_accuracy = j.at("conf_accuracy").get<double>();
  r.delta = j.at("delta").get<double>();
  r.unlabeled_mask_fraction = j.at("unlabeled_mask_fraction").get<double>();
  r.labeled_episodes = j.at("labeled_episodes").get<int>();
  r.unlabeled_episodes = j.at("unlabeled_episodes").get<int>();
}

Split split_samples(std::size_t count, double labeled_fraction, std::uint64_t seed) {
  if (count == 0) fail(ErrorKind::kInvalidArgument, "no training samples");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng = Rng(seed).derive(0x53504c4954ULL);
  for (std::size_t i = count; i-- > 1;) {
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  }
  auto n_labeled = static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(count)));
  n_labeled = std::clamp<std::size_t>(n_labeled, 1, count);
  Split s;
  s.labeled.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  s.unlabeled.assign(order.begin() + static_cast<std::ptrdiff_t>(n_labeled), order.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  std::sort(s.unlabeled.begin(), s.unlabeled.end());
  return s;
}

namespace {

Models build_models(const TrainConfig& cfg) {
  Rng init = Rng(cfg.seed).derive(0x494e4954ULL);
  return Models::create(cfg.widths, init);
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::vector<Sample> samples)
    : cfg_(std::move(cfg)),
      samples_(std::move(samples)),
      split_(split_samples(samples_.size(), cfg_.labeled_fraction, cfg_.seed)),
      models_(build_models(cfg_)),
      opt_(Optimizers::create(models_, cfg_)),
      rng_(Rng(cfg_.seed).derive(0x545241494eULL)) {
  cfg_.validate();
  for (const Sample& s : samples_) {
    if (!s.label) fail(ErrorKind::kValidation, "training sample " + s.id + " has no label for click simulation");
  }
}

void Trainer::apply_seg_grads(const SegGradients& g) {
  opt_.value.step(models_.seg_params, g.value);
  opt_.policy.step(models_.seg_params, g.policy);
}

TrainLogRecord Trainer::run_epoch() {
  const int T = cfg_.episode.horizon;
  TrainLogRecord rec;
  rec.epoch = epoch_ + 1;
  rec.delta = cfg_.delta.at(epoch_);
  rec.dice_per_step.assign(T, 0.0);

  std::vector<std::size_t> order = split_.labeled;
  for (std::size_t i = order.size(); i-- > 1;) {
    std::swap(order[i], order[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i)))]);
  }

  auto push_seg = [this](SegGradients g) {
    if (pending_seg_) {
      accumulate(pending_seg_->value, g.value);
      accumulate(pending_seg_->policy, g.policy);
    } else {
      pending_seg_ = std::move(g);
    }
    if (++pending_seg_count_ >= cfg_.accumulate_episodes) {
      apply_seg_grads(*pending_seg_);
      pending_seg_.reset();
      pending_seg_count_ = 0;
    }
  };
  auto push_conf = [this](NamedTensorSet g) {
    if (pending_conf_) {
      accumulate(*pending_conf_, g);
    } else {
      pending_conf_ = std::move(g);
    }
    if (++pending_conf_count_ >= cfg_.accumulate_episodes) {
      opt_.conf.step(models_.conf_params, *pending_conf_);
      pending_conf_.reset();
      pending_conf_count_ = 0;
    }
  };

  double mask_on = 0.0, mask_total = 0.0;
  int seg_updates = 0;
  for (std::size_t idx : order) {
    Sample s = cfg_.augment ? augment(samples_[idx], rng_) : samples_[idx];
    Trace trace = rollout_episode(models_, s, cfg_, rng_);
    for (int t = 0; t < T; ++t) {
      const StepRecord& st = trace.steps[t];
      rec.dice_per_step[t] += dice(binarize(st.prob_next), *s.label);
      rec.misunderstanding_rate += misunderstanding_rate(st.state.prob, st.prob_next, *s.label) / T;
    }
    // Both gradient sets come from the same (pre-update) parameters; the
    // value step is applied first.
    SegGradients sg = segmentation_gradients(models_, trace, trace_advantages(trace, cfg_));
    ConfGradients cg = confidence_gradients(models_, trace);
    rec.value_loss += sg.value_loss;
    rec.policy_loss += sg.policy_loss;
    rec.conf_loss += cg.loss;
    rec.conf_accuracy += cg.accuracy;
    ++seg_updates;
    ++rec.labeled_episodes;
    push_seg(std::move(sg));
    push_conf(std::move(cg.grads));

    if (!split_.unlabeled.empty()) {
      const std::size_t u = split_.unlabeled[unlabeled_cursor_ % split_.unlabeled.size()];
      ++unlabeled_cursor_;
      Sample us = cfg_.augment ? augment(samples_[u], rng_) : samples_[u];
      Trace ut = rollout_unlabeled(models_, us.image, *us.label, cfg_, rec.delta, rng_);
      for (const StepRecord& st : ut.steps) {
        mask_on += static_cast<double>(st.mask->count());
        mask_total += static_cast<double>(st.mask->size());
      }
      SegGradients ug = segmentation_gradients(models_, ut, trace_advantages(ut, cfg_));
      rec.value_loss += ug.value_loss;
      rec.policy_loss += ug.policy_loss;
      ++seg_updates;
      ++rec.unlabeled_episodes;
      push_seg(std::move(ug));
    }
  }
  // Flush partial accumulations so checkpoints never carry pending gradients.
  if (pending_seg_) {
    apply_seg_grads(*pending_seg_);
    pending_seg_.reset();
    pending_seg_count_ = 0;
  }
  if (pending_conf_) {
    opt_.conf.step(models_.conf_params, *pending_conf_);
    pending_conf_.reset();
    pending_conf_count_ = 0;
  }

  const double nl = std::max(1, rec.labeled_episodes);
  for (double& d : rec.dice_per_step) d /= nl;
  rec.misunderstanding_rate /= nl;
  rec.conf_loss /= nl;
  rec.conf_accuracy /= nl;
  rec.value_loss /= std::max(1, seg_updates);
  rec.policy_loss /= std::max(1, seg_updates);
  rec.unlabeled_mask_fraction = mask_total > 0.0 ? mask_on / mask_total : 0.0;
  ++epoch_;
  log_.push_back(rec);
  return rec;
}

namespace {

constexpr const char* kSegPrefix = "seg/";
constexpr const char* kConfPrefix = "conf/";

void put_params(NamedTensorSet& out, const NamedTensorSet& params, const std::string& prefix) {
  for (const auto& [name, t] : params) out.insert(prefix + name, t);
}

void take_params(const NamedTensorSet& in, NamedTensorSet& params, const std::string& prefix) {
  for (auto& [name, t] : params) {
    const std::string key = prefix + name;
    if (!in.contains(key)) fail(ErrorKind::kValidation, "checkpoint lacks tensor " + key);
    const Tensor& src = in.at(key);
    if (src.shape != t.shape) fail(ErrorKind::kValidation, "checkpoint tensor shape differs: " + key);
    t = src;
  }
}

nlohmann::json config_without_epochs(const TrainConfig& c) {
  nlohmann::json j = c;
  j.erase("epochs");
  j.erase("eval_every");
  j.erase("checkpoint_every");
  j.erase("workers");
  return j;
}

}  // namespace

Checkpoint models_checkpoint(const Models& m, const nlohmann::json& meta) {
  Checkpoint ck;
  ck.meta = meta;
  ck.meta["seg_spec"] = m.seg.spec().to_json();
  ck.meta["conf_spec"] = m.conf.spec().to_json();
  put_params(ck.tensors, m.seg_params, kSegPrefix);
  put_params(ck.tensors, m.conf_params, kConfPrefix);
  return ck;
}

Models load_models(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("widths")) fail(ErrorKind::kValidation, "checkpoint has no architecture record");
  nn::NetWidths widths;
  try {
    widths = ckpt.meta.at("widths").get<nn::NetWidths>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::kValidation, "checkpoint architecture record is malformed");
  }
  Models m{nn::SegNet(nn::SegNetSpec::from_widths(widths)), nn::ConfNet(nn::ConfNetSpec::from_widths(widths)),
           {}, {}};
  if (ckpt.meta.contains("seg_spec") && ckpt.meta.at("seg_spec") != m.seg.spec().to_json()) {
    fail(ErrorKind::kValidation, "checkpoint segmentation architecture does not match its widths");
  }
  m.seg_params = m.seg.zero_params();
  m.conf_params = m.conf.zero_params();
  take_params(ckpt.tensors, m.seg_params, kSegPrefix);
  take_params(ckpt.tensors, m.conf_params, kConfPrefix);
  return m;
}

Checkpoint Trainer::checkpoint() const {
  nlohmann::json meta;
  meta["kind"] = "train";
  meta["config"] = cfg_;
  meta["widths"] = cfg_.widths;
  meta["epoch"] = epoch_;
  meta["rng"] = rng_.state();
  meta["unlabeled_cursor"] = unlabeled_cursor_;
  meta["adam_steps"] = {{"value", opt_.value.steps()}, {"policy", opt_.policy.steps()}, {"conf", opt_.conf.steps()}};
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : samples_) ids.push_back(s.id);
  meta["sample_ids"] = ids;
  meta["log"] = log_;
  Checkpoint ck = models_checkpoint(models_, meta);
  opt_.value.save(ck.tensors, "adam/value/");
  opt_.policy.save(ck.tensors, "adam/policy/");
  opt_.conf.save(ck.tensors, "adam/conf/");
  return ck;
}

void Trainer::restore(const Checkpoint& ckpt) {
  const auto& meta = ckpt.meta;
  if (meta.value("kind", std::string()) != "train") fail(ErrorKind::kValidation, "not a training checkpoint");
  TrainConfig saved = meta.at("config").get<TrainConfig>();
  if (config_without_epochs(saved) != config_without_epochs(cfg_)) {
    fail(ErrorKind::kValidation, "checkpoint was written with a different training configuration");
  }
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : samples_) ids.push_back(s.id);
  if (meta.at("sample_ids") != ids) fail(ErrorKind::kValidation, "checkpoint was written for a different dataset");
  take_params(ckpt.tensors, models_.seg_params, kSegPrefix);
  take_params(ckpt.tensors, models_.conf_params, kConfPrefix);
  const auto& steps = meta.at("adam_steps");
  opt_.value.load(ckpt.tensors, "adam/value/", steps.at("value").get<long>());
  opt_.policy.load(ckpt.tensors, "adam/policy/", steps.at("policy").get<long>());
  opt_.conf.load(ckpt.tensors, "adam/conf/", steps.at("conf").get<long>());
  rng_.set_state(meta.at("rng").get<std::string>());
  epoch_ = meta.at("epoch").get<int>();
  unlabeled_cursor_ = meta.at("unlabeled_cursor").get<std::size_t>();
  log_ = meta.at("log").get<std::vector<TrainLogRecord>>();
  pending_seg_.reset();
  pending_conf_.reset();
  pending_seg_count_ = pending_conf_count_ = 0;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalConfig eval_config_from(const TrainConfig& cfg) {
  EvalConfig e;
  e.episode = cfg.episode;
  e.schedule = cfg.schedule;
  e.hint_kernel = cfg.hint_kernel;
  e.seed = cfg.seed;
  e.workers = cfg.workers;
  return e;
}

Rng evaluation_rng(std::uint64_t seed, std::size_t index) {
  return Rng(seed).derive(0x4556414cULL).derive(static_cast<std::uint64_t>(index));
}

StepReport make_report(int step, const EngineStep& st, const EpisodeState& before, const BinaryMask& label,
                       const EpisodeConfig& ep) {
  StepReport r;
  r.step = step;
  const BinaryMask pred = binarize(st.next.prob);
  r.dice = dice(pred, label);
  if (pred.count() > 0 && label.count() > 0) r.assd = assd(pred, label);
  r.misunderstanding_rate = misunderstanding_rate(before.prob, st.next.prob, label);
  r.reward_sum = self_adaptive_reward(gain_map(before.prob, st.next.prob, label), st.conf.confidence, ep).total;
  return r;
}

namespace {

EvalSample evaluate_one(const Models& m, const Sample& s, std::size_t index, const EvalConfig& cfg) {
  if (!s.label) fail(ErrorKind::kInvalidArgument, "evaluation sample " + s.id + " has no label");
  const BinaryMask& gt = *s.label;
  Rng rng = evaluation_rng(cfg.seed, index);
  EvalSample out;
  out.id = s.id;
  EpisodeState state = EpisodeState::initial(s.image);
  for (int t = 0; t < cfg.episode.horizon; ++t) {
    const auto points =
        select_hints(gt, binarize(state.prob), cfg.schedule.at_step(t), rng, cfg.schedule.perturb_radius);
    add_hints(state, points, cfg.hint_kernel);
    EngineStep st = engine_step(m, state, SampleMode::kArgmax, rng);
    out.steps.push_back(make_report(t + 1, st, state, gt, cfg.episode));
    out.conf_accuracy += directional_accuracy(st.conf.confidence, confidence_target(st.actions, gt));
    state = std::move(st.next);
  }
  out.conf_accuracy /= std::max(1, cfg.episode.horizon);
  return out;
}

}  // namespace

EvalResult evaluate(const Models& m, const std::vector<Sample>& samples, const EvalConfig& cfg) {
  cfg.episode.validate();
  cfg.schedule.validate(cfg.episode.horizon);
  EvalResult res;
  res.samples.resize(samples.size());
  const int workers = std::max(1, std::min<int>(cfg.workers, static_cast<int>(samples.size())));
  if (workers <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) res.samples[i] = evaluate_one(m, samples[i], i, cfg);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i; (i = next.fetch_add(1)) < samples.size();) {
            res.samples[i] = evaluate_one(m, samples[i], i, cfg);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<std::vector<StepReport>> per;
  for (const auto& s : res.samples) {
    per.push_back(s.steps);
    res.conf_accuracy += s.conf_accuracy;
  }
  if (!samples.empty()) res.conf_accuracy /= static_cast<double>(samples.size());
  res.summary = summarize(per);
  return res;
}

// ---------------------------------------------------------------------------
// Driver

std::vector<Sample> load_samples(const std::filesystem::path& manifest) {
  std::vector<Sample> out;
  for (const auto& e : read_manifest(manifest)) out.push_back(load_sample(e));
  return out;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + p.string());
    out << text;
    if (!out) fail(ErrorKind::kIo, "failed writing " + p.string());
  }
  std::filesystem::rename(tmp, p);
}

}  // namespace

std::vector<TrainLogRecord> train(const std::filesystem::path& manifest, const TrainConfig& cfg,
                                  const TrainOptions& opts) {
  cfg.validate();
  std::vector<Sample> samples = load_samples(manifest);
  std::vector<Sample> eval_samples;
  if (opts.eval_manifest) eval_samples = load_samples(*opts.eval_manifest);
  std::filesystem::create_directories(opts.out_dir / "checkpoints");

  Trainer trainer(cfg, std::move(samples));
  if (opts.resume) trainer.restore(read_checkpoint(*opts.resume));

  auto write_log = [&] {
    std::string text;
    for (const auto& r : trainer.log()) text += nlohmann::json(r).dump() + "\n";
    write_text(opts.out_dir / "train_log.jsonl", text);
  };

  while (trainer.epochs_done() < cfg.epochs) {
    const TrainLogRecord rec = trainer.run_epoch();
    write_log();
    const int e = trainer.epochs_done();
    const Checkpoint ck = trainer.checkpoint();
    write_checkpoint(ck, opts.out_dir / "last.ckpt");
    if (cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", e);
      write_checkpoint(ck, opts.out_dir / "checkpoints" / name);
    }
    if (cfg.eval_every > 0 && e % cfg.eval_every == 0 && !eval_samples.empty()) {
      const EvalResult r = evaluate(trainer.models(), eval_samples, eval_config_from(cfg));
      char name[64];
      std::snprintf(name, sizeof name, "eval_epoch_%04d.csv", e);
      write_text(opts.out_dir / name, summary_csv(r.summary));
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  write_log();
  write_checkpoint(trainer.checkpoint(), opts.out_dir / "model.ckpt");
  return trainer.log();
}

}  // namespace mecca
