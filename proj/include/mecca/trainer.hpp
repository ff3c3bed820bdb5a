#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mecca/confidence.hpp"
#include "mecca/env.hpp"
#include "mecca/expert.hpp"
#include "mecca/io.hpp"
#include "mecca/metrics.hpp"
#include "mecca/neural.hpp"
#include "mecca/synthgen.hpp"

namespace mecca {

struct TrainConfig {
  int epochs = 200;
  double lr = 1e-4;
  double conf_lr = 1e-4;
  EpisodeConfig episode;
  HintSchedule schedule;
  HintKernel hint_kernel;
  DeltaSchedule delta;
  double labeled_fraction = 1.0;
  std::uint64_t seed = 0;
  AdvantageMode advantage_mode = AdvantageMode::kPerVoxel;
  int eval_every = 0;           // epochs between held-out evaluations; 0 = never
  int checkpoint_every = 10;    // epochs between numbered checkpoints; 0 = final only
  int accumulate_episodes = 1;  // episodes per optimizer step
  bool augment = true;
  int workers = 1;              // evaluation threads
  nn::NetWidths widths;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Both networks and their parameters.
struct Models {
  nn::SegNet seg;
  nn::ConfNet conf;
  NamedTensorSet seg_params;
  NamedTensorSet conf_params;

  static Models create(const nn::NetWidths& widths, Rng& rng);
};

/// Adds clicks to the state's hint map (max-combine).
void add_hints(EpisodeState& state, const std::vector<HintPoint>& points, const HintKernel& kernel);

/// One refinement step from a state whose hint map is already current.
struct EngineStep {
  nn::SegNet::Output seg;
  ActionMap actions;
  nn::ConfNet::Output conf;  // C(s, a)
  EpisodeState next;
};

EngineStep engine_step(const Models& m, const EpisodeState& state, SampleMode mode, Rng& rng);

struct StepRecord {
  EpisodeState state;  // s^(t), hints for this step already merged
  std::vector<HintPoint> hints;
  nn::SegNet::Output seg;
  ActionMap actions;
  nn::ConfNet::Output conf;
  Volume prob_next;
  BinaryMask target;                // ground truth, or the simulated label
  std::optional<BinaryMask> mask;   // gradient mask (unlabeled episodes)
  Volume gain;
  RewardMap reward;
};

struct Trace {
  bool labeled = true;
  std::vector<StepRecord> steps;

  std::vector<Volume> values() const;
  std::vector<RewardMap> rewards() const;
};

/// Sampled-action episode against the ground truth.
Trace rollout_episode(const Models& m, const Sample& sample, const TrainConfig& cfg, Rng& rng);

/// Episode whose rewards and losses use the simulated label. `hint_source`
/// only places clicks; it never enters a loss.
Trace rollout_unlabeled(const Models& m, const Volume& image, const BinaryMask& hint_source,
                        const TrainConfig& cfg, double delta, Rng& rng);

struct SegGradients {
  NamedTensorSet value;   // d(value loss)
  NamedTensorSet policy;  // d(policy loss)
  double value_loss = 0.0;
  double policy_loss = 0.0;
};

/// Advantages per step from the trace's rewards and value estimates.
std::vector<Volume> trace_advantages(const Trace& trace, const TrainConfig& cfg);

/// Value loss mean(M * A^2) and policy loss -mean(M * log pi(a) * A) with the
/// supplied advantages held constant. The mean runs over all voxels and steps.
SegGradients segmentation_gradients(const Models& m, const Trace& trace, const std::vector<Volume>& advantages);

struct ConfGradients {
  NamedTensorSet grads;
  double loss = 0.0;
  double accuracy = 0.0;  // directional accuracy of C(s, a) against g
};

/// Symmetric BCE summed over the episode's steps (labeled traces only).
ConfGradients confidence_gradients(const Models& m, const Trace& trace);

struct Optimizers {
  nn::Adam value;
  nn::Adam policy;
  nn::Adam conf;

  static Optimizers create(const Models& m, const TrainConfig& cfg);
};

struct SegUpdate {
  double value_loss = 0.0;
  double policy_loss = 0.0;
  std::vector<std::string> applied;  // optimizer names in application order
};

/// One Adam step on the value loss, then one on the policy loss.
SegUpdate update_segmentation(Models& m, Optimizers& opt, const Trace& trace, const TrainConfig& cfg);
double update_confidence(Models& m, Optimizers& opt, const Trace& trace);

struct TrainLogRecord {
  int epoch = 0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double conf_loss = 0.0;
  std::vector<double> dice_per_step;
  double misunderstanding_rate = 0.0;
  double conf_accuracy = 0.0;
  double delta = 0.0;
  double unlabeled_mask_fraction = 0.0;
  int labeled_episodes = 0;
  int unlabeled_episodes = 0;

  friend bool operator==(const TrainLogRecord&, const TrainLogRecord&) = default;
};

void to_json(nlohmann::json& j, const TrainLogRecord& r);
void from_json(const nlohmann::json& j, TrainLogRecord& r);

/// Deterministic labeled/unlabeled partition of sample indices.
struct Split {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};
Split split_samples(std::size_t count, double labeled_fraction, std::uint64_t seed);

/// Algorithm state across epochs. Unlabeled samples keep their label only to
/// place simulated clicks.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Sample> samples);

  /// Runs one epoch and returns its log record.
  TrainLogRecord run_epoch();

  int epochs_done() const { return epoch_; }
  const TrainConfig& config() const { return cfg_; }
  const Models& models() const { return models_; }
  Models& models() { return models_; }
  const std::vector<TrainLogRecord>& log() const { return log_; }
  const Split& split() const { return split_; }

  Checkpoint checkpoint() const;
  /// Restores parameters, optimizer moments, RNG and log; the configuration
  /// and sample list must match the ones this trainer was built with.
  void restore(const Checkpoint& ckpt);

 private:
  void apply_seg_grads(const SegGradients& g);

  TrainConfig cfg_;
  std::vector<Sample> samples_;
  Split split_;
  Models models_;
  Optimizers opt_;
  Rng rng_;
  int epoch_ = 0;
  std::size_t unlabeled_cursor_ = 0;
  std::vector<TrainLogRecord> log_;
  // Gradient accumulation across episodes.
  std::optional<SegGradients> pending_seg_;
  std::optional<NamedTensorSet> pending_conf_;
  int pending_seg_count_ = 0;
  int pending_conf_count_ = 0;
};

/// Parameters for inference loaded from a checkpoint file.
Models load_models(const Checkpoint& ckpt);
Checkpoint models_checkpoint(const Models& m, const nlohmann::json& meta);

struct EvalConfig {
  EpisodeConfig episode;
  HintSchedule schedule;
  HintKernel hint_kernel;
  std::uint64_t seed = 0;
  int workers = 1;
};

EvalConfig eval_config_from(const TrainConfig& cfg);

/// Click stream for the sample at `index` during evaluation.
Rng evaluation_rng(std::uint64_t seed, std::size_t index);

struct EvalSample {
  std::string id;
  std::vector<StepReport> steps;
  double conf_accuracy = 0.0;

  friend bool operator==(const EvalSample&, const EvalSample&) = default;
};

struct EvalResult {
  std::vector<EvalSample> samples;
  std::vector<StepSummary> summary;
  double conf_accuracy = 0.0;  // mean over samples and steps
};

/// Argmax-mode rollouts with simulated clicks. Samples must be labeled.
EvalResult evaluate(const Models& m, const std::vector<Sample>& samples, const EvalConfig& cfg);

/// Step report for one engine step, given the state before and after.
StepReport make_report(int step, const EngineStep& st, const EpisodeState& before, const BinaryMask& label,
                       const EpisodeConfig& ep);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::optional<std::filesystem::path> eval_manifest;
  /// Called after every epoch (progress reporting).
  std::function<void(const TrainLogRecord&)> on_epoch;
};

/// Full training run over a manifest. Writes train_log.jsonl, checkpoints
/// and model.ckpt under out_dir. Returns the log.
std::vector<TrainLogRecord> train(const std::filesystem::path& manifest, const TrainConfig& cfg,
                                  const TrainOptions& opts);

std::vector<Sample> load_samples(const std::filesystem::path& manifest);

}  // namespace mecca
