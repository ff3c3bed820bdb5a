// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is non-zero when any criterion fails.

#include <httplib.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../common/grad_cases.hpp"
#include "../common/http_driver.hpp"
#include "../common/oracles.hpp"
#include "mecca/confidence.hpp"
#include "mecca/error.hpp"
#include "mecca/guide.hpp"
#include "mecca/io.hpp"
#include "mecca/metrics.hpp"
#include "mecca/trainer.hpp"

using namespace mecca;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// Collects named sub-checks; the criterion passes when all of them do.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok && failed_.size() < 8) failed_.push_back(what);
    if (!ok) ++bad_;
  }
  bool ok() const { return bad_ == 0; }
  int total() const { return total_; }
  std::string failures() const {
    std::string s;
    for (const auto& f : failed_) s += (s.empty() ? "" : "; ") + f;
    return s;
  }

 private:
  int total_ = 0;
  int bad_ = 0;
  std::vector<std::string> failed_;
};

int g_failures = 0;

void verdict(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++g_failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

// Runs a criterion body; an exception counts as a failure of that criterion.
void criterion(const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    verdict(name, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Formula oracles

double clamp_p(double p) { return std::clamp(p, kLogEps, 1.0 - kLogEps); }
double ce(double p, int y) { return y ? -std::log(clamp_p(p)) : -std::log(1.0 - clamp_p(p)); }

Volume random_probs(Shape3 s, Rng& rng) {
  Volume v(s);
  for (std::size_t i = 0; i < v.size(); ++i) {
    // Include the saturated ends, which the action set reaches often.
    const double u = rng.uniform();
    v[i] = u < 0.1 ? 0.0f : u < 0.2 ? 1.0f : static_cast<float>(rng.uniform());
  }
  return v;
}

ActionMap random_actions(Shape3 s, Rng& rng) {
  std::vector<std::uint8_t> idx(s.voxels());
  for (auto& a : idx) a = static_cast<std::uint8_t>(rng.uniform_int(0, kActionCount - 1));
  return ActionMap::from_indices(s, std::move(idx));
}

void formula_oracles() {
  const auto t0 = Clock::now();
  Checks c;
  Rng rng(2024);

  // Probability update with clipping.
  {
    const Shape3 s{1, 1, 4};
    EpisodeState st = EpisodeState::initial(Volume(s, 0.0f));
    st.prob = Volume(s, std::vector<float>{0.5f, 0.9f, 0.05f, 1.0f});
    const ActionMap a = ActionMap::from_indices(s, {5, 5, 2, 0});  // +0.4 +0.4 -0.1 -0.4
    const EpisodeState n = apply_actions(st, a);
    c.expect(n.prob[0] == 0.5f + 0.4f && n.prob[1] == 1.0f && n.prob[2] == 0.0f && n.prob[3] == 1.0f - 0.4f,
             "clip examples");
    c.expect(n.step == 1 && n.image == st.image && n.hint == st.hint, "state carry-over");
    for (int trial = 0; trial < 100; ++trial) {
      Volume v = oracle::random_volume(Shape3{4, 4, 4}, rng, -2.0f, 3.0f);
      const Volume once = elementwise_clip(v, 0.0f, 1.0f);
      bool in_range = true;
      for (float x : once.values()) in_range &= x >= 0.0f && x <= 1.0f;
      c.expect(in_range && elementwise_clip(once, 0.0f, 1.0f) == once, "clip idempotence");
    }
  }

  // Gain and cross-entropy against direct arithmetic; telescoping over episodes.
  {
    const Shape3 s{4, 4, 4};
    double worst = 0.0, worst_tel = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Volume p = random_probs(s, rng), q = random_probs(s, rng);
      const BinaryMask y = oracle::random_mask(s, rng);
      const Volume x = cross_entropy_map(p, y);
      const Volume g = gain_map(p, q, y);
      for (std::size_t i = 0; i < p.size(); ++i) {
        worst = std::max(worst, std::abs(x[i] - ce(p[i], y[i])));
        worst = std::max(worst, std::abs(g[i] - (ce(p[i], y[i]) - ce(q[i], y[i]))));
      }
      // Random five-step episode: gains telescope to X(p0) - X(p5).
      EpisodeState st = EpisodeState::initial(Volume(s));
      st.prob = random_probs(s, rng);
      const Volume start = st.prob;
      std::vector<double> sum(s.voxels(), 0.0);
      for (int t = 0; t < 5; ++t) {
        const EpisodeState n = apply_actions(st, random_actions(s, rng));
        const Volume gt = gain_map(st.prob, n.prob, y);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += gt[i];
        st = n;
      }
      for (std::size_t i = 0; i < sum.size(); ++i)
        worst_tel = std::max(worst_tel, std::abs(sum[i] - (ce(start[i], y[i]) - ce(st.prob[i], y[i]))));
    }
    c.expect(worst <= 1e-6, "gain/CE max error " + fmt(worst));
    c.expect(worst_tel <= 1e-5, "telescoping max error " + fmt(worst_tel));
  }

  // Self-adaptive reward with the published constants.
  {
    const EpisodeConfig ep;
    c.expect(ep.alpha == 0.8 && ep.beta == 1.0, "reward constants");
    const Shape3 s{4, 4, 4};
    double worst = 0.0;
    bool signs = true;
    for (int trial = 0; trial < 100; ++trial) {
      const Volume gain = oracle::random_volume(s, rng, -3.0f, 3.0f);
      const Volume conf = oracle::random_volume(s, rng, 0.0f, 1.0f);
      const RewardMap r = self_adaptive_reward(gain, conf, ep);
      double total = 0.0;
      for (std::size_t i = 0; i < gain.size(); ++i) {
        const double expect = 0.8 * (2.0 - conf[i]) * gain[i];
        worst = std::max(worst, std::abs(r.reward[i] - expect));
        total += r.reward[i];
        const int sr = (r.reward[i] > 0) - (r.reward[i] < 0), sg = (gain[i] > 0) - (gain[i] < 0);
        signs &= sr == sg;
      }
      worst = std::max(worst, std::abs(r.total - total) / std::max(1.0, std::abs(total)));
    }
    c.expect(worst <= 1e-6, "reward max error " + fmt(worst));
    c.expect(signs, "reward sign follows gain");
  }

  // Confidence target truth table over the six actions and both labels.
  {
    const Shape3 s{1, 1, kActionCount};
    std::vector<std::uint8_t> idx(kActionCount);
    for (int a = 0; a < kActionCount; ++a) idx[a] = static_cast<std::uint8_t>(a);
    const ActionMap acts = ActionMap::from_indices(s, idx);
    const ActionMap neg = acts.negated();
    int cases = 0;
    for (int y = 0; y <= 1; ++y) {
      const BinaryMask label(s, static_cast<std::uint8_t>(y));
      const BinaryMask g = confidence_target(acts, label);
      const BinaryMask gn = confidence_target(neg, label);
      for (int a = 0; a < kActionCount; ++a) {
        const int expect = (kActionValues[a] > 0) == (y == 1) ? 1 : 0;
        c.expect(g[a] == expect, "target a=" + fmt(kActionValues[a]) + " y=" + std::to_string(y));
        c.expect(gn[a] == 1 - g[a], "target symmetry");
        ++cases;
      }
    }
    c.expect(cases == 12, "truth table size");
  }

  // Gradient mask and the threshold schedule.
  {
    const Shape3 s{1, 1, 6};
    const Volume conf(s, std::vector<float>{0.0f, 0.1f, 0.5f, 0.84f, 0.9f, 1.0f});
    const BinaryMask m = gradient_mask(conf, 0.85);
    const std::vector<std::uint8_t> expect{1, 1, 0, 0, 1, 1};
    c.expect(std::vector<std::uint8_t>(m.data().begin(), m.data().end()) == expect, "mask truth table");
    const DeltaSchedule d;
    c.expect(d.at(0) == 0.85, "delta(0) = 0.85");
    c.expect(std::abs(d.at(560) - 0.99) < 1e-12 && d.at(559) < 0.99 && d.at(10000) == 0.99,
             "delta saturates at epoch 560");
  }

  // Dice and ASSD against brute force.
  {
    const Shape3 s{12, 12, 12};
    double worst_assd = 0.0;
    bool dice_exact = true;
    for (int pair = 0; pair < 200; ++pair) {
      const BinaryMask a = pair % 2 ? oracle::random_blob_mask(s, rng) : oracle::random_mask(s, rng, 0.2);
      const BinaryMask b = oracle::random_blob_mask(s, rng);
      dice_exact &= dice(a, b) == oracle::dice(a, b);
      worst_assd = std::max(worst_assd, std::abs(assd(a, b) - oracle::assd(a, b)));
    }
    c.expect(dice_exact, "dice exact");
    c.expect(worst_assd <= 1e-5, "assd max error " + fmt(worst_assd));
  }

  // Discounted per-voxel returns in both advantage modes.
  {
    const Shape3 s{4, 4, 4};
    const EpisodeConfig ep;
    double worst = 0.0, worst_const = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<RewardMap> rewards(5);
      std::vector<std::vector<double>> raw(5), mean(5);
      for (int t = 0; t < 5; ++t) {
        rewards[t].reward = oracle::random_volume(s, rng, -1.0f, 1.0f);
        double tot = 0.0;
        for (float r : rewards[t].reward.values()) {
          raw[t].push_back(r);
          tot += r;
        }
        rewards[t].total = tot;
        mean[t].assign(s.voxels(), tot / static_cast<double>(s.voxels()));
      }
      const auto per = discounted_returns(rewards, ep, AdvantageMode::kPerVoxel);
      const auto avg = discounted_returns(rewards, ep, AdvantageMode::kMeanReward);
      const auto ref_per = oracle::returns(raw, ep.gamma), ref_avg = oracle::returns(mean, ep.gamma);
      for (int t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < s.voxels(); ++i) {
          worst = std::max(worst, std::abs(per[t][i] - ref_per[t][i]));
          worst = std::max(worst, std::abs(avg[t][i] - ref_avg[t][i]));
        }
      // Spatially constant rewards: the modes agree.
      for (int t = 0; t < 5; ++t) {
        const float v = static_cast<float>(rng.uniform(-1.0, 1.0));
        rewards[t].reward = Volume(s, v);
        rewards[t].total = static_cast<double>(v) * static_cast<double>(s.voxels());
      }
      const auto a = discounted_returns(rewards, ep, AdvantageMode::kPerVoxel);
      const auto b = discounted_returns(rewards, ep, AdvantageMode::kMeanReward);
      for (int t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < s.voxels(); ++i) worst_const = std::max(worst_const, std::abs(static_cast<double>(a[t][i]) - b[t][i]));
    }
    c.expect(worst <= 1e-6, "returns max error " + fmt(worst));
    c.expect(worst_const <= 1e-6, "modes differ on constant rewards by " + fmt(worst_const));
  }

  const double secs = seconds_since(t0);
  c.expect(secs < 60.0, "runtime " + fmt(secs) + " s");
  verdict("formula oracles", c.ok(),
          c.ok() ? std::to_string(c.total()) + " checks in " + fmt(secs, 3) + " s" : c.failures());
}

// ---------------------------------------------------------------------------
// Gradient checks

void gradient_checks() {
  const auto t0 = Clock::now();
  Checks c;
  std::string detail;
  const std::pair<const char*, oracle::LossCheck (*)(std::uint64_t)> cases[] = {
      {"value", oracle::check_value_loss}, {"policy", oracle::check_policy_loss},
      {"confidence", oracle::check_confidence_loss}};
  std::uint64_t seed = 11;
  for (const auto& [name, fn] : cases) {
    const oracle::LossCheck r = fn(seed++);
    const auto& g = r.grad;
    c.expect(g.rel_err < oracle::kGradTolerance, std::string(name) + " rel_err " + fmt(g.rel_err));
    c.expect(g.analytic_norm > 1e-3, std::string(name) + " gradient vanishes");
    c.expect(g.checked + g.negligible > g.kinked, std::string(name) + " too many probes at kinks");
    c.expect(std::abs(r.loss - r.oracle_loss) <= 1e-5 * std::max(1.0, std::abs(r.oracle_loss)),
             std::string(name) + " loss value");
    detail += std::string(detail.empty() ? "" : ", ") + name + " " + fmt(g.rel_err, 2) + " (" +
              std::to_string(g.checked) + " probes)";
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 300.0, "runtime " + fmt(secs) + " s");
  verdict("gradient checks (h=1e-3, rel err < 1e-3)", c.ok(),
          c.ok() ? detail + " in " + fmt(secs, 3) + " s" : c.failures());
}

// ---------------------------------------------------------------------------
// Supervoxel guide

bool label_connected(const SupervoxelLabels& sv, int label, std::size_t size) {
  const Shape3& s = sv.shape;
  std::size_t seed = 0;
  while (sv.labels[seed] != label) ++seed;
  std::vector<char> seen(sv.labels.size(), 0);
  std::vector<std::size_t> stack{seed};
  seen[seed] = 1;
  std::size_t reached = 0;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    ++reached;
    const int x = static_cast<int>(i % s.width), y = static_cast<int>(i / s.width % s.height),
              z = static_cast<int>(i / (static_cast<std::size_t>(s.width) * s.height));
    const int nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
    for (const auto& n : nb) {
      if (!s.contains(n[0], n[1], n[2])) continue;
      const std::size_t j = s.index(n[0], n[1], n[2]);
      if (!seen[j] && sv.labels[j] == label) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return reached == size;
}

void guide_checks() {
  Checks c;
  Rng rng(77);
  const GuideConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const Shape3 s{static_cast<int>(rng.uniform_int(4, 12)), static_cast<int>(rng.uniform_int(4, 16)),
                   static_cast<int>(rng.uniform_int(4, 16))};
    const Volume img = oracle::random_volume(s, rng, -2.0f, 2.0f);
    const int n = static_cast<int>(rng.uniform_int(1, 100));
    const SupervoxelLabels sv = slic_supervoxels(img, n, cfg.compactness, cfg.spacing);
    std::vector<std::size_t> sizes(std::max(sv.count, 0), 0);
    bool in_range = sv.labels.size() == s.voxels() && sv.count >= 1;
    for (int l : sv.labels) {
      if (l < 0 || l >= sv.count) {
        in_range = false;
        break;
      }
      ++sizes[l];
    }
    c.expect(in_range, "labels cover the volume (trial " + std::to_string(trial) + ")");
    if (!in_range) continue;
    for (int l = 0; l < sv.count; ++l) {
      c.expect(sizes[l] > 0, "empty label");
      if (sizes[l] > 0) c.expect(label_connected(sv, l, sizes[l]), "disconnected label");
    }
    // Region statistics against brute force.
    const Volume conf = oracle::random_volume(s, rng);
    const auto stats = region_stats(conf, sv);
    std::vector<double> sum(sv.count, 0.0);
    for (std::size_t i = 0; i < conf.size(); ++i) sum[sv.labels[i]] += conf[i];
    double worst = 0.0;
    for (int l = 0; l < sv.count; ++l)
      worst = std::max(worst, std::abs(stats[l].mean_conf - sum[l] / static_cast<double>(sizes[l])));
    c.expect(worst <= 1e-6, "region mean error " + fmt(worst));
    const auto top = rank_regions(conf, sv, cfg.top_k);
    c.expect(!top.empty() && top.front().mean_conf <= conf.mean() + 1e-9, "top region above global mean");
  }
  // Constant image on an evenly divisible volume: the regular grid, mirror symmetric.
  {
    const Shape3 s{8, 16, 16};
    const SupervoxelLabels sv = slic_supervoxels(Volume(s, 0.3f), 32, cfg.compactness, cfg.spacing);
    c.expect(sv.count == 32, "constant image count " + std::to_string(sv.count));
    bool grid = true;
    for (int z = 0; z < s.depth; ++z)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) grid &= sv.at(z, y, x) == sv.at(z / 4 * 4, y / 4 * 4, x / 4 * 4);
    c.expect(grid, "constant image gives 4x4x4 cells");
    for (int axis = 0; axis < 3; ++axis) {
      std::map<int, int> perm;
      std::set<int> image;
      bool consistent = true;
      for (int z = 0; z < s.depth; ++z)
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x) {
            const int b = sv.at(axis == 0 ? s.depth - 1 - z : z, axis == 1 ? s.height - 1 - y : y,
                                axis == 2 ? s.width - 1 - x : x);
            auto [it, fresh] = perm.emplace(sv.at(z, y, x), b);
            consistent &= it->second == b;
            if (fresh) image.insert(b);
          }
      c.expect(consistent && image.size() == perm.size(), "mirror symmetry axis " + std::to_string(axis));
    }
  }
  verdict("SLIC/guide properties", c.ok(), c.ok() ? std::to_string(c.total()) + " checks" : c.failures());
}

// ---------------------------------------------------------------------------
// Training

TrainConfig desk_config(int epochs, double labeled_fraction) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = 1;
  c.lr = 1e-3;
  c.conf_lr = 1e-3;
  c.labeled_fraction = labeled_fraction;
  c.eval_every = 0;
  c.widths.shared = {4, 4, 4};
  c.widths.head = {4, 4};
  c.widths.conf = {8, 8, 8, 8, 8, 8};
  return c;
}

struct Dataset {
  std::filesystem::path train;
  std::filesystem::path held;
};

Dataset make_data(const std::filesystem::path& dir) {
  GenDataOptions o;
  o.count = 40;
  o.shape = {16, 32, 32};
  o.seed = 7;
  Dataset d;
  d.train = dir / "train" / "manifest.json";
  if (!std::filesystem::exists(d.train)) generate_dataset(o, dir / "train");
  o.count = 10;
  o.seed = 1007;
  d.held = dir / "held" / "manifest.json";
  if (!std::filesystem::exists(d.held)) generate_dataset(o, dir / "held");
  return d;
}

// Trains, continuing from the run's own last checkpoint when one exists
// (resume is bit-exact).
std::vector<TrainLogRecord> run_training(const Dataset& data, const TrainConfig& cfg,
                                         const std::filesystem::path& out, const std::string& tag) {
  TrainOptions o;
  o.out_dir = out;
  if (std::filesystem::exists(out / "last.ckpt")) {
    const Checkpoint ck = read_checkpoint(out / "last.ckpt");
    const TrainConfig saved = ck.meta.at("config").get<TrainConfig>();
    TrainConfig a = saved, b = cfg;
    a.epochs = b.epochs = 0;
    if (nlohmann::json(a) == nlohmann::json(b) && ck.meta.at("epoch").get<int>() <= cfg.epochs) {
      o.resume = out / "last.ckpt";
      std::cerr << "[" << tag << "] resuming at epoch " << ck.meta.at("epoch").get<int>() << "\n";
    } else {
      std::filesystem::remove_all(out);
    }
  }
  const auto t0 = Clock::now();
  o.on_epoch = [&](const TrainLogRecord& r) {
    std::cerr << "[" << tag << "] epoch " << r.epoch << " dice5 " << fmt(r.dice_per_step.back()) << " mis "
              << fmt(r.misunderstanding_rate) << " conf_acc " << fmt(r.conf_accuracy) << " ("
              << fmt(seconds_since(t0), 4) << " s)" << std::endl;
  };
  return train(data.train, cfg, o);
}

struct RunResult {
  std::vector<TrainLogRecord> log;
  EvalResult eval;
  std::filesystem::path model;
};

RunResult train_and_evaluate(const Dataset& data, const TrainConfig& cfg, const std::filesystem::path& out,
                             const std::string& tag) {
  RunResult r;
  r.log = run_training(data, cfg, out, tag);
  r.model = out / "model.ckpt";
  r.eval = evaluate(load_models(read_checkpoint(r.model)), load_samples(data.held), eval_config_from(cfg));
  std::ofstream(out / "heldout_summary.csv") << summary_csv(r.eval.summary);
  return r;
}

// Accuracy of a predictor that always answers "confident", on the same
// held-out actions evaluation scores: the share of actions already pointing
// the right way.
double always_confident_accuracy(const Models& m, const std::vector<Sample>& samples, const EvalConfig& cfg) {
  double acc = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Rng rng = evaluation_rng(cfg.seed, i);
    EpisodeState state = EpisodeState::initial(samples[i].image);
    for (int t = 0; t < cfg.episode.horizon; ++t) {
      const auto pts = select_hints(*samples[i].label, binarize(state.prob), cfg.schedule.at_step(t), rng,
                                    cfg.schedule.perturb_radius);
      add_hints(state, pts, cfg.hint_kernel);
      EngineStep st = engine_step(m, state, SampleMode::kArgmax, rng);
      const BinaryMask g = confidence_target(st.actions, *samples[i].label);
      acc += static_cast<double>(g.count()) / static_cast<double>(g.size());
      ++n;
      state = std::move(st.next);
    }
  }
  return acc / std::max(1, n);
}

void training_checks(const Dataset& data, const std::filesystem::path& work, int epochs, RunResult& full) {
  const auto t0 = Clock::now();
  full = train_and_evaluate(data, desk_config(epochs, 1.0), work / "run_full", "full");
  const double full_secs = seconds_since(t0);
  const auto& s = full.eval.summary;

  criterion("training: held-out step-5 Dice - step-1 Dice >= +0.02", [&] {
    const double gain = s.back().dice_mean - s.front().dice_mean;
    std::string per;
    for (std::size_t t = 1; t < s.size(); ++t) per += (per.empty() ? "" : " ") + fmt(s[t].dice_delta, 3);
    verdict("training: held-out step-5 Dice - step-1 Dice >= +0.02", gain >= 0.02,
            "step1 " + fmt(s.front().dice_mean) + " step5 " + fmt(s.back().dice_mean) + " gain " + fmt(gain) +
                " (increments " + per + "; " + std::to_string(epochs) + " epochs in " + fmt(full_secs / 60, 3) +
                " min)");
  });

  criterion("training: final-epoch misunderstanding rate < epoch-1 rate", [&] {
    const double first = full.log.front().misunderstanding_rate, last = full.log.back().misunderstanding_rate;
    verdict("training: final-epoch misunderstanding rate < epoch-1 rate", last < first,
            "epoch 1 " + fmt(first) + " final " + fmt(last));
  });

  criterion("training: held-out confidence directional accuracy >= 0.70", [&] {
    const Models m = load_models(read_checkpoint(full.model));
    const double base = always_confident_accuracy(m, load_samples(data.held), eval_config_from(desk_config(epochs, 1.0)));
    verdict("training: held-out confidence directional accuracy >= 0.70", full.eval.conf_accuracy >= 0.70,
            "accuracy " + fmt(full.eval.conf_accuracy) + " (always-confident baseline " + fmt(base) + ")");
  });

  criterion("semi-supervised: |step-5 Dice(0.25 labeled) - step-5 Dice(all labeled)| <= 0.05", [&] {
    const RunResult semi = train_and_evaluate(data, desk_config(epochs, 0.25), work / "run_quarter", "quarter");
    const double a = full.eval.summary.back().dice_mean, b = semi.eval.summary.back().dice_mean;
    verdict("semi-supervised: |step-5 Dice(0.25 labeled) - step-5 Dice(all labeled)| <= 0.05",
            std::abs(a - b) <= 0.05,
            "all " + fmt(a) + " quarter " + fmt(b) + " gap " + fmt(std::abs(a - b)) + " (unlabeled mask fraction " +
                fmt(semi.log.back().unlabeled_mask_fraction) + ", quarter confidence loss " +
                fmt(semi.log.back().conf_loss) + "; 10 ln 2 = " + fmt(10 * std::log(2.0)) + " means a constant 0.5)");
  });
}

// ---------------------------------------------------------------------------
// Determinism and resume

void determinism_checks(const std::filesystem::path& work) {
  const auto dir = work / "determinism";
  std::filesystem::remove_all(dir);
  GenDataOptions o;
  o.count = 6;
  o.shape = {8, 16, 16};
  o.seed = 3;
  const auto manifest = generate_dataset(o, dir / "data");
  TrainConfig cfg = desk_config(4, 0.5);
  cfg.checkpoint_every = 0;
  auto run = [&](const std::string& name, int epochs, std::optional<std::filesystem::path> resume) {
    TrainConfig c = cfg;
    c.epochs = epochs;
    TrainOptions opts;
    opts.out_dir = dir / name;
    opts.resume = std::move(resume);
    return train(manifest, c, opts);
  };
  const auto a = run("a", 4, std::nullopt);
  const auto b = run("b", 4, std::nullopt);
  run("c", 2, std::nullopt);
  const auto c = run("c", 4, dir / "c" / "last.ckpt");
  const Checkpoint ka = read_checkpoint(dir / "a" / "model.ckpt");
  const Checkpoint kb = read_checkpoint(dir / "b" / "model.ckpt");
  const Checkpoint kc = read_checkpoint(dir / "c" / "model.ckpt");
  Checks k;
  k.expect(a == b, "repeat run log differs");
  k.expect(ka.tensors == kb.tensors, "repeat run parameters differ");
  k.expect(a == c, "resumed log differs");
  k.expect(ka.tensors == kc.tensors, "resumed parameters or optimizer moments differ");
  k.expect(ka.meta.at("rng") == kc.meta.at("rng"), "resumed RNG state differs");
  verdict("determinism & resume", k.ok(),
          k.ok() ? "two runs and a 2+2 epoch resume agree bit for bit (" + std::to_string(ka.tensors.size()) +
                       " tensors, " + std::to_string(a.size()) + " log records)"
                 : k.failures());
}

// ---------------------------------------------------------------------------
// Session server against evaluate()

void api_equivalence(const Dataset& data, const std::filesystem::path& model, const TrainConfig& cfg) {
  const auto entries = read_manifest(data.held);
  const auto samples = load_samples(data.held);
  const EvalConfig ec = eval_config_from(cfg);
  const EvalResult local = evaluate(load_models(read_checkpoint(model)), samples, ec);
  testing_http::LiveServer server;
  Checks k;
  int steps = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const testing_http::SampleFiles files{entries[i].image_path, *entries[i].label_path};
    const auto remote = testing_http::drive_episode(server.client(), files, model, *samples[i].label, ec, i);
    k.expect(remote.size() == local.samples[i].steps.size(), "step count");
    for (std::size_t t = 0; t < std::min(remote.size(), local.samples[i].steps.size()); ++t) {
      const std::string diff = testing_http::report_mismatch(remote[t], local.samples[i].steps[t]);
      k.expect(diff.empty(), samples[i].id + " step " + std::to_string(t + 1) + " " + diff);
      ++steps;
    }
  }
  verdict("API/engine equivalence", k.ok(),
          k.ok() ? std::to_string(steps) + " step reports over HTTP identical to evaluate()" : k.failures());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work = "acceptance_work";
  int epochs = 200;
  std::vector<std::string> only;
  app.add_option("--work-dir", work, "Scratch directory (training runs resume from it)")->capture_default_str();
  app.add_option("--epochs", epochs, "Training epochs for the desk-scale runs")->capture_default_str();
  app.add_option("--only", only, "Run a subset: formulas, gradients, guide, determinism, training, api");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](const std::string& s) { return only.empty() || std::find(only.begin(), only.end(), s) != only.end(); };

  const std::filesystem::path dir = work;
  std::filesystem::create_directories(dir);
  if (wanted("formulas")) criterion("formula oracles", formula_oracles);
  if (wanted("gradients")) criterion("gradient checks (h=1e-3, rel err < 1e-3)", gradient_checks);
  if (wanted("guide")) criterion("SLIC/guide properties", guide_checks);
  if (wanted("determinism")) criterion("determinism & resume", [&] { determinism_checks(dir); });
  if (wanted("training") || wanted("api")) {
    std::optional<Dataset> data;
    RunResult full;
    criterion("desk-scale training", [&] {
      data = make_data(dir / "data");
      if (wanted("training")) {
        training_checks(*data, dir, epochs, full);
      } else {
        full.log = run_training(*data, desk_config(epochs, 1.0), dir / "run_full", "full");
        full.model = dir / "run_full" / "model.ckpt";
      }
    });
    if (wanted("api")) {
      criterion("API/engine equivalence", [&] {
        if (!data || full.model.empty()) throw std::runtime_error("no trained model");
        api_equivalence(*data, full.model, desk_config(epochs, 1.0));
      });
    }
  }
  std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(g_failures) + " CRITERIA FAILED")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
