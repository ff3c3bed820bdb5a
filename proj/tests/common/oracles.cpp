#include "oracles.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>

namespace oracle {

using mecca::Tensor;
using mecca::nn::Activation;

Volume random_volume(Shape3 s, Rng& rng, float lo, float hi) {
  Volume v(s);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

BinaryMask random_mask(Shape3 s, Rng& rng, double p) {
  BinaryMask m(s);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform() < p ? 1 : 0;
  return m;
}

BinaryMask random_blob_mask(Shape3 s, Rng& rng) {
  BinaryMask m(s);
  const int boxes = static_cast<int>(rng.uniform_int(1, 3));
  for (int b = 0; b < boxes; ++b) {
    int lo[3], hi[3];
    const int ext[3] = {s.depth, s.height, s.width};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<int>(rng.uniform_int(0, ext[a] - 1));
      hi[a] = static_cast<int>(rng.uniform_int(lo[a], std::min(ext[a] - 1, lo[a] + ext[a] / 2)));
    }
    for (int z = lo[0]; z <= hi[0]; ++z)
      for (int y = lo[1]; y <= hi[1]; ++y)
        for (int x = lo[2]; x <= hi[2]; ++x) m.at(z, y, x) = 1;
  }
  return m;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  long inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    sa += a[i];
    sb += b[i];
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

std::vector<std::array<int, 3>> surface(const BinaryMask& m) {
  const Shape3& s = m.shape();
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        if (!m.at(z, y, x)) continue;
        const int nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
        bool edge = false;
        for (const auto& n : nb) edge = edge || !s.contains(n[0], n[1], n[2]) || !m.at(n[0], n[1], n[2]);
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

double assd(const BinaryMask& a, const BinaryMask& b) {
  const auto sa = surface(a), sb = surface(b);
  auto directed = [](const auto& from, const auto& to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      total += std::sqrt(best);
    }
    return total;
  };
  return (directed(sa, sb) + directed(sb, sa)) / static_cast<double>(sa.size() + sb.size());
}

std::vector<std::vector<double>> returns(const std::vector<std::vector<double>>& rewards, double gamma) {
  const std::size_t T = rewards.size();
  std::vector<std::vector<double>> g(T, std::vector<double>(T ? rewards[0].size() : 0, 0.0));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i)
      for (std::size_t k = t; k < T; ++k) g[t][i] += std::pow(gamma, static_cast<double>(k - t)) * rewards[k][i];
  return g;
}

Activation conv3d(const Activation& in, const Tensor& w, const Tensor& b, int dil) {
  const int co = w.shape[0], ci = w.shape[1], k = w.shape[2];
  const int r = k / 2;
  const Shape3& s = in.shape;
  Activation out(co, s);
  for (int o = 0; o < co; ++o)
    for (int z = 0; z < s.depth; ++z)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          double acc = b.data[o];
          for (int c = 0; c < ci; ++c)
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int zz = z + (kz - r) * dil, yy = y + (ky - r) * dil, xx = x + (kx - r) * dil;
                  if (!s.contains(zz, yy, xx)) continue;
                  acc += static_cast<double>(w.data[(((o * ci + c) * k + kz) * k + ky) * k + kx]) *
                         in.data[c * in.voxels() + s.index(zz, yy, xx)];
                }
          out.data[o * out.voxels() + s.index(z, y, x)] = static_cast<float>(acc);
        }
  return out;
}

namespace {

double clamped_log(double p) { return std::log(std::max(p, 1e-7)); }

void record(ReluPattern* pattern, const mecca::nn::ConvStack::Tape& tape) {
  if (!pattern) return;
  for (const auto& a : tape.outputs)
    for (float v : a.data) pattern->push_back(v > 0.0f);
}

void record(ReluPattern* pattern, const mecca::nn::SegNet::Output& out) {
  record(pattern, out.trunk_tape);
  record(pattern, out.policy_tape);
  record(pattern, out.value_tape);
}

}  // namespace

double value_loss(const mecca::Models& m, const mecca::Trace& trace, const std::vector<Volume>& returns,
                  ReluPattern* pattern) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& rec = trace.steps[t];
    const auto out = m.seg.forward(m.seg_params, rec.state.image, rec.state.prob, rec.state.hint);
    record(pattern, out);
    for (std::size_t i = 0; i < returns[t].size(); ++i) {
      const double mi = rec.mask ? (*rec.mask)[i] : 1.0;
      const double a = static_cast<double>(returns[t][i]) - out.value.data[i];
      total += mi * a * a;
    }
    n += returns[t].size();
  }
  return total / static_cast<double>(n);
}

double policy_loss(const mecca::Models& m, const mecca::Trace& trace, const std::vector<Volume>& advantages,
                   ReluPattern* pattern) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& rec = trace.steps[t];
    const auto out = m.seg.forward(m.seg_params, rec.state.image, rec.state.prob, rec.state.hint);
    record(pattern, out);
    const std::size_t N = advantages[t].size();
    for (std::size_t i = 0; i < N; ++i) {
      const double mi = rec.mask ? (*rec.mask)[i] : 1.0;
      // Softmax recomputed from the logits in double.
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < 6; ++k) mx = std::max(mx, static_cast<double>(out.policy_logits.data[k * N + i]));
      double z = 0.0;
      for (int k = 0; k < 6; ++k) z += std::exp(out.policy_logits.data[k * N + i] - mx);
      const int a = rec.actions.indices[i];
      const double p = std::exp(out.policy_logits.data[a * N + i] - mx) / z;
      total -= mi * clamped_log(p) * advantages[t][i];
    }
    n += N;
  }
  return total / static_cast<double>(n);
}

double confidence_loss(const mecca::Models& m, const mecca::Trace& trace, ReluPattern* pattern) {
  double total = 0.0;
  for (const auto& rec : trace.steps) {
    Volume mirrored(rec.actions.values.shape());
    for (std::size_t i = 0; i < mirrored.size(); ++i) mirrored[i] = -rec.actions.values[i];
    const auto c = m.conf.forward(m.conf_params, rec.state.image, rec.state.prob, rec.state.hint, rec.actions.values);
    const auto cm = m.conf.forward(m.conf_params, rec.state.image, rec.state.prob, rec.state.hint, mirrored);
    record(pattern, c.tape);
    record(pattern, cm.tape);
    double step = 0.0;
    const std::size_t N = mirrored.size();
    for (std::size_t i = 0; i < N; ++i) {
      const bool up = rec.actions.values[i] > 0.0f;
      const bool fg = rec.target[i] == 1;
      const double g = up == fg ? 1.0 : 0.0;
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(c.logit.data[i])));
      const double q = 1.0 / (1.0 + std::exp(-static_cast<double>(cm.logit.data[i])));
      step += -(g * clamped_log(p) + (1 - g) * clamped_log(1 - p));
      step += -((1 - g) * clamped_log(q) + g * clamped_log(1 - q));
    }
    total += step / static_cast<double>(N);
  }
  return total;
}

GradCheck check_gradients(mecca::NamedTensorSet& params, const mecca::NamedTensorSet& analytic,
                          const LossFn& loss, double h, double floor,
                          const std::vector<std::string>& names) {
  GradCheck res;
  ReluPattern base, probe;
  loss(&base);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  std::vector<std::string> todo = names;
  if (todo.empty())
    for (const auto& [name, _] : params) todo.push_back(name);
  for (const auto& name : todo) {
    Tensor& t = params.at(name);
    const Tensor& g = analytic.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const float orig = t.data[i];
      // Divide by the perturbation actually representable in float.
      const float hi = orig + static_cast<float>(h);
      const float lo = orig - static_cast<float>(h);
      t.data[i] = hi;
      probe.clear();
      const double up = loss(&probe);
      bool kink = probe != base;
      t.data[i] = lo;
      probe.clear();
      const double down = loss(&probe);
      kink = kink || probe != base;
      t.data[i] = orig;
      if (kink) {
        ++res.kinked;
        continue;
      }
      const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
      const double a = g.data[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      const double mag = std::max(std::abs(a), std::abs(numeric));
      if (mag < floor) {
        ++res.negligible;
        res.max_abs_err_negligible = std::max(res.max_abs_err_negligible, std::abs(a - numeric));
        continue;
      }
      ++res.checked;
      const double rel = std::abs(a - numeric) / mag;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  res.analytic_norm = std::sqrt(a2);
  const double denom = std::sqrt(std::max(a2, n2));
  res.rel_err = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
  return res;
}

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  path_ = std::filesystem::temp_directory_path() /
          ("mecca_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace oracle
