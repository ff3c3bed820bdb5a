#include "mecca/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mecca/error.hpp"
#include "mecca/expert.hpp"

namespace mecca {

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "dice");
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    sp += pred[i];
    sg += gt[i];
    inter += static_cast<std::size_t>(pred[i] & gt[i]);
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

BinaryMask binarize(const Volume& prob, double threshold) {
  BinaryMask m(prob.shape());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = prob[i] > threshold ? 1 : 0;
  return m;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), in place over a
// strided line of length n.
void edt_1d(double* f, std::size_t stride, int n, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  d.resize(n);
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == kInf) continue;
    while (k >= 0) {
      const int p = v[k];
      const double s = ((fq + q * q) - (f[p * stride] + p * p)) / (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((fq + q * q) - (f[v[k - 1] * stride] + v[k - 1] * v[k - 1])) /
                                (2.0 * (q - v[k - 1]));
    z[k + 1] = kInf;
  }
  if (k < 0) return;  // line entirely at infinity
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j] * stride];
  }
  for (int q = 0; q < n; ++q) f[q * stride] = d[q];
}

}  // namespace

std::vector<double> squared_distance_transform(const BinaryMask& feature) {
  const Shape3& s = feature.shape();
  std::vector<double> f(s.voxels());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = feature[i] ? 0.0 : kInf;
  std::vector<double> d;
  std::vector<int> v;
  std::vector<double> z;
  const std::size_t W = s.width, HW = static_cast<std::size_t>(s.height) * W;
  for (int zz = 0; zz < s.depth; ++zz)
    for (int y = 0; y < s.height; ++y) edt_1d(&f[s.index(zz, y, 0)], 1, s.width, d, v, z);
  for (int zz = 0; zz < s.depth; ++zz)
    for (int x = 0; x < s.width; ++x) edt_1d(&f[s.index(zz, 0, x)], W, s.height, d, v, z);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) edt_1d(&f[s.index(0, y, x)], HW, s.depth, d, v, z);
  return f;
}

double assd(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "assd");
  if (pred.count() == 0 || gt.count() == 0) fail(ErrorKind::kInvalidArgument, "assd of an empty mask");
  const BinaryMask sa = boundary_mask(pred);
  const BinaryMask sb = boundary_mask(gt);
  const std::vector<double> dt_a = squared_distance_transform(sa);
  const std::vector<double> dt_b = squared_distance_transform(sb);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i]) {
      total += std::sqrt(dt_b[i]);
      ++n;
    }
    if (sb[i]) {
      total += std::sqrt(dt_a[i]);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

nlohmann::json to_json(const StepReport& r) {
  nlohmann::json j{{"step", r.step},
                   {"dice", r.dice},
                   {"misunderstanding_rate", r.misunderstanding_rate},
                   {"reward_sum", r.reward_sum}};
  j["assd"] = r.assd ? nlohmann::json(*r.assd) : nlohmann::json(nullptr);
  return j;
}

std::vector<StepSummary> summarize(const std::vector<std::vector<StepReport>>& per_sample) {
  if (per_sample.empty()) return {};
  const std::size_t steps = per_sample.front().size();
  for (const auto& s : per_sample) {
    if (s.size() != steps) fail(ErrorKind::kShapeMismatch, "summarize: samples differ in step count");
  }
  std::vector<StepSummary> rows(steps);
  const double n = static_cast<double>(per_sample.size());
  for (std::size_t t = 0; t < steps; ++t) {
    StepSummary& row = rows[t];
    row.step = per_sample.front()[t].step;
    double ds = 0, ds2 = 0, as = 0, as2 = 0, ms = 0;
    int ac = 0;
    for (const auto& s : per_sample) {
      const StepReport& r = s[t];
      ds += r.dice;
      ds2 += r.dice * r.dice;
      ms += r.misunderstanding_rate;
      if (r.assd) {
        as += *r.assd;
        as2 += *r.assd * *r.assd;
        ++ac;
      }
    }
    row.dice_mean = ds / n;
    row.dice_sd = std::sqrt(std::max(0.0, ds2 / n - row.dice_mean * row.dice_mean));
    row.misunderstanding_mean = ms / n;
    row.assd_count = ac;
    if (ac > 0) {
      row.assd_mean = as / ac;
      row.assd_sd = std::sqrt(std::max(0.0, as2 / ac - row.assd_mean * row.assd_mean));
    }
    row.dice_delta = t == 0 ? 0.0 : row.dice_mean - rows[t - 1].dice_mean;
  }
  return rows;
}

std::string summary_csv(const std::vector<StepSummary>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "step,dice_mean,dice_sd,dice_delta,assd_mean,assd_sd,assd_count,misunderstanding_mean\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.dice_mean << ',' << r.dice_sd << ',' << r.dice_delta << ',' << r.assd_mean << ','
       << r.assd_sd << ',' << r.assd_count << ',' << r.misunderstanding_mean << '\n';
  }
  return os.str();
}

}  // namespace mecca
