#include "mecca/guide.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mecca/error.hpp"

namespace mecca {

void GuideConfig::validate() const {
  for (double s : spacing) {
    if (!(s > 0.0)) fail(ErrorKind::kValidation, "guide spacing must be positive");
  }
  if (!(compactness >= 0.0)) fail(ErrorKind::kValidation, "guide compactness must be non-negative");
  if (top_k < 1) fail(ErrorKind::kValidation, "guide top_k must be at least 1");
  if (initial_count < top_k) fail(ErrorKind::kValidation, "guide initial_count must be >= top_k");
  if (min_count < 1 || decline_per_step < 0 || max_iter < 1) {
    fail(ErrorKind::kValidation, "guide schedule values out of range");
  }
}

void to_json(nlohmann::json& j, const GuideConfig& c) {
  j = {{"spacing", c.spacing},       {"compactness", c.compactness},
       {"initial_count", c.initial_count}, {"top_k", c.top_k},
       {"decline_per_step", c.decline_per_step}, {"min_count", c.min_count},
       {"max_iter", c.max_iter}};
}

void from_json(const nlohmann::json& j, GuideConfig& c) {
  GuideConfig d;
  c.spacing = j.value("spacing", d.spacing);
  c.compactness = j.value("compactness", d.compactness);
  c.initial_count = j.value("initial_count", d.initial_count);
  c.top_k = j.value("top_k", d.top_k);
  c.decline_per_step = j.value("decline_per_step", d.decline_per_step);
  c.min_count = j.value("min_count", d.min_count);
  c.max_iter = j.value("max_iter", d.max_iter);
}

std::array<int, 3> slic_grid(Shape3 shape, int n_target, const std::array<double, 3>& spacing) {
  const std::array<int, 3> dims{shape.depth, shape.height, shape.width};
  std::array<int, 3> n{1, 1, 1};
  // Greedily split the axis with the longest physical cell until there are
  // enough cells.
  while (static_cast<long>(n[0]) * n[1] * n[2] < n_target) {
    int best = -1;
    double best_len = -1.0;
    for (int a = 0; a < 3; ++a) {
      if (n[a] >= dims[a]) continue;
      const double len = dims[a] * spacing[a] / n[a];
      if (len > best_len) {
        best_len = len;
        best = a;
      }
    }
    if (best < 0) break;
    ++n[best];
  }
  return n;
}

namespace {

struct Center {
  double intensity;
  double pos[3];  // voxel coordinates
};

constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

// Component id per voxel (6-connectivity within a label) and component sizes.
int components(const Shape3& s, const std::vector<int>& labels, std::vector<int>& comp,
               std::vector<std::size_t>& sizes, std::vector<int>& comp_label) {
  comp.assign(labels.size(), -1);
  sizes.clear();
  comp_label.clear();
  std::vector<std::size_t> stack;
  int next = 0;
  for (std::size_t seed = 0; seed < labels.size(); ++seed) {
    if (comp[seed] >= 0) continue;
    const int lab = labels[seed];
    comp[seed] = next;
    std::size_t size = 0;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(i % s.width);
      const int y = static_cast<int>((i / s.width) % s.height);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(s.width) * s.height));
      for (const auto& o : kOffsets) {
        const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
        if (!s.contains(zz, yy, xx)) continue;
        const std::size_t j = s.index(zz, yy, xx);
        if (comp[j] < 0 && labels[j] == lab) {
          comp[j] = next;
          stack.push_back(j);
        }
      }
    }
    sizes.push_back(size);
    comp_label.push_back(lab);
    ++next;
  }
  return next;
}

void enforce_connectivity(const Shape3& s, std::vector<int>& labels) {
  std::vector<int> comp;
  std::vector<std::size_t> sizes;
  std::vector<int> comp_label;
  // Orphans only merge into surviving components, which never change, so
  // every round absorbs at least one orphan touching a survivor.
  for (std::size_t round = 0; round <= labels.size(); ++round) {
    const int nc = components(s, labels, comp, sizes, comp_label);
    // Largest component per label survives; earlier components win ties.
    std::map<int, int> keeper;
    for (int c = 0; c < nc; ++c) {
      auto it = keeper.find(comp_label[c]);
      if (it == keeper.end() || sizes[c] > sizes[it->second]) keeper[comp_label[c]] = c;
    }
    std::vector<char> orphan(nc, 0);
    bool any = false;
    for (int c = 0; c < nc; ++c) {
      if (keeper[comp_label[c]] != c) {
        orphan[c] = 1;
        any = true;
      }
    }
    if (!any) return;

    // For each orphan, the neighbouring survivor sharing the most faces.
    std::vector<std::map<int, std::size_t>> contact(nc);
    for (int z = 0; z < s.depth; ++z)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          const std::size_t i = s.index(z, y, x);
          const int c = comp[i];
          if (!orphan[c]) continue;
          for (const auto& o : kOffsets) {
            const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
            if (!s.contains(zz, yy, xx)) continue;
            const std::size_t j = s.index(zz, yy, xx);
            if (!orphan[comp[j]]) ++contact[c][labels[j]];
          }
        }
    std::vector<int> target(nc, -1);
    for (int c = 0; c < nc; ++c) {
      if (!orphan[c]) continue;
      std::size_t best = 0;
      for (const auto& [lab, n] : contact[c]) {
        if (n > best) {
          best = n;
          target[c] = lab;
        }
      }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int c = comp[i];
      if (orphan[c] && target[c] >= 0) labels[i] = target[c];
    }
  }
  fail(ErrorKind::kValidation, "supervoxel connectivity enforcement did not converge");
}

}  // namespace

SupervoxelLabels slic_supervoxels(const Volume& image, int n_target, double compactness,
                                  const std::array<double, 3>& spacing, int max_iter) {
  const Shape3 s = image.shape();
  if (n_target < 1) fail(ErrorKind::kInvalidArgument, "slic: n_target must be at least 1");
  if (static_cast<std::size_t>(n_target) > s.voxels()) {
    fail(ErrorKind::kInvalidArgument, "slic: n_target exceeds the voxel count");
  }
  if (!image.all_finite()) fail(ErrorKind::kValidation, "slic: image has non-finite values");

  // Intensity channel is the z-scored image.
  const std::size_t N = s.voxels();
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < N; ++i) mean += image[i];
  mean /= static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i) sq += (image[i] - mean) * (image[i] - mean);
  const double sd = std::sqrt(sq / static_cast<double>(N));
  std::vector<double> intensity(N);
  for (std::size_t i = 0; i < N; ++i) intensity[i] = sd > 0.0 ? (image[i] - mean) / sd : 0.0;

  const std::array<int, 3> dims{s.depth, s.height, s.width};
  const std::array<int, 3> grid = slic_grid(s, n_target, spacing);
  std::array<double, 3> step{};  // grid step per axis, in voxels
  for (int a = 0; a < 3; ++a) step[a] = static_cast<double>(dims[a]) / grid[a];
  const int k_count = grid[0] * grid[1] * grid[2];
  double phys_volume = 1.0;
  for (int a = 0; a < 3; ++a) phys_volume *= dims[a] * spacing[a];
  const double S = std::cbrt(phys_volume / k_count);
  const double spatial_w = compactness * compactness / (S * S);

  std::vector<int> labels(N);
  std::vector<Center> centers;
  centers.reserve(k_count);
  for (int gz = 0; gz < grid[0]; ++gz)
    for (int gy = 0; gy < grid[1]; ++gy)
      for (int gx = 0; gx < grid[2]; ++gx) {
        Center c{};
        c.pos[0] = (gz + 0.5) * step[0] - 0.5;
        c.pos[1] = (gy + 0.5) * step[1] - 0.5;
        c.pos[2] = (gx + 0.5) * step[2] - 0.5;
        c.intensity = intensity[s.index(static_cast<int>(std::lround(std::max(0.0, c.pos[0]))),
                                        static_cast<int>(std::lround(std::max(0.0, c.pos[1]))),
                                        static_cast<int>(std::lround(std::max(0.0, c.pos[2]))))];
        centers.push_back(c);
      }
  // Start from the grid cells so every voxel has an owner even if no center
  // reaches it during an iteration.
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int gz = std::min(grid[0] - 1, static_cast<int>(z / step[0]));
        const int gy = std::min(grid[1] - 1, static_cast<int>(y / step[1]));
        const int gx = std::min(grid[2] - 1, static_cast<int>(x / step[2]));
        labels[s.index(z, y, x)] = (gz * grid[1] + gy) * grid[2] + gx;
      }

  std::vector<double> best(N);
  std::array<int, 3> reach{};
  for (int a = 0; a < 3; ++a) reach[a] = static_cast<int>(std::ceil(step[a]));
  for (int iter = 0; iter < max_iter; ++iter) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (int k = 0; k < k_count; ++k) {
      const Center& c = centers[k];
      int lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        const int ctr = static_cast<int>(std::lround(c.pos[a]));
        lo[a] = std::max(0, ctr - reach[a]);
        hi[a] = std::min(dims[a] - 1, ctr + reach[a]);
      }
      for (int z = lo[0]; z <= hi[0]; ++z) {
        const double dz = (z - c.pos[0]) * spacing[0];
        for (int y = lo[1]; y <= hi[1]; ++y) {
          const double dy = (y - c.pos[1]) * spacing[1];
          for (int x = lo[2]; x <= hi[2]; ++x) {
            const double dx = (x - c.pos[2]) * spacing[2];
            const std::size_t i = s.index(z, y, x);
            const double dc = intensity[i] - c.intensity;
            const double d = dc * dc + spatial_w * (dz * dz + dy * dy + dx * dx);
            if (d < best[i]) {
              best[i] = d;
              labels[i] = k;
            }
          }
        }
      }
    }
    std::vector<double> acc(static_cast<std::size_t>(k_count) * 4, 0.0);
    std::vector<std::size_t> cnt(k_count, 0);
    for (int z = 0; z < s.depth; ++z)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          const std::size_t i = s.index(z, y, x);
          const int k = labels[i];
          acc[k * 4 + 0] += intensity[i];
          acc[k * 4 + 1] += z;
          acc[k * 4 + 2] += y;
          acc[k * 4 + 3] += x;
          ++cnt[k];
        }
    for (int k = 0; k < k_count; ++k) {
      if (cnt[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(cnt[k]);
      centers[k].intensity = acc[k * 4] * inv;
      for (int a = 0; a < 3; ++a) centers[k].pos[a] = acc[k * 4 + 1 + a] * inv;
    }
  }

  enforce_connectivity(s, labels);

  // Compact ids in scan order of first appearance.
  std::vector<int> remap(k_count, -1);
  int next = 0;
  for (int& l : labels) {
    if (remap[l] < 0) remap[l] = next++;
    l = remap[l];
  }
  SupervoxelLabels out;
  out.shape = s;
  out.labels = std::move(labels);
  out.count = next;
  return out;
}

std::vector<RegionScore> region_stats(const Volume& conf, const SupervoxelLabels& sv) {
  require_same_shape(conf.shape(), sv.shape, "region_stats");
  std::vector<RegionScore> regions(sv.count);
  std::vector<double> sums(sv.count, 0.0);
  for (int k = 0; k < sv.count; ++k) {
    regions[k].label = k;
    regions[k].bbox = {std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
                       std::numeric_limits<int>::max(), -1, -1, -1};
  }
  const Shape3& s = sv.shape;
  for (int z = 0; z < s.depth; ++z)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const std::size_t i = s.index(z, y, x);
        const int k = sv.labels[i];
        if (k < 0 || k >= sv.count) fail(ErrorKind::kValidation, "supervoxel id out of range");
        RegionScore& r = regions[k];
        sums[k] += conf[i];
        ++r.voxel_count;
        r.bbox[0] = std::min(r.bbox[0], z);
        r.bbox[1] = std::min(r.bbox[1], y);
        r.bbox[2] = std::min(r.bbox[2], x);
        r.bbox[3] = std::max(r.bbox[3], z);
        r.bbox[4] = std::max(r.bbox[4], y);
        r.bbox[5] = std::max(r.bbox[5], x);
      }
  for (int k = 0; k < sv.count; ++k) {
    if (regions[k].voxel_count == 0) fail(ErrorKind::kValidation, "empty supervoxel id");
    regions[k].mean_conf = sums[k] / static_cast<double>(regions[k].voxel_count);
  }
  return regions;
}

std::vector<RegionScore> rank_regions(const Volume& conf, const SupervoxelLabels& sv, int top_k) {
  std::vector<RegionScore> regions = region_stats(conf, sv);
  std::stable_sort(regions.begin(), regions.end(), [](const RegionScore& a, const RegionScore& b) {
    if (a.mean_conf != b.mean_conf) return a.mean_conf < b.mean_conf;
    return a.label < b.label;
  });
  if (top_k >= 0 && static_cast<std::size_t>(top_k) < regions.size()) regions.resize(top_k);
  return regions;
}

int supervoxel_count_at_step(const GuideConfig& cfg, int step) {
  if (step < 1) fail(ErrorKind::kInvalidArgument, "supervoxel schedule: step must be >= 1");
  const long n = static_cast<long>(cfg.initial_count) - static_cast<long>(cfg.decline_per_step) * (step - 1);
  return static_cast<int>(std::max<long>(cfg.min_count, n));
}

Suggestions suggest(const Volume& image, const Volume& conf, const GuideConfig& cfg, int step) {
  const long cap = static_cast<long>(image.shape().voxels());
  const int n = static_cast<int>(std::min<long>(cap, supervoxel_count_at_step(cfg, step)));
  Suggestions out;
  out.supervoxels = slic_supervoxels(image, n, cfg.compactness, cfg.spacing, cfg.max_iter);
  out.regions = rank_regions(conf, out.supervoxels, cfg.top_k);
  return out;
}

nlohmann::json suggestions_to_json(const std::vector<RegionScore>& regions) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : regions) {
    arr.push_back({{"label", r.label},
                   {"mean_conf", r.mean_conf},
                   {"voxel_count", r.voxel_count},
                   {"bbox", r.bbox}});
  }
  return arr;
}

}  // namespace mecca
