#pragma once

// Benchmark games over saliency maps: weak localisation, insertion/deletion
// curves and the pointing game.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "pball/data.hpp"
#include "pball/geometry.hpp"
#include "pball/image.hpp"
#include "pball/model.hpp"
#include "pball/parallel.hpp"
#include "pball/saliency.hpp"
#include "pball/tensor.hpp"

namespace pball {

// ---------------------------------------------------------------------------
// Thresholding and components

enum class ThresholdKind { value, percent, mean_scaled };

inline const char* threshold_kind_name(ThresholdKind k) {
  switch (k) {
    case ThresholdKind::value: return "value";
    case ThresholdKind::percent: return "percent";
    case ThresholdKind::mean_scaled: return "mean";
  }
  return "?";
}

inline double threshold_alpha_max(ThresholdKind k) { return k == ThresholdKind::mean_scaled ? 10.5 : 1.0; }

struct ThresholdStrategy {
  ThresholdKind kind = ThresholdKind::value;
  double alpha = 0.5;

  void validate() const {
    // Grid values are k * step, so allow a hair of rounding above the bound.
    if (!(alpha > 0.0) || alpha > threshold_alpha_max(kind) + 1e-9) {
      throw ValidationError(std::string("threshold ") + threshold_kind_name(kind) + ": alpha " + std::to_string(alpha) +
                            " outside (0, " + std::to_string(threshold_alpha_max(kind)) + "]");
    }
  }
};

/// Pixel indices sorted by decreasing saliency, ties in row-major order.
inline std::vector<std::size_t> saliency_order(const Tensor& map) {
  std::vector<std::size_t> idx(map.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&map](std::size_t a, std::size_t b) { return map[a] > map[b]; });
  return idx;
}

/// value: v >= alpha; percent: the ceil(alpha*H*W) most salient pixels;
/// mean_scaled: v >= alpha * mean(v).
inline Mask threshold_mask(const Tensor& map, const ThresholdStrategy& strategy) {
  require_rank(map, 2, "threshold_mask");
  strategy.validate();
  const int h = static_cast<int>(map.dim(0)), w = static_cast<int>(map.dim(1));
  Mask m(h, w);
  switch (strategy.kind) {
    case ThresholdKind::value:
      for (std::size_t i = 0; i < map.size(); ++i) m.set_flat(i, map[i] >= strategy.alpha);
      break;
    case ThresholdKind::mean_scaled: {
      const double cut = strategy.alpha * (map.sum() / static_cast<double>(map.size()));
      for (std::size_t i = 0; i < map.size(); ++i) m.set_flat(i, map[i] >= cut);
      break;
    }
    case ThresholdKind::percent: {
      // The small slack keeps grid values like 0.3 * 1000 from rounding up.
      const double want = std::ceil(strategy.alpha * static_cast<double>(map.size()) - 1e-9);
      const auto count = std::min(map.size(), static_cast<std::size_t>(std::max(0.0, want)));
      const auto order = saliency_order(map);
      for (std::size_t k = 0; k < count; ++k) m.set_flat(order[k]);
      break;
    }
  }
  return m;
}

/// Largest 4-connected component (union-find). Ties go to the component
/// holding the smallest row-major index; an empty mask gives an empty mask.
inline Mask largest_connected_component(const Mask& mask) {
  const int h = mask.height(), w = mask.width();
  const std::size_t n = mask.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&parent](std::size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent[a] = b;  // root is always the smallest index of the component
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (x + 1 < w && mask(y, x + 1)) unite(i, i + 1);
      if (y + 1 < h && mask(y + 1, x)) unite(i, i + static_cast<std::size_t>(w));
    }
  }
  std::vector<std::size_t> size(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) ++size[find(i)];
  }
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < n; ++i) {  // roots are visited in row-major order
    if (size[i] > 0 && (!best || size[i] > size[*best])) best = i;
  }
  Mask out(h, w);
  if (!best) return out;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] && find(i) == *best) out.set_flat(i);
  }
  return out;
}

/// Box around the largest component of the thresholded map, if any.
inline std::optional<BoundingBox> derive_box(const Tensor& map, const ThresholdStrategy& strategy) {
  return largest_connected_component(threshold_mask(map, strategy)).bounding_box();
}

// ---------------------------------------------------------------------------
// Saliency sources

struct SaliencyRequest {
  const Sample& sample;
  const Tensor& image;  // may differ from sample.image (resized pointing game)
  int cls;
};

using SaliencyFn = std::function<Tensor(const SaliencyRequest&)>;

// Trivial reference: a Gaussian bump at the image centre.
inline Tensor center_saliency(std::size_t h, std::size_t w) {
  Tensor m(Shape{h, w});
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double s = static_cast<double>(std::max(h, w)) / 4;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      m.at(y, x) = std::exp(-(dx * dx + dy * dy) / (2 * s * s));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Weak localisation

/// Grid {step, 2 step, ...} up to `max` (values are k * step).
inline std::vector<double> alpha_grid(double step, double max) {
  if (!(step > 0.0)) throw ValidationError("alpha grid step must be positive");
  std::vector<double> out;
  const auto count = static_cast<std::size_t>(std::floor(max / step + 1e-9));
  for (std::size_t k = 1; k <= count; ++k) out.push_back(static_cast<double>(k) * step);
  return out;
}

struct LocalizationOptions {
  double alpha_step = 0.05;
  double iou_threshold = 0.5;
  std::vector<ThresholdKind> strategies = {ThresholdKind::value, ThresholdKind::percent, ThresholdKind::mean_scaled};
  std::size_t workers = 1;
};

struct LocalizationRecord {
  int image_id = 0;
  // iou[s][a]: strategy s, alpha index a; -1 marks an empty component (a miss)
  std::vector<std::vector<double>> iou;
};

struct LocalizationResult {
  LocalizationOptions options;
  std::vector<std::vector<double>> alphas;  // per strategy
  std::vector<LocalizationRecord> records;  // sorted by image id

  bool hit(const LocalizationRecord& r, std::size_t s, std::size_t a) const {
    return r.iou[s][a] >= options.iou_threshold;
  }

  double error(std::size_t s, std::size_t a) const {
    if (records.empty()) return 1.0;
    std::size_t miss = 0;
    for (const auto& r : records) miss += hit(r, s, a) ? 0 : 1;
    return static_cast<double>(miss) / static_cast<double>(records.size());
  }

  struct Best {
    std::size_t strategy = 0, alpha_index = 0;
    double alpha = 0.0, error = 1.0;
  };

  Best best_for(std::size_t s) const {
    Best b{s, 0, alphas[s].empty() ? 0.0 : alphas[s][0], 2.0};
    for (std::size_t a = 0; a < alphas[s].size(); ++a) {
      const double e = error(s, a);
      if (e < b.error) b = {s, a, alphas[s][a], e};
    }
    return b;
  }

  /// Minimum error over every strategy and threshold.
  Best best() const {
    Best b;
    b.error = 2.0;
    for (std::size_t s = 0; s < alphas.size(); ++s) {
      const Best c = best_for(s);
      if (c.error < b.error) b = c;
    }
    return b;
  }
};

/// Each map from `saliency` is expected to be the final (normalised, blurred)
/// map. Success means IoU with the primary ground-truth box >= 0.5.
inline LocalizationResult weak_localization(const Dataset& data, const SaliencyFn& saliency,
                                            const LocalizationOptions& opt = {}) {
  LocalizationResult res;
  res.options = opt;
  for (ThresholdKind k : opt.strategies) res.alphas.push_back(alpha_grid(opt.alpha_step, threshold_alpha_max(k)));
  res.records.resize(data.size());
  parallel_for(data.size(), opt.workers, [&](std::size_t i) {
    const Sample& s = data[i];
    const Tensor map = saliency({s, s.image, s.label});
    if (map.shape() != Shape{s.image.dim(1), s.image.dim(2)}) throw ShapeError("saliency map has wrong shape");
    BoundingBox gt{};
    bool found = false;
    for (const auto& r : s.regions) {
      if (r.class_id == s.label) {
        gt = r.box;
        found = true;
        break;
      }
    }
    if (!found) throw ValidationError("sample " + std::to_string(s.id) + " has no ground-truth box");
    LocalizationRecord rec;
    rec.image_id = s.id;
    for (std::size_t k = 0; k < opt.strategies.size(); ++k) {
      std::vector<double> row;
      for (double a : res.alphas[k]) {
        const auto box = derive_box(map, {opt.strategies[k], a});
        row.push_back(box ? iou(*box, gt) : -1.0);
      }
      rec.iou.push_back(std::move(row));
    }
    res.records[i] = std::move(rec);
  });
  std::stable_sort(res.records.begin(), res.records.end(),
                   [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return res;
}

// ---------------------------------------------------------------------------
// Insertion / deletion

struct Curve {
  std::vector<double> fractions;
  std::vector<double> scores;
};

/// Trapezoidal area under the curve.
inline double auc(const Curve& c) {
  if (c.fractions.size() != c.scores.size() || c.fractions.size() < 2) {
    throw ValidationError("auc: curve needs matching fractions and scores, at least two points");
  }
  double a = 0.0;
  for (std::size_t k = 1; k < c.fractions.size(); ++k) {
    a += (c.fractions[k] - c.fractions[k - 1]) * (c.scores[k] + c.scores[k - 1]) * 0.5;
  }
  return a;
}

inline constexpr double kMidGray = 0.5;

namespace detail {

// Starts from `start`, copies pixels (all channels) from `source` in saliency
// order; point k holds the first k*H*W/steps pixels.
inline Curve pixel_curve(const Tensor& start, const Tensor& source, const Tensor& map, const Network& net,
                         std::size_t cls, int steps) {
  if (steps < 2) throw ValidationError("curve: steps must be at least 2");
  require_rank(map, 2, "curve saliency");
  const std::size_t c = start.dim(0), h = start.dim(1), w = start.dim(2), plane = h * w;
  if (map.dim(0) != h || map.dim(1) != w) throw ShapeError("curve: saliency map does not match the image");
  const auto order = saliency_order(map);
  Tensor img = start;
  Curve curve;
  std::size_t done = 0;
  for (int k = 0; k <= steps; ++k) {
    const std::size_t upto = static_cast<std::size_t>(k) * plane / static_cast<std::size_t>(steps);
    for (; done < upto; ++done) {
      const std::size_t p = order[done];
      for (std::size_t ch = 0; ch < c; ++ch) img[ch * plane + p] = source[ch * plane + p];
    }
    curve.fractions.push_back(static_cast<double>(k) / steps);
    curve.scores.push_back(confidence(net, img, cls));
  }
  return curve;
}

}  // namespace detail

inline Tensor mid_gray_like(const Tensor& x) { return Tensor(x.shape(), kMidGray); }

/// Most salient pixels set to mid-grey first; score = class confidence.
inline Curve deletion_curve(const Tensor& x, const Tensor& map, const Network& net, std::size_t cls, int steps = 100) {
  return detail::pixel_curve(x, mid_gray_like(x), map, net, cls, steps);
}

/// Original pixels restored into a blurred copy, most salient first.
inline Curve insertion_curve(const Tensor& x, const Tensor& map, const Network& net, std::size_t cls, int steps = 100,
                             double sigma_base = 10.0) {
  return detail::pixel_curve(gaussian_blur_channels(x, sigma_base), x, map, net, cls, steps);
}

struct InsDelOptions {
  int steps = 100;
  double sigma_base = 10.0;
  bool deletion = true;
  bool insertion = true;
  std::size_t workers = 1;
};

struct InsDelRecord {
  int image_id = 0;
  double deletion_auc = 0.0;
  double insertion_auc = 0.0;
};

struct InsDelResult {
  InsDelOptions options;
  std::vector<InsDelRecord> records;

  double mean_deletion() const {
    double s = 0.0;
    for (const auto& r : records) s += r.deletion_auc;
    return records.empty() ? 0.0 : s / static_cast<double>(records.size());
  }
  double mean_insertion() const {
    double s = 0.0;
    for (const auto& r : records) s += r.insertion_auc;
    return records.empty() ? 0.0 : s / static_cast<double>(records.size());
  }
};

inline InsDelResult insertion_deletion(const Dataset& data, const Network& net, const SaliencyFn& saliency,
                                       const InsDelOptions& opt = {}) {
  InsDelResult res;
  res.options = opt;
  res.records.resize(data.size());
  parallel_for(data.size(), opt.workers, [&](std::size_t i) {
    const Sample& s = data[i];
    const Tensor map = saliency({s, s.image, s.label});
    const auto cls = static_cast<std::size_t>(s.label);
    InsDelRecord r;
    r.image_id = s.id;
    if (opt.deletion) r.deletion_auc = auc(deletion_curve(s.image, map, net, cls, opt.steps));
    if (opt.insertion) r.insertion_auc = auc(insertion_curve(s.image, map, net, cls, opt.steps, opt.sigma_base));
    res.records[i] = r;
  });
  std::stable_sort(res.records.begin(), res.records.end(),
                   [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  return res;
}

// ---------------------------------------------------------------------------
// Pointing game

enum class ResizeMode { none, bilinear_1_5x };

struct PointingOptions {
  int tolerance_px = 15;
  ResizeMode resize = ResizeMode::none;
  bool primary_only = false;       // only the primary label of each sample
  std::vector<int> classes;        // if non-empty, test exactly these classes
  double difficult_area = 0.25;    // area fraction below which a class counts as small
  std::size_t workers = 1;
};

struct PointingTrial {
  int image_id = 0;
  int cls = 0;
  int y = 0, x = 0;
  bool hit = false;
  bool difficult = false;
};

struct PointingResult {
  PointingOptions options;
  std::vector<PointingTrial> trials;  // sorted by (image id, class)
  std::size_t skipped = 0;

  double accuracy(bool difficult_only = false) const {
    std::size_t n = 0, hits = 0;
    for (const auto& t : trials) {
      if (difficult_only && !t.difficult) continue;
      ++n;
      hits += t.hit ? 1 : 0;
    }
    return n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
  }
  std::size_t count(bool difficult_only = false) const {
    return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(),
                                                  [&](const auto& t) { return !difficult_only || t.difficult; }));
  }
};

/// Row-major first maximum of the map, as (y, x).
inline std::pair<int, int> argmax_point(const Tensor& map) {
  const std::size_t i = argmax(map.data());
  return {static_cast<int>(i / map.dim(1)), static_cast<int>(i % map.dim(1))};
}

/// True if (y, x) is within `tolerance` pixels (Euclidean) of the mask.
inline bool point_hits(const Mask& mask, int y, int x, int tolerance) {
  const long t2 = static_cast<long>(tolerance) * tolerance;
  for (int yy = std::max(0, y - tolerance); yy <= std::min(mask.height() - 1, y + tolerance); ++yy) {
    for (int xx = std::max(0, x - tolerance); xx <= std::min(mask.width() - 1, x + tolerance); ++xx) {
      const long dy = yy - y, dx = xx - x;
      if (mask(yy, xx) && dy * dy + dx * dx <= t2) return true;
    }
  }
  return false;
}

inline bool difficult_trial(const Sample& s, int cls, double area_fraction) {
  const double area = static_cast<double>(s.class_mask(cls).count()) /
                      static_cast<double>(static_cast<std::size_t>(s.height()) * static_cast<std::size_t>(s.width()));
  const bool distractor = std::any_of(s.labels.begin(), s.labels.end(), [cls](int c) { return c != cls; });
  return area < area_fraction && distractor;
}

/// Saliency map for (sample, class) at the original resolution, with the
/// optional upscale-explain-downscale wrapper.
inline Tensor pointing_map(const Sample& s, int cls, const SaliencyFn& saliency, ResizeMode resize) {
  const std::size_t h = s.image.dim(1), w = s.image.dim(2);
  if (resize == ResizeMode::none) return saliency({s, s.image, cls});
  const auto uh = static_cast<std::size_t>(std::lround(1.5 * static_cast<double>(h)));
  const auto uw = static_cast<std::size_t>(std::lround(1.5 * static_cast<double>(w)));
  const Tensor big = resize_bilinear(s.image, uh, uw);
  const Tensor map = saliency({s, big, cls});
  return resize_bilinear(map, h, w);
}

inline PointingResult pointing_game(const Dataset& data, const SaliencyFn& saliency, const PointingOptions& opt = {}) {
  struct Job {
    std::size_t sample;
    int cls;
  };
  PointingResult res;
  res.options = opt;
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    std::vector<int> classes = opt.classes;
    if (classes.empty()) classes = opt.primary_only ? std::vector<int>{s.label} : s.labels;
    for (int c : classes) {
      if (!s.has_class(c)) {
        ++res.skipped;
        continue;
      }
      jobs.push_back({i, c});
    }
  }
  res.trials.resize(jobs.size());
  parallel_for(jobs.size(), opt.workers, [&](std::size_t k) {
    const Sample& s = data[jobs[k].sample];
    const int cls = jobs[k].cls;
    const Tensor map = pointing_map(s, cls, saliency, opt.resize);
    const auto [y, x] = argmax_point(map);
    PointingTrial t;
    t.image_id = s.id;
    t.cls = cls;
    t.y = y;
    t.x = x;
    t.hit = point_hits(s.class_mask(cls), y, x, opt.tolerance_px);
    t.difficult = difficult_trial(s, cls, opt.difficult_area);
    res.trials[k] = t;
  });
  std::stable_sort(res.trials.begin(), res.trials.end(), [](const auto& a, const auto& b) {
    return a.image_id != b.image_id ? a.image_id < b.image_id : a.cls < b.cls;
  });
  return res;
}

/// Hit rate of a uniformly random point: mean object-area fraction over trials.
inline double pointing_chance_rate(const Dataset& data, bool primary_only = true) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : data) {
    const double area = static_cast<double>(s.height()) * s.width();
    for (int c : primary_only ? std::vector<int>{s.label} : s.labels) {
      total += static_cast<double>(s.class_mask(c).count()) / area;
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace pball
