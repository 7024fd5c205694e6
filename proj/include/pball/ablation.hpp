#pragma once

// Perturbation-based explainer with an x' cache, and the layer-range x sigma
// ablation sweep.

#include <algorithm>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "pball/eval.hpp"
#include "pball/perturb.hpp"
#include "pball/saliency.hpp"

namespace pball {

/// Finds x' once per (sample, class, image size) and turns it into maps for
/// any saliency options. Thread-safe; concurrent misses on the same key may
/// both optimise, but the results are identical.
class PerturbationExplainer {
 public:
  PerturbationExplainer(const Network& net, PerturbConfig cfg, bool suppress_all_regions = true)
      : net_(&net), cfg_(std::move(cfg)), suppress_(suppress_all_regions) {
    cfg_.validate();
    cfg_.layers.validate(net.spec().relu_count());
  }

  const PerturbConfig& config() const { return cfg_; }

  MarginSpec margin_for(int cls) const {
    const auto c = static_cast<std::size_t>(cls);
    return net_->mode() == OutputMode::single_label ? MarginSpec::single_label(c) : MarginSpec::multi_label(c, suppress_);
  }

  std::shared_ptr<const PerturbResult> perturb(const SaliencyRequest& r) const {
    const Key key{r.sample.id, r.cls, r.image.dim(1), r.image.dim(2)};
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    auto res = std::make_shared<const PerturbResult>(find_perturbation(r.image, *net_, margin_for(r.cls), cfg_));
    std::lock_guard lock(mu_);
    return cache_.emplace(key, std::move(res)).first->second;
  }

  Tensor saliency(const SaliencyRequest& r, const SaliencyOptions& opt) const {
    const auto p = perturb(r);
    return build(r.image, p->x_prime, net_, static_cast<std::size_t>(r.cls), opt, cfg_.layers).values;
  }

  SaliencyFn fn(SaliencyOptions opt) const {
    return [this, opt](const SaliencyRequest& r) { return saliency(r, opt); };
  }

  std::size_t cached() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  using Key = std::tuple<int, int, std::size_t, std::size_t>;
  const Network* net_;
  PerturbConfig cfg_;
  bool suppress_;
  mutable std::mutex mu_;
  mutable std::map<Key, std::shared_ptr<const PerturbResult>> cache_;
};

// ---------------------------------------------------------------------------

enum class Game { localization, insdel, pointing };

inline const char* game_name(Game g) {
  switch (g) {
    case Game::localization: return "localization";
    case Game::insdel: return "insdel";
    case Game::pointing: return "pointing";
  }
  return "?";
}

inline Game parse_game(const std::string& s) {
  if (s == "localization") return Game::localization;
  if (s == "insdel" || s == "deletion") return Game::insdel;
  if (s == "pointing") return Game::pointing;
  throw ValidationError("unknown game '" + s + "' (expected localization, insdel or pointing)");
}

/// Lower is better for localization error and deletion AUC.
inline bool lower_is_better(Game g) { return g != Game::pointing; }

/// "a:b:c" (inclusive, step c), "a:b" (step 1) or a comma list.
inline std::vector<double> parse_grid(const std::string& text) {
  auto num = [&text](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw ValidationError("bad number '" + s + "' in grid '" + text + "'");
    return v;
  };
  std::vector<std::string> parts;
  const char sep = text.find(':') != std::string::npos ? ':' : ',';
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  std::vector<double> out;
  if (sep == ',') {
    for (const auto& p : parts) out.push_back(num(p));
    return out;
  }
  if (parts.size() < 2 || parts.size() > 3) throw ValidationError("grid '" + text + "' must be a:b or a:b:step");
  const double lo = num(parts[0]), hi = num(parts[1]), step = parts.size() == 3 ? num(parts[2]) : 1.0;
  if (!(step > 0.0) || hi < lo) throw ValidationError("grid '" + text + "' is empty or has a non-positive step");
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  for (std::size_t k = 0; k <= n; ++k) out.push_back(lo + static_cast<double>(k) * step);
  return out;
}

struct AblationOptions {
  Game game = Game::localization;
  std::vector<std::size_t> relu_grid;  // cells (i, j) for i <= j from this grid
  std::vector<double> sigmas = {0.0};
  PerturbConfig perturb;               // lambda_prime applies where j > i
  bool guided = false;
  bool suppress_all_regions = true;
  LocalizationOptions localization;
  InsDelOptions insdel;
  PointingOptions pointing;
  double robust_bar = 0.82;            // sigmas counted where the metric beats this bar
  std::size_t workers = 1;
};

struct AblationCell {
  std::size_t i = 0, j = 0;
  std::vector<double> metric;  // one per sigma
  double best = 0.0;
  double best_sigma = 0.0;
  std::size_t robust_count = 0;
};

struct AblationResult {
  AblationOptions options;
  std::vector<AblationCell> cells;  // row-major over (i, j), i <= j

  const AblationCell& cell(std::size_t i, std::size_t j) const {
    for (const auto& c : cells) {
      if (c.i == i && c.j == j) return c;
    }
    throw ValidationError("ablation: no cell (" + std::to_string(i) + "," + std::to_string(j) + ")");
  }
};

/// Best value over sigma, first sigma on ties.
inline std::pair<double, std::size_t> best_over(const std::vector<double>& metric, bool lower_better) {
  std::size_t b = 0;
  for (std::size_t k = 1; k < metric.size(); ++k) {
    if (lower_better ? metric[k] < metric[b] : metric[k] > metric[b]) b = k;
  }
  return {metric.at(b), b};
}

/// Sigmas whose metric beats `bar` (strictly above, or strictly below when
/// lower is better).
inline std::size_t robust_count(const std::vector<double>& metric, double bar, bool lower_better) {
  return static_cast<std::size_t>(std::count_if(metric.begin(), metric.end(), [&](double v) {
    return lower_better ? v < bar : v > bar;
  }));
}

/// Game metric for one saliency source: best-over-alpha error, mean deletion
/// AUC, or pointing accuracy.
inline double game_metric(Game game, const Dataset& data, const Network& net, const SaliencyFn& fn,
                          const AblationOptions& opt) {
  switch (game) {
    case Game::localization: {
      auto lo = opt.localization;
      lo.workers = opt.workers;
      return weak_localization(data, fn, lo).best().error;
    }
    case Game::insdel: {
      auto id = opt.insdel;
      id.workers = opt.workers;
      id.insertion = false;
      return insertion_deletion(data, net, fn, id).mean_deletion();
    }
    case Game::pointing: {
      auto po = opt.pointing;
      po.workers = opt.workers;
      return pointing_game(data, fn, po).accuracy();
    }
  }
  return 0.0;
}

/// Per (i, j) cell the layer set is {i, ..., j-1}; the i = j cell has no
/// perceptual term. x' is computed once per cell and reused across sigmas.
inline AblationResult ablation_sweep(const Dataset& data, const Network& net, const AblationOptions& opt) {
  if (opt.relu_grid.empty() || opt.sigmas.empty()) throw ValidationError("ablation: grids must be non-empty");
  const std::size_t relus = net.spec().relu_count();
  for (std::size_t o : opt.relu_grid) {
    if (o > relus) {
      throw ValidationError("ablation: ReLU ordinal " + std::to_string(o) + " out of range (network has " +
                            std::to_string(relus) + ")");
    }
  }
  for (double s : opt.sigmas) {
    if (!(s >= 0.0)) throw ValidationError("ablation: sigma must be non-negative");
  }
  std::vector<std::size_t> grid = opt.relu_grid;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  AblationResult res;
  res.options = opt;
  const bool lower = lower_is_better(opt.game);
  for (std::size_t i : grid) {
    for (std::size_t j : grid) {
      if (j < i) continue;
      PerturbConfig cfg = opt.perturb;
      cfg.layers = i == j ? LayerSet::none() : LayerSet::range(i, j);
      const PerturbationExplainer explainer(net, cfg, opt.suppress_all_regions);
      AblationCell cell{i, j, {}, 0.0, 0.0, 0};
      for (double s : opt.sigmas) {
        SaliencyOptions so{s, opt.guided, opt.game == Game::localization};
        cell.metric.push_back(game_metric(opt.game, data, net, explainer.fn(so), opt));
      }
      const auto [best, k] = best_over(cell.metric, lower);
      cell.best = best;
      cell.best_sigma = opt.sigmas[k];
      cell.robust_count = robust_count(cell.metric, opt.robust_bar, lower);
      res.cells.push_back(std::move(cell));
    }
  }
  return res;
}

}  // namespace pball
