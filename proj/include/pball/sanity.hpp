#pragma once

// Progressive weight randomization: re-initialise ever more of the top of a
// trained network and watch the explanations degrade.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pball/ablation.hpp"
#include "pball/eval.hpp"
#include "pball/model.hpp"

namespace pball {

struct SanityOptions {
  // Layer positions to randomize from, visited in order; empty means every
  // weighted layer from the top down.
  std::vector<std::size_t> checkpoints;
  std::uint64_t seed = 0;
  PerturbConfig perturb;
  SaliencyOptions saliency;
  PointingOptions pointing;  // primary-class trials
  bool suppress_all_regions = true;
};

struct SanityStep {
  std::size_t randomized_from = 0;  // layer count for the untouched reference
  double pointing_accuracy = 0.0;
  double mass_in_object = 0.0;      // mean fraction of saliency inside the class mask
};

struct SanityResult {
  std::vector<SanityStep> steps;  // reference first
  double chance_rate = 0.0;

  /// Least-squares slope of pointing accuracy against step index.
  double accuracy_slope() const {
    const double n = static_cast<double>(steps.size());
    if (steps.size() < 2) return 0.0;
    double mx = 0, my = 0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      mx += static_cast<double>(k);
      my += steps[k].pointing_accuracy;
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
      sxy += (static_cast<double>(k) - mx) * (steps[k].pointing_accuracy - my);
      sxx += (static_cast<double>(k) - mx) * (static_cast<double>(k) - mx);
    }
    return sxy / sxx;
  }
};

/// Weighted layer positions from the last one down to the first.
inline std::vector<std::size_t> top_down_checkpoints(const NetworkSpec& spec) {
  auto w = weighted_layer_positions(spec);
  return {w.rbegin(), w.rend()};
}

inline double mass_inside(const Tensor& map, const Mask& mask) {
  double in = 0.0, total = 0.0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    total += map[i];
    if (mask[i]) in += map[i];
  }
  return total > 0.0 ? in / total : 0.0;
}

inline SanityStep sanity_step(const Dataset& data, const Network& net, std::size_t from, const SanityOptions& opt) {
  const PerturbationExplainer ex(net, opt.perturb, opt.suppress_all_regions);
  const SaliencyFn fn = ex.fn(opt.saliency);
  PointingOptions po = opt.pointing;
  po.primary_only = true;
  po.classes.clear();
  const PointingResult pr = pointing_game(data, fn, po);
  SanityStep step;
  step.randomized_from = from;
  step.pointing_accuracy = pr.accuracy();
  double mass = 0.0;
  for (const auto& s : data) mass += mass_inside(fn({s, s.image, s.label}), s.class_mask(s.label));
  step.mass_in_object = data.empty() ? 0.0 : mass / static_cast<double>(data.size());
  return step;
}

inline SanityResult progressive_randomization(const Dataset& data, const Network& net, const SanityOptions& opt) {
  SanityResult res;
  res.chance_rate = pointing_chance_rate(data, true);
  const auto checkpoints = opt.checkpoints.empty() ? top_down_checkpoints(net.spec()) : opt.checkpoints;
  res.steps.push_back(sanity_step(data, net, net.spec().layers.size(), opt));
  for (std::size_t from : checkpoints) {
    if (from >= net.spec().layers.size()) throw ValidationError("sanity: checkpoint " + std::to_string(from) + " is past the last layer");
    res.steps.push_back(sanity_step(data, randomize_from(net, from, opt.seed), from, opt));
  }
  return res;
}

}  // namespace pball
