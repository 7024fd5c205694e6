#pragma once

// Perceptually regularised adversarial perturbations. For a clean image x and
// class i, gradient descent on x' minimises
//
//   (M_i(x') - T)^2 + lambda' * sum_{l in L} ||C_l(x') - C_l(x)||^2 + lambda * ||x' - x||^2
//
// where M_i is the class margin and C_l the ReLU activations at ordinal l.
// With lambda' = 0 or L empty the middle term is dropped entirely.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pball/graph.hpp"
#include "pball/model.hpp"
#include "pball/tensor.hpp"

namespace pball {

struct MarginSpec {
  OutputMode mode = OutputMode::single_label;
  std::size_t target = 0;
  bool suppress_all_regions = false;
  // Multi-label without suppression: flat spatial index of the tracked region.
  std::optional<std::size_t> region;

  static MarginSpec single_label(std::size_t target) { return {OutputMode::single_label, target, false, {}}; }
  static MarginSpec multi_label(std::size_t target, bool suppress_all_regions) {
    return {OutputMode::multi_label, target, suppress_all_regions, {}};
  }
};

namespace detail {

// Flat index into `out` of the competitor / region that defines the margin.
struct MarginTerms {
  std::size_t positive;
  std::optional<std::size_t> negative;
};

inline MarginTerms margin_terms(const Tensor& out, const MarginSpec& spec) {
  if (spec.mode == OutputMode::single_label) {
    if (out.rank() != 1 || out.size() < 2) {
      throw ValidationError("margin: single-label mode needs a logit vector with at least 2 classes, got " +
                            shape_str(out.shape()));
    }
    if (spec.target >= out.size()) throw ValidationError("margin: target class out of range");
    // Highest competitor, lowest index on ties.
    std::size_t best = spec.target == 0 ? 1 : 0;
    for (std::size_t j = 0; j < out.size(); ++j) {
      if (j != spec.target && out[j] > out[best]) best = j;
    }
    return {spec.target, best};
  }
  if (out.rank() == 1) {
    if (spec.target >= out.size()) throw ValidationError("margin: target class out of range");
    return {spec.target, std::nullopt};
  }
  if (out.rank() != 3) throw ShapeError("margin: multi-label response must be [K] or [K,H,W]");
  if (spec.target >= out.dim(0)) throw ValidationError("margin: target class out of range");
  const std::size_t plane = out.dim(1) * out.dim(2);
  const std::size_t base = spec.target * plane;
  if (!spec.suppress_all_regions && spec.region) {
    if (*spec.region >= plane) throw ValidationError("margin: region index out of range");
    return {base + *spec.region, std::nullopt};
  }
  return {base + argmax(out.data().subspan(base, plane)), std::nullopt};
}

}  // namespace detail

/// Single-label: C_i - max_{j != i} C_j. Multi-label: C_i for a score vector;
/// for a response map, the maximum over all regions of class i
/// (suppress_all_regions) or the response of the tracked region.
/// Non-positive exactly when label i is not assigned.
inline double margin(const Tensor& logits_or_response, const MarginSpec& spec) {
  const auto t = detail::margin_terms(logits_or_response, spec);
  const double pos = logits_or_response[t.positive];
  return t.negative ? pos - logits_or_response[*t.negative] : pos;
}

inline NodeId margin_node(CompGraph& g, NodeId output, const MarginSpec& spec) {
  const auto t = detail::margin_terms(g.value(output), spec);
  const NodeId pos = ad::select(g, output, t.positive);
  if (!t.negative) return pos;
  return ad::sub(g, pos, ad::select(g, output, *t.negative));
}

/// ReLU ordinals whose activations enter the perceptual term.
struct LayerSet {
  std::vector<std::size_t> ordinals;

  static LayerSet none() { return {}; }
  // Contiguous ordinals [first, last).
  static LayerSet range(std::size_t first, std::size_t last) {
    LayerSet s;
    for (std::size_t k = first; k < last; ++k) s.ordinals.push_back(k);
    return s;
  }
  bool empty() const { return ordinals.empty(); }

  void validate(std::size_t relu_count) const {
    for (std::size_t o : ordinals) {
      if (o >= relu_count) {
        throw ValidationError("layer set: ReLU ordinal " + std::to_string(o) + " does not exist (network has " +
                              std::to_string(relu_count) + ")");
      }
    }
  }

  std::string str() const {
    std::ostringstream os;
    os << '{';
    for (std::size_t k = 0; k < ordinals.size(); ++k) os << (k ? "," : "") << ordinals[k];
    os << '}';
    return os.str();
  }
  friend bool operator==(const LayerSet&, const LayerSet&) = default;
};

struct PerturbConfig {
  double target = -2.0;       // T, must be negative
  double lambda = 1.0;        // pixel-space weight
  double lambda_prime = 0.0;  // perceptual weight
  LayerSet layers;
  double step_size = 0.1;     // first trial step; later searches start at min(step_size, 2 * last accepted)
  int max_iters = 2000;
  double stop_tol = 1e-2;     // stop once (M - T)^2 < stop_tol
  int max_halvings = 20;
  bool clamp = false;         // clamp x' to [0,1] after optimisation
  std::uint64_t seed = 0;     // provenance only; the optimiser is deterministic

  void validate() const {
    if (!(target < 0.0)) throw ValidationError("perturb: target margin T must be negative");
    if (!(lambda >= 0.0) || !(lambda_prime >= 0.0)) throw ValidationError("perturb: weights must be non-negative");
    if (max_iters < 1) throw ValidationError("perturb: max_iters must be at least 1");
    if (!(step_size > 0.0)) throw ValidationError("perturb: step size must be positive");
    if (!(stop_tol > 0.0)) throw ValidationError("perturb: stop tolerance must be positive");
    if (max_halvings < 0) throw ValidationError("perturb: max_halvings must be non-negative");
  }

  bool uses_perceptual() const { return lambda_prime != 0.0 && !layers.empty(); }
};

struct PerturbResult {
  Tensor x_prime;
  double final_margin = 0.0;
  double final_objective = 0.0;
  int iterations_used = 0;
  std::vector<double> objective_trajectory;  // objective after each accepted step
  bool converged = false;
  std::size_t out_of_range_pixels = 0;       // values outside [0,1] before any clamp
};

struct ObjectiveValue {
  double value = 0.0;
  double margin = 0.0;
};

/// The objective for one clean image: reference activations are computed once
/// and held constant.
class PerceptualObjective {
 public:
  PerceptualObjective(const Network& net, Tensor x, MarginSpec spec, PerturbConfig cfg)
      : net_(&net), x_(std::move(x)), spec_(std::move(spec)), cfg_(std::move(cfg)) {
    cfg_.validate();
    cfg_.layers.validate(net.spec().relu_count());
    if ((spec_.mode == OutputMode::multi_label) != (net.mode() == OutputMode::multi_label)) {
      throw ValidationError("perturb: margin mode does not match the network output mode");
    }
    if (spec_.target >= net.num_classes()) throw ValidationError("perturb: target class out of range");
    Evaluation clean = evaluate(net, x_, cfg_.uses_perceptual());
    if (spec_.mode == OutputMode::multi_label && !spec_.suppress_all_regions && !spec_.region) {
      const Tensor& out = clean.output;
      const std::size_t plane = out.dim(1) * out.dim(2);
      spec_.region = argmax(out.data().subspan(spec_.target * plane, plane));
    }
    if (cfg_.uses_perceptual()) {
      for (std::size_t o : cfg_.layers.ordinals) reference_.push_back(std::move(clean.activations[o]));
    }
  }

  const Tensor& clean_image() const { return x_; }
  const MarginSpec& margin_spec() const { return spec_; }
  const PerturbConfig& config() const { return cfg_; }

  /// Value and margin without building a graph.
  ObjectiveValue value(const Tensor& x_prime) const {
    Evaluation ev = evaluate(*net_, x_prime, cfg_.uses_perceptual());
    ObjectiveValue r;
    r.margin = margin(ev.output, spec_);
    const double m = r.margin + (-cfg_.target);
    double v = m * m;
    if (cfg_.uses_perceptual()) {
      double p = 0.0;
      for (std::size_t k = 0; k < reference_.size(); ++k) {
        const double d = squared_distance(ev.activations[cfg_.layers.ordinals[k]], reference_[k]);
        p = k == 0 ? d : p + d;
      }
      v = v + p * cfg_.lambda_prime;
    }
    v = v + squared_distance(x_prime, x_) * cfg_.lambda;
    r.value = v;
    return r;
  }

  struct Graph {
    ForwardPass pass;
    NodeId margin;
    NodeId objective;

    double value() const { return pass.graph.value(objective).item(); }
    double margin_value() const { return pass.graph.value(margin).item(); }
    // Requires a prior backward().
    const Tensor& input_gradient() const { return pass.graph.grad_or_throw(pass.input); }
  };

  /// Differentiable evaluation; call graph.pass.graph.backward(graph.objective).
  Graph build(const Tensor& x_prime) const {
    Graph gr{forward_full(*net_, x_prime), {}, {}};
    CompGraph& g = gr.pass.graph;
    gr.margin = margin_node(g, gr.pass.output, spec_);
    NodeId v = ad::square(g, ad::add_scalar(g, gr.margin, -cfg_.target));
    if (cfg_.uses_perceptual()) {
      std::optional<NodeId> p;
      for (std::size_t k = 0; k < reference_.size(); ++k) {
        const NodeId d = ad::squared_distance(g, gr.pass.activations[cfg_.layers.ordinals[k]], reference_[k]);
        p = p ? ad::add(g, *p, d) : d;
      }
      v = ad::add(g, v, ad::scale(g, *p, cfg_.lambda_prime));
    }
    v = ad::add(g, v, ad::scale(g, ad::squared_distance(g, gr.pass.input, x_), cfg_.lambda));
    gr.objective = v;
    return gr;
  }

  static double squared_distance(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      s += d * d;
    }
    return s;
  }

 private:
  const Network* net_;
  Tensor x_;
  MarginSpec spec_;
  PerturbConfig cfg_;
  std::vector<Tensor> reference_;  // clean activations, ordered as cfg_.layers
};

/// Convenience: objective value plus gradient graph at x_prime.
inline PerceptualObjective::Graph objective(const Tensor& x_prime, const Tensor& x, const Network& net,
                                            const MarginSpec& spec, const PerturbConfig& cfg) {
  require_same_shape(x_prime, x, "objective");
  PerceptualObjective obj(net, x, spec, cfg);
  auto g = obj.build(x_prime);
  g.pass.graph.backward(g.objective);
  return g;
}

/// Steepest descent from x with a backtracking line search. The first search
/// starts at cfg.step_size, later ones at twice the previously accepted step
/// (capped at cfg.step_size); the step halves at most cfg.max_halvings times
/// until the objective decreases. Stops when (M - T)^2 < stop_tol, after max_iters
/// steps, or when no decreasing step exists.
inline PerturbResult find_perturbation(const Tensor& x, const Network& net, const MarginSpec& spec,
                                       const PerturbConfig& cfg) {
  const PerceptualObjective obj(net, x, spec, cfg);
  PerturbResult res;
  res.x_prime = x;
  ObjectiveValue cur = obj.value(x);
  auto stop_reached = [&](double m) {
    const double d = m - cfg.target;
    return d * d < cfg.stop_tol;
  };
  double trial_step = cfg.step_size;
  while (res.iterations_used < cfg.max_iters) {
    if (stop_reached(cur.margin)) {
      res.converged = true;
      break;
    }
    auto gr = obj.build(res.x_prime);
    const double f = gr.value();
    if (!std::isfinite(f)) {
      throw NumericError("find_perturbation: non-finite objective " + std::to_string(f) + " at iteration " +
                         std::to_string(res.iterations_used));
    }
    gr.pass.graph.backward(gr.objective);
    const Tensor& grad = gr.input_gradient();

    double step = trial_step;
    bool accepted = false;
    Tensor cand(x.shape());
    ObjectiveValue cv;
    for (int h = 0; h <= cfg.max_halvings; ++h, step *= 0.5) {
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = res.x_prime[i] - step * grad[i];
      cv = obj.value(cand);
      if (std::isfinite(cv.value) && cv.value < f) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    trial_step = std::min(cfg.step_size, 2.0 * step);
    res.x_prime = std::move(cand);
    cur = cv;
    res.objective_trajectory.push_back(cv.value);
    ++res.iterations_used;
  }
  if (!res.converged && stop_reached(cur.margin)) res.converged = true;
  res.final_margin = cur.margin;
  res.final_objective = cur.value;
  for (double v : res.x_prime.data()) res.out_of_range_pixels += (v < 0.0 || v > 1.0) ? 1 : 0;
  if (cfg.clamp) {
    for (double& v : res.x_prime.data()) v = std::clamp(v, 0.0, 1.0);
    const ObjectiveValue after = obj.value(res.x_prime);
    res.final_margin = after.margin;
    res.final_objective = after.value;
  }
  return res;
}

}  // namespace pball
