#pragma once

// Turning a perturbation x' of image x into a saliency map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include "pball/container.hpp"
#include "pball/image.hpp"
#include "pball/model.hpp"
#include "pball/perturb.hpp"
#include "pball/tensor.hpp"

namespace pball {

struct SaliencyMap {
  Tensor values;  // [H,W], non-negative
  double sigma = 0.0;
  bool guided = false;
  bool normalized = false;
  LayerSet layer_set;
};

/// Channel-averaged squared difference: out[h,w] = mean_c (x'[c,h,w] - x[c,h,w])^2.
inline Tensor raw_map(const Tensor& x, const Tensor& x_prime) {
  require_same_shape(x, x_prime, "raw_map");
  require_rank(x, 3, "raw_map");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), plane = h * w;
  Tensor out(Shape{h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < plane; ++k) {
      const double d = x_prime[ch * plane + k] - x[ch * plane + k];
      out[k] += d * d;
    }
  }
  const double inv = 1.0 / static_cast<double>(c);
  for (double& v : out.data()) v *= inv;
  return out;
}

/// Affine rescale to [0,1]; a constant map becomes all zeros.
inline Tensor normalize01(const Tensor& map) {
  Tensor out(map.shape());
  if (map.empty()) return out;
  const double lo = map.min(), hi = map.max();
  if (!(hi > lo)) return out;
  const double span = hi - lo;
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - lo) / span;
  return out;
}

/// Gradient of the class score C_i with respect to the input image.
inline Tensor class_score_gradient(const Network& net, const Tensor& x, std::size_t cls) {
  ForwardPass fp = forward_full(net, x);
  NodeId score;
  if (net.mode() == OutputMode::single_label) {
    score = ad::select(fp.graph, fp.output, cls);
  } else {
    score = ad::select(fp.graph, ad::channel_max(fp.graph, fp.output), cls);
  }
  fp.graph.backward(score);
  return fp.graph.grad_or_throw(fp.input);
}

/// raw (.) g with g the channel-averaged |gradient| scaled so its maximum is 1.
/// A zero gradient yields an all-zero map.
inline Tensor guided_from_gradient(const Tensor& raw, const Tensor& gradient) {
  require_rank(raw, 2, "guided_map raw");
  require_rank(gradient, 3, "guided_map gradient");
  const std::size_t c = gradient.dim(0), plane = gradient.dim(1) * gradient.dim(2);
  if (gradient.dim(1) != raw.dim(0) || gradient.dim(2) != raw.dim(1)) {
    throw ShapeError("guided_map: gradient spatial shape does not match the map");
  }
  Tensor g(raw.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t k = 0; k < plane; ++k) g[k] += std::abs(gradient[ch * plane + k]);
  }
  for (double& v : g.data()) v /= static_cast<double>(c);
  const double top = g.max();
  Tensor out(raw.shape());
  if (!(top > 0.0)) return out;
  for (std::size_t k = 0; k < plane; ++k) out[k] = raw[k] * (g[k] / top);
  return out;
}

inline Tensor guided_map(const Tensor& raw, const Tensor& x, const Network& net, std::size_t cls) {
  return guided_from_gradient(raw, class_score_gradient(net, x, cls));
}

struct SaliencyOptions {
  double sigma = 0.0;
  bool guided = false;
  bool normalize_first = false;
};

/// raw_map -> [normalize01] -> [guided multiply] -> gaussian_blur.
inline SaliencyMap build(const Tensor& x, const Tensor& x_prime, const Network* net, std::size_t cls,
                         const SaliencyOptions& opt, LayerSet provenance = {}) {
  SaliencyMap m;
  m.sigma = opt.sigma;
  m.guided = opt.guided;
  m.normalized = opt.normalize_first;
  m.layer_set = std::move(provenance);
  Tensor v = raw_map(x, x_prime);
  if (opt.normalize_first) v = normalize01(v);
  if (opt.guided) {
    if (!net) throw ValidationError("saliency: guided variant needs the network");
    v = guided_map(v, x, *net, cls);
  }
  m.values = gaussian_blur(v, opt.sigma);
  return m;
}

// ---------------------------------------------------------------------------
// Persistence: 16-bit PGM for viewing plus an exact float64 sidecar.

inline std::string encode_pgm16(const Tensor& map, const std::string& comment = "") {
  require_rank(map, 2, "write_pgm");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const double top = map.empty() ? 0.0 : map.max();
  std::string out = "P5\n";
  if (!comment.empty()) out += "# " + comment + "\n";
  out += std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = top > 0.0 ? std::clamp(map[i] / top, 0.0, 1.0) : 0.0;
    const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    out.push_back(static_cast<char>(q >> 8));  // PGM samples are big-endian
    out.push_back(static_cast<char>(q & 0xff));
  }
  return out;
}

inline void save_saliency(const SaliencyMap& m, const std::filesystem::path& stem, const json& extra = json::object()) {
  const std::string tag = extra.contains("config_hash") ? "config_hash " + extra["config_hash"].get<std::string>() : "";
  write_file(stem.string() + ".pgm", encode_pgm16(m.values, tag));
  Container c;
  c.header = extra;
  c.header["sigma"] = m.sigma;
  c.header["guided"] = m.guided;
  c.header["normalized"] = m.normalized;
  c.header["layer_set"] = m.layer_set.ordinals;
  c.tensors.push_back({"saliency", m.values});
  save_container(stem.string() + ".tns", c);
}

inline SaliencyMap load_saliency(const std::filesystem::path& tns) {
  const Container c = load_container(tns);
  SaliencyMap m;
  m.values = c.get("saliency");
  m.sigma = c.header.value("sigma", 0.0);
  m.guided = c.header.value("guided", false);
  m.normalized = c.header.value("normalized", false);
  if (c.header.contains("layer_set")) m.layer_set.ordinals = c.header["layer_set"].get<std::vector<std::size_t>>();
  return m;
}

}  // namespace pball
