#pragma once

// Network descriptions, parameter initialisation, differentiable and
// inference-only forward passes, sanity-check re-initialisation and weight
// persistence.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pball/container.hpp"
#include "pball/graph.hpp"
#include "pball/kernels.hpp"
#include "pball/rng.hpp"
#include "pball/tensor.hpp"

namespace pball {

enum class LayerKind { conv2d, batchnorm, relu, maxpool2, flatten, linear };
enum class OutputMode { single_label, multi_label };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // conv: input channels, linear: features, batchnorm: channels
  std::size_t out = 0;  // conv: output channels, linear: outputs
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;

  bool has_params() const {
    return kind == LayerKind::conv2d || kind == LayerKind::batchnorm || kind == LayerKind::linear;
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t pad, std::size_t stride = 1) {
    return {LayerKind::conv2d, in, out, kernel, stride, pad};
  }
  static LayerSpec batchnorm(std::size_t channels) { return {LayerKind::batchnorm, channels, channels, 0, 1, 0}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool2() { return {LayerKind::maxpool2}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec linear(std::size_t in, std::size_t out) { return {LayerKind::linear, in, out}; }
};

struct NetworkSpec {
  std::size_t input_channels = 3;
  std::size_t input_height = 32;  // 0 = any extent (fully convolutional nets)
  std::size_t input_width = 32;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 2;
  OutputMode mode = OutputMode::single_label;

  /// Layer positions of the ReLUs, indexed by ReLU ordinal.
  std::vector<std::size_t> relu_index() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].kind == LayerKind::relu) out.push_back(i);
    }
    return out;
  }

  std::size_t relu_count() const { return relu_index().size(); }

  // Checks layer chaining; throws ShapeError describing the first problem.
  void validate() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Reference single-label architecture for 32x32 inputs: five ReLUs.
inline NetworkSpec mini_vgg(std::size_t num_classes, std::size_t input_size = 32) {
  NetworkSpec s;
  s.input_height = s.input_width = input_size;
  s.num_classes = num_classes;
  s.mode = OutputMode::single_label;
  s.layers = {LayerSpec::conv(3, 16, 3, 1),  LayerSpec::batchnorm(16), LayerSpec::relu(),
              LayerSpec::conv(16, 16, 3, 1), LayerSpec::batchnorm(16), LayerSpec::relu(),
              LayerSpec::maxpool2(),
              LayerSpec::conv(16, 32, 3, 1), LayerSpec::batchnorm(32), LayerSpec::relu(),
              LayerSpec::conv(32, 32, 3, 1), LayerSpec::batchnorm(32), LayerSpec::relu(),
              LayerSpec::maxpool2(),         LayerSpec::flatten(),
              LayerSpec::linear(32 * (input_size / 4) * (input_size / 4), 64), LayerSpec::relu(),
              LayerSpec::linear(64, num_classes)};
  return s;
}

/// Fully convolutional detector variant: the classifier head is two 1x1
/// convolutions producing a [num_classes, H/4, W/4] response map.
inline NetworkSpec mini_vgg_detector(std::size_t num_classes) {
  NetworkSpec s = mini_vgg(num_classes);
  s.input_height = s.input_width = 0;
  s.mode = OutputMode::multi_label;
  s.layers.resize(14);  // up to and including the second max pool
  s.layers.push_back(LayerSpec::conv(32, 64, 1, 0));
  s.layers.push_back(LayerSpec::relu());
  s.layers.push_back(LayerSpec::conv(64, num_classes, 1, 0));
  return s;
}

inline void NetworkSpec::validate() const {
  if (layers.empty()) throw ShapeError("network has no layers");
  if (num_classes < 1) throw ShapeError("network needs at least one class");
  // Symbolic shape propagation; spatial extents of 0 mean "unknown".
  std::size_t c = input_channels, h = input_height, w = input_width;
  bool flat = false;
  std::size_t features = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::conv2d:
        if (flat) throw ShapeError(where + "conv2d after flatten");
        if (l.in != c) throw ShapeError(where + "conv2d expects " + std::to_string(l.in) + " channels, gets " + std::to_string(c));
        if (l.kernel % 2 == 0 || l.stride == 0) throw ShapeError(where + "conv2d kernel must be odd and stride positive");
        if (h) h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
        if (w) w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
        c = l.out;
        break;
      case LayerKind::batchnorm:
        if (flat || l.in != c) throw ShapeError(where + "batchnorm channel mismatch");
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2:
        if (flat) throw ShapeError(where + "maxpool2 after flatten");
        if ((h && h % 2) || (w && w % 2)) throw ShapeError(where + "maxpool2 needs even extents");
        h /= 2;
        w /= 2;
        break;
      case LayerKind::flatten:
        if (!h || !w) throw ShapeError(where + "flatten requires a fixed input size");
        flat = true;
        features = c * h * w;
        break;
      case LayerKind::linear:
        if (!flat) throw ShapeError(where + "linear before flatten");
        if (l.in != features) throw ShapeError(where + "linear expects " + std::to_string(l.in) + " features, gets " + std::to_string(features));
        features = l.out;
        break;
    }
  }
  const LayerSpec& last = layers.back();
  if (mode == OutputMode::single_label) {
    if (last.kind != LayerKind::linear || last.out != num_classes) {
      throw ShapeError("single-label network must end in linear(num_classes)");
    }
  } else if (last.kind != LayerKind::conv2d || last.out != num_classes) {
    throw ShapeError("multi-label network must end in a conv producing num_classes maps");
  }
}

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

inline json to_json(const NetworkSpec& s) {
  json layers = json::array();
  for (const auto& l : s.layers) {
    json jl = {{"type", layer_kind_name(l.kind)}};
    if (l.kind == LayerKind::conv2d) {
      jl.update({{"in", l.in}, {"out", l.out}, {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad}});
    } else if (l.kind == LayerKind::batchnorm) {
      jl["channels"] = l.in;
    } else if (l.kind == LayerKind::linear) {
      jl.update({{"in", l.in}, {"out", l.out}});
    }
    layers.push_back(jl);
  }
  return {{"input", {s.input_channels, s.input_height, s.input_width}},
          {"num_classes", s.num_classes},
          {"mode", s.mode == OutputMode::single_label ? "single_label" : "multi_label"},
          {"layers", layers}};
}

inline NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  const auto input = j.at("input").get<std::vector<std::size_t>>();
  if (input.size() != 3) throw ValidationError("network spec: input must be [C,H,W]");
  s.input_channels = input[0];
  s.input_height = input[1];
  s.input_width = input[2];
  s.num_classes = j.at("num_classes").get<std::size_t>();
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "single_label") s.mode = OutputMode::single_label;
  else if (mode == "multi_label") s.mode = OutputMode::multi_label;
  else throw ValidationError("network spec: unknown mode '" + mode + "'");
  for (const auto& jl : j.at("layers")) {
    const auto type = jl.at("type").get<std::string>();
    if (type == "conv2d") {
      s.layers.push_back(LayerSpec::conv(jl.at("in"), jl.at("out"), jl.at("kernel"), jl.at("pad"), jl.at("stride")));
    } else if (type == "batchnorm") {
      s.layers.push_back(LayerSpec::batchnorm(jl.at("channels")));
    } else if (type == "relu") {
      s.layers.push_back(LayerSpec::relu());
    } else if (type == "maxpool2") {
      s.layers.push_back(LayerSpec::maxpool2());
    } else if (type == "flatten") {
      s.layers.push_back(LayerSpec::flatten());
    } else if (type == "linear") {
      s.layers.push_back(LayerSpec::linear(jl.at("in"), jl.at("out")));
    } else {
      throw ValidationError("network spec: unknown layer type '" + type + "'");
    }
  }
  s.validate();
  return s;
}

// Parameter tensors of one layer, in a fixed order:
//   conv2d/linear: weight, bias      batchnorm: mean, var, gamma, beta
using LayerParams = std::vector<Tensor>;

inline std::vector<const char*> param_names(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d:
    case LayerKind::linear: return {"weight", "bias"};
    case LayerKind::batchnorm: return {"mean", "var", "gamma", "beta"};
    default: return {};
  }
}

// Which parameter slots are trained (batch-norm statistics are fixed).
inline bool param_trainable(LayerKind k, std::size_t slot) {
  return k != LayerKind::batchnorm || slot >= 2;
}

/// Fresh parameters for one layer: weights uniform(-s, s) with
/// s = sqrt(6 / fan_in), zero biases; batch norm gamma=1, beta=0, mean=0, var=1.
inline LayerParams init_layer(const LayerSpec& l, Rng& rng) {
  auto uniform_tensor = [&rng](Shape shape, std::size_t fan_in) {
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(-s, s);
    return t;
  };
  switch (l.kind) {
    case LayerKind::conv2d:
      return {uniform_tensor(Shape{l.out, l.in, l.kernel, l.kernel}, l.in * l.kernel * l.kernel), Tensor(Shape{l.out})};
    case LayerKind::linear:
      return {uniform_tensor(Shape{l.out, l.in}, l.in), Tensor(Shape{l.out})};
    case LayerKind::batchnorm:
      return {Tensor(Shape{l.in}, 0.0), Tensor(Shape{l.in}, 1.0), Tensor(Shape{l.in}, 1.0), Tensor(Shape{l.in}, 0.0)};
    default:
      return {};
  }
}

class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, std::vector<LayerParams> params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    check_params();
  }

  /// Deterministic initialisation; each layer draws from its own stream so
  /// re-initialising a suffix reproduces exactly these values.
  static Network initialized(NetworkSpec spec, std::uint64_t seed) {
    spec.validate();
    std::vector<LayerParams> params;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
      Rng rng(mix_seed(seed, i));
      params.push_back(init_layer(spec.layers[i], rng));
    }
    return Network(std::move(spec), std::move(params));
  }

  const NetworkSpec& spec() const { return spec_; }
  OutputMode mode() const { return spec_.mode; }
  std::size_t num_classes() const { return spec_.num_classes; }
  const std::vector<LayerParams>& params() const { return params_; }
  std::vector<LayerParams>& mutable_params() { return params_; }

  std::optional<double> train_accuracy;

  void check_input(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != spec_.input_channels ||
        (spec_.input_height && x.dim(1) != spec_.input_height) ||
        (spec_.input_width && x.dim(2) != spec_.input_width)) {
      throw ShapeError("network input must be [" + std::to_string(spec_.input_channels) + "," +
                       std::to_string(spec_.input_height) + "," + std::to_string(spec_.input_width) +
                       "], got " + shape_str(x.shape()));
    }
  }

  void check_params() const {
    if (params_.size() != spec_.layers.size()) throw ShapeError("parameter list does not match layer count");
    Rng dummy(0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const LayerParams expect = init_layer(spec_.layers[i], dummy);
      if (expect.size() != params_[i].size()) throw ShapeError("layer " + std::to_string(i) + ": wrong parameter count");
      for (std::size_t k = 0; k < expect.size(); ++k) {
        if (expect[k].shape() != params_[i][k].shape()) {
          throw ShapeError("layer " + std::to_string(i) + " " + param_names(spec_.layers[i].kind)[k] + ": expected shape " +
                           shape_str(expect[k].shape()) + ", got " + shape_str(params_[i][k].shape()));
        }
      }
      if (spec_.layers[i].kind == LayerKind::batchnorm) {
        for (double v : params_[i][1].data()) {
          if (!(v >= 0.0)) throw ValidationError("layer " + std::to_string(i) + ": negative batch-norm variance");
        }
      }
    }
  }

  friend bool operator==(const Network& a, const Network& b) {
    return a.spec_ == b.spec_ && a.params_ == b.params_;
  }

 private:
  NetworkSpec spec_;
  std::vector<LayerParams> params_;
};

/// Per-class scores from the network output: logits for single-label nets,
/// spatial maxima of the response maps for multi-label nets.
inline Tensor class_scores(const Network& net, const Tensor& output) {
  return net.mode() == OutputMode::single_label ? output : kernels::channel_max(output);
}

struct ForwardPass {
  CompGraph graph;
  NodeId input;
  NodeId output;                     // logits [K] or response map [K,h,w]
  std::vector<NodeId> activations;   // one per ReLU ordinal
  std::vector<std::vector<NodeId>> params;  // empty inner vectors for parameter-free layers

  const Tensor& logits() const { return graph.value(output); }
  const Tensor& activation(std::size_t ordinal) const { return graph.value(activations.at(ordinal)); }
};

struct ForwardOptions {
  bool input_requires_grad = true;
  bool params_require_grad = false;
};

/// Differentiable forward pass recording every ReLU output.
inline ForwardPass forward_full(const Network& net, const Tensor& x, ForwardOptions opt = {}) {
  net.check_input(x);
  ForwardPass fp;
  CompGraph& g = fp.graph;
  fp.input = g.leaf(x, opt.input_requires_grad);
  NodeId cur = fp.input;
  const auto& layers = net.spec().layers;
  fp.params.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const LayerParams& p = net.params()[i];
    auto param = [&](std::size_t slot) {
      const NodeId id = g.leaf(p[slot], opt.params_require_grad && param_trainable(l.kind, slot));
      fp.params[i].push_back(id);
      return id;
    };
    switch (l.kind) {
      case LayerKind::conv2d: {
        const NodeId w = param(0), b = param(1);
        cur = ad::conv2d(g, cur, w, b, l.stride, l.pad);
        break;
      }
      case LayerKind::batchnorm: {
        param(0);
        param(1);
        const NodeId gamma = param(2), beta = param(3);
        cur = ad::batchnorm_eval(g, cur, p[0], p[1], gamma, beta);
        break;
      }
      case LayerKind::relu:
        cur = ad::relu(g, cur);
        fp.activations.push_back(cur);
        break;
      case LayerKind::maxpool2:
        cur = ad::maxpool2(g, cur);
        break;
      case LayerKind::flatten:
        cur = ad::flatten(g, cur);
        break;
      case LayerKind::linear: {
        const NodeId w = param(0), b = param(1);
        cur = ad::linear(g, cur, w, b);
        break;
      }
    }
  }
  fp.output = cur;
  return fp;
}

struct Evaluation {
  Tensor output;
  std::vector<Tensor> activations;  // every ReLU output, by ordinal
};

/// Inference-only forward pass. Uses the same kernels as forward_full, so
/// values agree bit for bit. With keep_activations=false only the output is kept.
inline Evaluation evaluate(const Network& net, const Tensor& x, bool keep_activations = false) {
  net.check_input(x);
  Evaluation ev;
  Tensor cur = x;
  const auto& layers = net.spec().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const LayerParams& p = net.params()[i];
    switch (l.kind) {
      case LayerKind::conv2d: cur = kernels::conv2d(cur, p[0], p[1], l.stride, l.pad); break;
      case LayerKind::batchnorm: cur = kernels::batchnorm_eval(cur, p[0], p[1], p[2], p[3]); break;
      case LayerKind::relu:
        cur = kernels::relu(cur);
        if (keep_activations) ev.activations.push_back(cur);
        break;
      case LayerKind::maxpool2: cur = kernels::maxpool2(cur); break;
      case LayerKind::flatten: cur = cur.reshaped(Shape{cur.size()}); break;
      case LayerKind::linear: cur = kernels::linear(cur, p[0], p[1]); break;
    }
  }
  ev.output = std::move(cur);
  return ev;
}

inline Tensor predict_scores(const Network& net, const Tensor& x) { return class_scores(net, evaluate(net, x).output); }

/// Classifier confidence for class c: softmax probability for single-label
/// nets, sigmoid of the class score for multi-label nets.
inline double confidence(const Network& net, const Tensor& x, std::size_t c) {
  const Tensor scores = predict_scores(net, x);
  if (c >= scores.size()) throw ValidationError("confidence: class out of range");
  if (net.mode() == OutputMode::single_label) return kernels::softmax(scores)[c];
  return kernels::sigmoid(scores[c]);
}

/// Re-initialises every parameterised layer at position >= layer_position
/// with the training initialiser; earlier layers are untouched.
inline Network randomize_from(const Network& net, std::size_t layer_position, std::uint64_t seed) {
  Network out = net;
  const auto& layers = net.spec().layers;
  for (std::size_t i = layer_position; i < layers.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    out.mutable_params()[i] = init_layer(layers[i], rng);
  }
  if (layer_position < layers.size()) out.train_accuracy.reset();
  return out;
}

/// Positions of the layers that carry weights (conv2d / linear), in order.
inline std::vector<std::size_t> weighted_layer_positions(const NetworkSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::conv2d || spec.layers[i].kind == LayerKind::linear) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight files: container with {"spec": ..., "train_accuracy": ...} header and
// one tensor per parameter named "<layer>.<slot name>".

inline Container to_container(const Network& net, const json& extra = json::object()) {
  Container c;
  c.header = extra;
  c.header["spec"] = to_json(net.spec());
  if (net.train_accuracy) c.header["train_accuracy"] = *net.train_accuracy;
  const auto& layers = net.spec().layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto names = param_names(layers[i].kind);
    for (std::size_t k = 0; k < names.size(); ++k) {
      c.tensors.push_back({std::to_string(i) + "." + names[k], net.params()[i][k]});
    }
  }
  return c;
}

inline void save_weights(const Network& net, const std::filesystem::path& path, const json& extra = json::object()) {
  save_container(path, to_container(net, extra));
}

inline Network network_from_container(const NetworkSpec& spec, const Container& c) {
  spec.validate();
  if (c.header.contains("spec") && spec_from_json(c.header["spec"]) != spec) {
    throw ShapeError("weight file was written for a different network spec");
  }
  std::vector<LayerParams> params;
  Rng dummy(0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto names = param_names(spec.layers[i].kind);
    const LayerParams expect = init_layer(spec.layers[i], dummy);
    LayerParams lp;
    for (std::size_t k = 0; k < names.size(); ++k) {
      const std::string name = std::to_string(i) + "." + names[k];
      const Tensor* found = nullptr;
      for (const auto& nt : c.tensors) {
        if (nt.name == name) found = &nt.tensor;
      }
      if (!found) throw ShapeError("weight file lacks tensor " + name);
      if (found->shape() != expect[k].shape()) {
        throw ShapeError("tensor " + name + " has shape " + shape_str(found->shape()) + ", spec expects " +
                         shape_str(expect[k].shape()));
      }
      lp.push_back(*found);
    }
    params.push_back(std::move(lp));
  }
  Network net(spec, std::move(params));
  if (c.header.contains("train_accuracy")) net.train_accuracy = c.header["train_accuracy"].get<double>();
  return net;
}

inline Network load_weights(const NetworkSpec& spec, const std::filesystem::path& path) {
  return network_from_container(spec, load_container(path));
}

// Loads a weight file using the spec stored in its own header.
inline Network load_weights(const std::filesystem::path& path) {
  const Container c = load_container(path);
  if (!c.header.contains("spec")) throw IoError(path.string() + ": weight file has no embedded spec");
  return network_from_container(spec_from_json(c.header["spec"]), c);
}

}  // namespace pball
