#pragma once

// Tape-style computation graph with reverse-mode differentiation. Every node
// keeps its forward output, so intermediate activations stay addressable.

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pball/kernels.hpp"
#include "pball/tensor.hpp"

namespace pball {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  leaf,
  conv2d,
  relu,
  maxpool2,
  batchnorm,
  linear,
  reshape,
  add,
  sub,
  scale,
  add_scalar,
  square,
  sum,
  squared_distance,
  select,
  channel_max,
  softmax_cross_entropy,
  sigmoid_bce,
};

class CompGraph {
 public:
  // Receives the node's output gradient and one slot per parent. A slot is
  // null when that parent does not require a gradient.
  using BackwardFn = std::function<void(const CompGraph& graph, const Tensor& grad_out,
                                        std::span<Tensor* const> parent_grads)>;

  NodeId leaf(Tensor value, bool requires_grad = true) {
    return push(OpKind::leaf, {}, std::move(value), nullptr, requires_grad);
  }

  // Appends an operation node. requires_grad is inherited from the parents.
  NodeId push(OpKind kind, std::vector<NodeId> parents, Tensor value, BackwardFn backward) {
    bool rg = false;
    for (NodeId p : parents) rg = rg || nodes_.at(p.index).requires_grad;
    return push(kind, std::move(parents), std::move(value), std::move(backward), rg);
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_.at(id.index).parents; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse accumulation from a scalar seed. Previously computed gradients are
  // discarded.
  void backward(NodeId seed) {
    const Tensor& out = value(seed);
    if (out.size() != 1) {
      throw ShapeError("backward: seed node must be scalar, got shape " + shape_str(out.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[seed.index] = Tensor(out.shape(), 1.0);
    std::vector<Tensor*> slots;
    for (std::size_t k = seed.index + 1; k-- > 0;) {
      Node& node = nodes_[k];
      if (!grads_[k] || !node.backward) continue;
      slots.clear();
      for (NodeId p : node.parents) {
        if (!nodes_[p.index].requires_grad) {
          slots.push_back(nullptr);
          continue;
        }
        auto& slot = grads_[p.index];
        if (!slot) slot = Tensor(nodes_[p.index].value.shape(), 0.0);
        slots.push_back(&*slot);
      }
      node.backward(*this, *grads_[k], slots);
    }
  }

  // Gradient of the last backward() seed with respect to `id`, if reachable.
  const Tensor* grad(NodeId id) const {
    if (id.index >= grads_.size() || !grads_[id.index]) return nullptr;
    return &*grads_[id.index];
  }

  const Tensor& grad_or_throw(NodeId id) const {
    const Tensor* g = grad(id);
    if (!g) throw ValidationError("node " + std::to_string(id.index) + " has no gradient");
    return *g;
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> parents;
    Tensor value;
    BackwardFn backward;
    bool requires_grad;
  };

  NodeId push(OpKind kind, std::vector<NodeId> parents, Tensor value, BackwardFn backward,
              bool requires_grad) {
    for (NodeId p : parents) {
      if (p.index >= nodes_.size()) throw ValidationError("graph: parent id out of range");
    }
    nodes_.push_back(Node{kind, std::move(parents), std::move(value),
                          requires_grad ? std::move(backward) : nullptr, requires_grad});
    return NodeId{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

// Differentiable operations. Each takes the graph and parent ids and returns
// the new node.
namespace ad {

inline NodeId conv2d(CompGraph& g, NodeId x, NodeId w, NodeId b, std::size_t stride,
                     std::size_t pad) {
  Tensor out = kernels::conv2d(g.value(x), g.value(w), g.value(b), stride, pad);
  return g.push(OpKind::conv2d, {x, w, b}, std::move(out),
                [x, w, b, stride, pad](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  kernels::conv2d_backward(gr.value(x), gr.value(w), gr.value(b), stride, pad,
                                           go, pg[0], pg[1], pg[2]);
                });
}

inline NodeId relu(CompGraph& g, NodeId x) {
  return g.push(OpKind::relu, {x}, kernels::relu(g.value(x)),
                [x](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  if (pg[0]) kernels::relu_backward(gr.value(x), go, *pg[0]);
                });
}

inline NodeId maxpool2(CompGraph& g, NodeId x) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  Tensor out = kernels::maxpool2(g.value(x), idx.get());
  return g.push(OpKind::maxpool2, {x}, std::move(out),
                [idx](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (pg[0]) kernels::maxpool2_backward(*idx, go, *pg[0]);
                });
}

// Inference-mode batch norm; running statistics are constants.
inline NodeId batchnorm_eval(CompGraph& g, NodeId x, Tensor mean, Tensor var, NodeId gamma,
                             NodeId beta) {
  Tensor out = kernels::batchnorm_eval(g.value(x), mean, var, g.value(gamma), g.value(beta));
  auto stats = std::make_shared<std::pair<Tensor, Tensor>>(std::move(mean), std::move(var));
  return g.push(OpKind::batchnorm, {x, gamma, beta}, std::move(out),
                [x, gamma, stats](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  kernels::batchnorm_eval_backward(gr.value(x), stats->first, stats->second,
                                                   gr.value(gamma), go, pg[0], pg[1], pg[2]);
                });
}

inline NodeId linear(CompGraph& g, NodeId x, NodeId w, NodeId b) {
  Tensor out = kernels::linear(g.value(x), g.value(w), g.value(b));
  return g.push(OpKind::linear, {x, w, b}, std::move(out),
                [x, w](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  kernels::linear_backward(gr.value(x), gr.value(w), go, pg[0], pg[1], pg[2]);
                });
}

inline NodeId reshape(CompGraph& g, NodeId x, Shape shape) {
  return g.push(OpKind::reshape, {x}, g.value(x).reshaped(std::move(shape)),
                [](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i];
                });
}

inline NodeId flatten(CompGraph& g, NodeId x) { return reshape(g, x, Shape{g.value(x).size()}); }

inline NodeId add(CompGraph& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.push(OpKind::add, {a, b}, std::move(out),
                [](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  for (Tensor* t : pg) {
                    if (!t) continue;
                    for (std::size_t i = 0; i < go.size(); ++i) (*t)[i] += go[i];
                  }
                });
}

inline NodeId sub(CompGraph& g, NodeId a, NodeId b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Tensor out = g.value(a);
  const Tensor& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.push(OpKind::sub, {a, b}, std::move(out),
                [](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (pg[0]) for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i];
                  if (pg[1]) for (std::size_t i = 0; i < go.size(); ++i) (*pg[1])[i] -= go[i];
                });
}

inline NodeId scale(CompGraph& g, NodeId a, double factor) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v *= factor;
  return g.push(OpKind::scale, {a}, std::move(out),
                [factor](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += factor * go[i];
                });
}

inline NodeId add_scalar(CompGraph& g, NodeId a, double offset) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v += offset;
  return g.push(OpKind::add_scalar, {a}, std::move(out),
                [](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i];
                });
}

inline NodeId square(CompGraph& g, NodeId a) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v *= v;
  return g.push(OpKind::square, {a}, std::move(out),
                [a](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  const Tensor& av = gr.value(a);
                  for (std::size_t i = 0; i < go.size(); ++i) (*pg[0])[i] += go[i] * 2.0 * av[i];
                });
}

inline NodeId sum(CompGraph& g, NodeId a) {
  return g.push(OpKind::sum, {a}, Tensor::scalar(g.value(a).sum()),
                [](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (double& v : pg[0]->data()) v += go[0];
                });
}

// ||a - reference||^2 with the reference held constant.
inline NodeId squared_distance(CompGraph& g, NodeId a, Tensor reference) {
  require_same_shape(g.value(a), reference, "squared_distance");
  const Tensor& av = g.value(a);
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - reference[i];
    s += d * d;
  }
  auto ref = std::make_shared<Tensor>(std::move(reference));
  return g.push(OpKind::squared_distance, {a}, Tensor::scalar(s),
                [a, ref](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  const Tensor& av = gr.value(a);
                  for (std::size_t i = 0; i < av.size(); ++i) {
                    (*pg[0])[i] += go[0] * 2.0 * (av[i] - (*ref)[i]);
                  }
                });
}

// Scalar element at a flat index.
inline NodeId select(CompGraph& g, NodeId a, std::size_t index) {
  const Tensor& av = g.value(a);
  if (index >= av.size()) throw ShapeError("select: index out of range");
  return g.push(OpKind::select, {a}, Tensor::scalar(av[index]),
                [index](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (pg[0]) (*pg[0])[index] += go[0];
                });
}

// [C,H,W] -> [C]: spatial max per channel, gradient to the first maximal cell.
inline NodeId channel_max(CompGraph& g, NodeId a) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  Tensor out = kernels::channel_max(g.value(a), idx.get());
  return g.push(OpKind::channel_max, {a}, std::move(out),
                [idx](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (std::size_t c = 0; c < idx->size(); ++c) (*pg[0])[(*idx)[c]] += go[c];
                });
}

inline NodeId softmax_cross_entropy(CompGraph& g, NodeId logits, std::size_t label) {
  const Tensor& lv = g.value(logits);
  require_rank(lv, 1, "softmax_cross_entropy");
  if (label >= lv.size()) throw ValidationError("softmax_cross_entropy: label out of range");
  Tensor p = kernels::softmax(lv);
  const double m = lv.max();
  double z = 0.0;
  for (double v : lv.data()) z += std::exp(v - m);
  const double loss = -(lv[label] - m - std::log(z));
  auto probs = std::make_shared<Tensor>(std::move(p));
  return g.push(OpKind::softmax_cross_entropy, {logits}, Tensor::scalar(loss),
                [probs, label](const CompGraph&, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  for (std::size_t k = 0; k < probs->size(); ++k) {
                    (*pg[0])[k] += go[0] * ((*probs)[k] - (k == label ? 1.0 : 0.0));
                  }
                });
}

// Sum over classes of binary cross-entropy with logits.
inline NodeId sigmoid_bce(CompGraph& g, NodeId scores, std::vector<double> targets) {
  const Tensor& sv = g.value(scores);
  require_rank(sv, 1, "sigmoid_bce");
  if (targets.size() != sv.size()) throw ShapeError("sigmoid_bce: target length mismatch");
  double loss = 0.0;
  for (std::size_t k = 0; k < sv.size(); ++k) {
    const double z = sv[k];
    // log(1 + exp(-|z|)) + max(z, 0) - z*t
    loss += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * targets[k];
  }
  auto t = std::make_shared<std::vector<double>>(std::move(targets));
  return g.push(OpKind::sigmoid_bce, {scores}, Tensor::scalar(loss),
                [scores, t](const CompGraph& gr, const Tensor& go, std::span<Tensor* const> pg) {
                  if (!pg[0]) return;
                  const Tensor& sv = gr.value(scores);
                  for (std::size_t k = 0; k < sv.size(); ++k) {
                    (*pg[0])[k] += go[0] * (kernels::sigmoid(sv[k]) - (*t)[k]);
                  }
                });
}

}  // namespace ad
}  // namespace pball
