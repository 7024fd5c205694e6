#pragma once

// Minibatch SGD with momentum. Single-label nets use softmax cross-entropy on
// the logits; multi-label nets use per-class logistic loss on the spatial
// maxima of their response maps.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pball/data.hpp"
#include "pball/model.hpp"

namespace pball {

struct TrainOptions {
  int epochs = 10;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

inline std::vector<double> multi_hot(const Sample& s, std::size_t num_classes) {
  std::vector<double> t(num_classes, 0.0);
  for (int c : s.labels) t.at(static_cast<std::size_t>(c)) = 1.0;
  return t;
}

inline bool predicts_correctly(const Network& net, const Sample& s) {
  const Tensor scores = predict_scores(net, s.image);
  if (net.mode() == OutputMode::single_label) {
    return static_cast<int>(argmax(scores.data())) == s.label;
  }
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if ((scores[c] > 0.0) != s.has_class(static_cast<int>(c))) return false;
  }
  return true;
}

/// Fraction of samples classified correctly (exact label-set match in
/// multi-label mode).
inline double accuracy(const Network& net, std::span<const Sample> data) {
  if (data.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& s : data) ok += predicts_correctly(net, s) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

inline Network train(const NetworkSpec& spec, std::span<const Sample> data, const TrainOptions& opt) {
  if (data.empty()) throw ValidationError("train: dataset is empty");
  if (opt.epochs < 0) throw ValidationError("train: epochs must be non-negative");
  if (opt.batch_size == 0) throw ValidationError("train: batch size must be positive");
  for (const auto& s : data) {
    for (int c : s.labels) {
      if (c < 0 || static_cast<std::size_t>(c) >= spec.num_classes) {
        throw ValidationError("train: sample " + std::to_string(s.id) + " has label " + std::to_string(c) +
                              " outside [0," + std::to_string(spec.num_classes) + ")");
      }
    }
  }
  Network net = Network::initialized(spec, opt.seed);
  if (opt.epochs == 0) return net;

  auto& params = net.mutable_params();
  std::vector<LayerParams> velocity, grad_acc;
  for (const auto& lp : params) {
    LayerParams v;
    for (const auto& t : lp) v.emplace_back(t.shape(), 0.0);
    velocity.push_back(v);
    grad_acc.push_back(v);
  }

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle_rng(mix_seed(opt.seed, 0x5eed));
  const auto& layers = spec.layers;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (auto& lp : grad_acc) {
        for (auto& t : lp) std::fill(t.data().begin(), t.data().end(), 0.0);
      }
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = data[order[k]];
        ForwardPass fp = forward_full(net, s.image, {.input_requires_grad = false, .params_require_grad = true});
        NodeId loss;
        if (spec.mode == OutputMode::single_label) {
          loss = ad::softmax_cross_entropy(fp.graph, fp.output, static_cast<std::size_t>(s.label));
        } else {
          const NodeId scores = ad::channel_max(fp.graph, fp.output);
          loss = ad::sigmoid_bce(fp.graph, scores, multi_hot(s, spec.num_classes));
        }
        const double lv = fp.graph.value(loss).item();
        if (!std::isfinite(lv)) {
          throw NumericError("train: loss became non-finite in epoch " + std::to_string(epoch) + " (sample " +
                             std::to_string(s.id) + ")");
        }
        fp.graph.backward(loss);
        for (std::size_t i = 0; i < layers.size(); ++i) {
          for (std::size_t slot = 0; slot < fp.params[i].size(); ++slot) {
            const Tensor* gr = fp.graph.grad(fp.params[i][slot]);
            if (!gr) continue;
            Tensor& acc = grad_acc[i][slot];
            for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += (*gr)[e];
          }
        }
      }
      for (std::size_t i = 0; i < layers.size(); ++i) {
        for (std::size_t slot = 0; slot < params[i].size(); ++slot) {
          if (!param_trainable(layers[i].kind, slot)) continue;
          Tensor& p = params[i][slot];
          Tensor& v = velocity[i][slot];
          const Tensor& gacc = grad_acc[i][slot];
          for (std::size_t e = 0; e < p.size(); ++e) {
            v[e] = opt.momentum * v[e] + gacc[e] * inv_batch;
            p[e] -= opt.lr * v[e];
          }
          if (!p.all_finite()) throw NumericError("train: parameters diverged in epoch " + std::to_string(epoch));
        }
      }
    }
  }
  net.train_accuracy = accuracy(net, data);
  return net;
}

}  // namespace pball
