#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace pball;

namespace {

Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(TensorTest, ConstructorValidatesLength) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.sum(), 21.0);
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{6})[5], 6.0);
}

TEST(Conv2dTest, IdentityKernel) {
  Rng rng(1);
  Tensor x = oracle::random_tensor(rng, {3, 5, 4});
  Tensor w(Shape{3, 3, 1, 1}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  EXPECT_EQ(kernels::conv2d(x, w, Tensor(Shape{3}, 0.0), 1, 0), x);
}

TEST(Conv2dTest, AllOnesCountsOverlap) {
  Tensor out = kernels::conv2d(ones({1, 3, 3}), ones({1, 1, 3, 3}), Tensor(Shape{1}, 0.0), 1, 1);
  EXPECT_EQ(out.at(0, 1, 1), 9.0);
  EXPECT_EQ(out.at(0, 0, 0), 4.0);
  EXPECT_EQ(out.at(0, 0, 1), 6.0);
}

TEST(Conv2dTest, MatchesNestedLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = oracle::random_tensor(rng, {2, 5, 5});
    Tensor w = oracle::random_tensor(rng, {3, 2, 3, 3});
    Tensor b = oracle::random_tensor(rng, {3});
    const int stride = trial % 2 ? 2 : 1;
    EXPECT_LE(max_abs_diff(kernels::conv2d(x, w, b, stride, 1), oracle::conv2d(x, w, b, stride, 1)), 1e-12);
  }
}

TEST(Conv2dTest, RejectsBadShapes) {
  Tensor x(Shape{2, 5, 5});
  EXPECT_THROW(kernels::conv2d(x, Tensor(Shape{1, 3, 3, 3}), Tensor(Shape{1}), 1, 1), ShapeError);
  EXPECT_THROW(kernels::conv2d(x, Tensor(Shape{1, 2, 2, 2}), Tensor(Shape{1}), 1, 0), ShapeError);
  EXPECT_THROW(kernels::conv2d(x, Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{2}), 1, 1), ShapeError);
  // (5 + 0 - 3) / 2 + 1 is integral, (6 - 3) / 2 is not.
  EXPECT_NO_THROW(kernels::conv2d(x, Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{1}), 2, 0));
  EXPECT_THROW(kernels::conv2d(Tensor(Shape{2, 6, 6}), Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{1}), 2, 0),
               ShapeError);
}

TEST(ReluTest, ForwardAndGradient) {
  EXPECT_EQ(kernels::relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  CompGraph g;
  NodeId x = g.leaf(Tensor::vector({-1, 2}));
  g.backward(ad::sum(g, ad::relu(g, x)));
  EXPECT_EQ(*g.grad(x), Tensor::vector({0, 1}));
  CompGraph z;
  NodeId x0 = z.leaf(Tensor::vector({0.0}));
  z.backward(ad::sum(z, ad::relu(z, x0)));
  EXPECT_EQ((*z.grad(x0))[0], 0.0);
}

TEST(ReluTest, FiniteDifferences) {
  Rng rng(3);
  Tensor x = oracle::random_tensor(rng, {20});
  Tensor w = oracle::random_tensor(rng, {20});
  auto f = [&](const Tensor& v) {
    double s = 0;
    Tensor r = kernels::relu(v);
    for (std::size_t i = 0; i < v.size(); ++i) s += r[i] * w[i];
    return s;
  };
  CompGraph g;
  NodeId xn = g.leaf(x);
  NodeId wn = g.leaf(Tensor(Shape{1, 20}, w.values()), false);
  g.backward(ad::linear(g, ad::relu(g, xn), wn, g.leaf(Tensor(Shape{1}, 0.0), false)));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) < 1e-3) continue;
    EXPECT_LT(oracle::rel_err((*g.grad(xn))[i], oracle::central_diff(f, x, i)), 1e-6);
  }
}

TEST(MaxPoolTest, Basics) {
  Tensor x(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(kernels::maxpool2(x, nullptr).item(), 4.0);
  EXPECT_THROW(kernels::maxpool2(Tensor(Shape{1, 3, 2}), nullptr), ShapeError);
}

TEST(MaxPoolTest, TiesRouteToTopLeft) {
  CompGraph g;
  NodeId x = g.leaf(Tensor(Shape{1, 4, 4}, 2.0));
  NodeId y = ad::maxpool2(g, x);
  EXPECT_EQ(g.value(y), Tensor(Shape{1, 2, 2}, 2.0));
  g.backward(ad::sum(g, y));
  const Tensor& gx = *g.grad(x);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(gx.at(0, r, c), (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
}

TEST(MaxPoolTest, MatchesOracle) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    Tensor x = oracle::random_tensor(rng, {2, 4, 4});
    EXPECT_EQ(kernels::maxpool2(x, nullptr), oracle::maxpool2(x));
  }
}

TEST(BatchNormTest, IdentityAndZeroGamma) {
  Rng rng(5);
  Tensor x = oracle::random_tensor(rng, {2, 3, 3});
  Tensor zero(Shape{2}, 0.0), one(Shape{2}, 1.0);
  Tensor var(Shape{2}, 1.0 - kernels::kBatchNormEps);
  EXPECT_LE(max_abs_diff(kernels::batchnorm_eval(x, zero, var, one, zero), x), 1e-15);

  CompGraph g;
  NodeId xn = g.leaf(x);
  NodeId y = ad::batchnorm_eval(g, xn, zero, var, g.leaf(zero), g.leaf(Tensor::vector({0.5, -1})));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(g.value(y)[i], 0.5);
  g.backward(ad::sum(g, y));
  for (double v : g.grad(xn)->data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(kernels::batchnorm_eval(x, zero, Tensor::vector({1, -0.1}), one, zero), ValidationError);
}

TEST(BatchNormTest, FiniteDifferences) {
  Rng rng(6);
  Tensor x = oracle::random_tensor(rng, {3, 2, 2});
  Tensor mean = oracle::random_tensor(rng, {3}), var = oracle::random_tensor(rng, {3}, 0.1, 2.0);
  Tensor gamma = oracle::random_tensor(rng, {3}), beta = oracle::random_tensor(rng, {3});
  Tensor w = oracle::random_tensor(rng, {12});
  auto f = [&](const Tensor& v) {
    Tensor y = kernels::batchnorm_eval(v, mean, var, gamma, beta);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * y[i] * w[i];
    return s;
  };
  CompGraph g;
  NodeId xn = g.leaf(x);
  NodeId y = ad::batchnorm_eval(g, xn, mean, var, g.leaf(gamma), g.leaf(beta));
  NodeId sq = ad::square(g, ad::flatten(g, y));
  g.backward(ad::linear(g, sq, g.leaf(Tensor(Shape{1, 12}, w.values()), false), g.leaf(Tensor(Shape{1}), false)));
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_LT(oracle::rel_err((*g.grad(xn))[i], oracle::central_diff(f, x, i)), 1e-6);
}

TEST(LinearTest, Examples) {
  Tensor eye(Shape{3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
  Tensor x = Tensor::vector({0.5, -2, 3});
  EXPECT_EQ(kernels::linear(x, eye, Tensor(Shape{3}, 0.0)), x);
  EXPECT_EQ(kernels::linear(Tensor::vector({2, 3}), Tensor(Shape{1, 2}, 1.0), Tensor::vector({-1})).item(), 4.0);
  EXPECT_THROW(kernels::linear(x, Tensor(Shape{2, 2}), Tensor(Shape{2})), ShapeError);
}

TEST(LinearTest, MatchesOracle) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    Tensor x = oracle::random_tensor(rng, {7});
    Tensor w = oracle::random_tensor(rng, {4, 7}), b = oracle::random_tensor(rng, {4});
    EXPECT_LE(max_abs_diff(kernels::linear(x, w, b), oracle::linear(x, w, b)), 1e-12);
  }
}

TEST(GraphTest, SumAndSquaredNorm) {
  Rng rng(8);
  Tensor x = oracle::random_tensor(rng, {2, 3});
  CompGraph g;
  NodeId xn = g.leaf(x);
  g.backward(ad::sum(g, xn));
  EXPECT_EQ(*g.grad(xn), Tensor(x.shape(), 1.0));

  CompGraph h;
  NodeId xh = h.leaf(x);
  h.backward(ad::sum(h, ad::square(h, xh)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ((*h.grad(xh))[i], 2 * x[i]);
}

TEST(GraphTest, NonScalarSeedRejected) {
  CompGraph g;
  NodeId x = g.leaf(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(GraphTest, ParentsPrecedeChildren) {
  Network net = Network::initialized(mini_vgg(3), 1);
  Rng rng(9);
  ForwardPass p = forward_full(net, oracle::random_tensor(rng, {3, 32, 32}, 0, 1));
  for (std::size_t k = 0; k < p.graph.size(); ++k)
    for (NodeId q : p.graph.parents(NodeId{k})) EXPECT_LT(q.index, k);
}

TEST(GraphTest, BackwardIsLinear) {
  Rng rng(10);
  Tensor x = oracle::random_tensor(rng, {2, 4, 4});
  Tensor w = oracle::random_tensor(rng, {2, 2, 3, 3}), b = oracle::random_tensor(rng, {2});
  auto grads = [&](double a, double bb) {
    CompGraph g;
    NodeId xn = g.leaf(x);
    NodeId c = ad::conv2d(g, xn, g.leaf(w, false), g.leaf(b, false), 1, 1);
    NodeId f = ad::sum(g, ad::relu(g, c));
    NodeId h = ad::sum(g, ad::square(g, xn));
    g.backward(ad::add(g, ad::scale(g, f, a), ad::scale(g, h, bb)));
    return *g.grad(xn);
  };
  Tensor gf = grads(1, 0), gh = grads(0, 1), gc = grads(2.5, -0.75);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gc[i], 2.5 * gf[i] - 0.75 * gh[i], 1e-12);
}

TEST(GraphTest, GradientShapesMatchValues) {
  Network net = Network::initialized(mini_vgg(3), 2);
  Rng rng(11);
  ForwardPass p = forward_full(net, oracle::random_tensor(rng, {3, 32, 32}, 0, 1), {true, true});
  NodeId loss = ad::softmax_cross_entropy(p.graph, p.output, 1);
  p.graph.backward(loss);
  for (std::size_t k = 0; k < p.graph.size(); ++k) {
    const Tensor* gr = p.graph.grad(NodeId{k});
    if (gr) {
      EXPECT_EQ(gr->shape(), p.graph.value(NodeId{k}).shape());
    } else {
      EXPECT_FALSE(p.graph.requires_grad(NodeId{k}));
    }
  }
}

TEST(GraphTest, SmallCnnFiniteDifferences) {
  Network net = Network::initialized(mini_vgg(3), 3);
  Rng rng(12);
  Tensor x = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
  auto f = [&](const Tensor& v) {
    const Tensor out = evaluate(net, v).output;
    return out[0] * out[0] - 0.5 * out[2];
  };
  ForwardPass p = forward_full(net, x);
  CompGraph& g = p.graph;
  NodeId o0 = ad::select(g, p.output, 0);
  g.backward(ad::sub(g, ad::square(g, o0), ad::scale(g, ad::select(g, p.output, 2), 0.5)));
  const Tensor& gx = *g.grad(p.input);
  for (int k = 0; k < 10; ++k) {
    const std::size_t i = rng.below(x.size());
    EXPECT_LT(oracle::rel_err(gx[i], oracle::central_diff(f, x, i)), 1e-4) << "coordinate " << i;
  }
}

TEST(GraphTest, CrossEntropyAndBceGradients) {
  Rng rng(13);
  Tensor z = oracle::random_tensor(rng, {4}, -2, 2);
  CompGraph g;
  NodeId zn = g.leaf(z);
  g.backward(ad::softmax_cross_entropy(g, zn, 2));
  Tensor p = kernels::softmax(z);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR((*g.grad(zn))[i], p[i] - (i == 2), 1e-12);

  CompGraph h;
  NodeId zh = h.leaf(z);
  h.backward(ad::sigmoid_bce(h, zh, {1, 0, 0, 1}));
  auto f = [](const Tensor& v) {
    const double t[4] = {1, 0, 0, 1};
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double q = 1 / (1 + std::exp(-v[i]));
      s -= t[i] * std::log(q) + (1 - t[i]) * std::log(1 - q);
    }
    return s;
  };
  EXPECT_NEAR(h.value(h.size() > 0 ? NodeId{h.size() - 1} : zh).item(), f(z), 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LT(oracle::rel_err((*h.grad(zh))[i], oracle::central_diff(f, z, i)), 1e-6);
}
