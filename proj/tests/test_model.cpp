#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"

using namespace pball;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pball_model_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

NetworkSpec toy_spec() {
  NetworkSpec s;
  s.input_channels = 1;
  s.input_height = 1;
  s.input_width = 2;
  s.num_classes = 2;
  s.layers = {LayerSpec::flatten(), LayerSpec::linear(2, 2)};
  return s;
}

Dataset separable_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = static_cast<int>(i);
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
    const double shift = a + b > 0 ? 0.2 : -0.2;  // keep a margin around the boundary
    s.image = Tensor(Shape{1, 1, 2}, std::vector<double>{a + shift, b + shift});
    s.label = a + b > 0 ? 1 : 0;
    s.labels = {s.label};
    d.push_back(s);
  }
  return d;
}

Network zero_net(const NetworkSpec& spec) {
  Network net = Network::initialized(spec, 0);
  for (auto& layer : net.mutable_params()) {
    for (auto& t : layer) {
      for (double& v : t.data()) v = 0.0;
    }
  }
  // keep batch-norm variances legal
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::batchnorm) {
      for (double& v : net.mutable_params()[i][1].data()) v = 1.0;
    }
  }
  return net;
}

}  // namespace

TEST(NetworkSpecTest, MiniVggHasFiveRelus) {
  const NetworkSpec s = mini_vgg(4);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.relu_count(), 5u);
  const auto idx = s.relu_index();
  for (std::size_t k = 0; k < idx.size(); ++k) EXPECT_EQ(s.layers[idx[k]].kind, LayerKind::relu);
  EXPECT_NO_THROW(mini_vgg_detector(4).validate());
  EXPECT_EQ(spec_from_json(to_json(s)), s);
}

TEST(NetworkSpecTest, RejectsBadChains) {
  NetworkSpec s = mini_vgg(4);
  s.layers[3].in = 8;
  EXPECT_THROW(s.validate(), ShapeError);
  NetworkSpec t = mini_vgg(4);
  t.layers.back().out = 3;
  EXPECT_THROW(t.validate(), ShapeError);
}

TEST(ForwardTest, ZeroWeightsGiveZeros) {
  const Network net = zero_net(mini_vgg(3));
  Rng rng(1);
  ForwardPass p = forward_full(net, oracle::random_tensor(rng, {3, 32, 32}, 0, 1));
  EXPECT_EQ(p.graph.value(p.output), Tensor(Shape{3}, 0.0));
  ASSERT_EQ(p.activations.size(), 5u);
  for (NodeId a : p.activations) EXPECT_EQ(p.graph.value(a).max(), 0.0);
}

TEST(ForwardTest, SingleLinearLayer) {
  NetworkSpec s;
  s.input_channels = 2;
  s.input_height = 1;
  s.input_width = 3;
  s.num_classes = 4;
  s.layers = {LayerSpec::flatten(), LayerSpec::linear(6, 4)};
  const Network net = Network::initialized(s, 5);
  Rng rng(2);
  Tensor x = oracle::random_tensor(rng, {2, 1, 3});
  Tensor expect = kernels::linear(x.reshaped(Shape{6}), net.params()[1][0], net.params()[1][1]);
  ForwardPass p = forward_full(net, x);
  EXPECT_EQ(p.graph.value(p.output), expect);
  EXPECT_EQ(evaluate(net, x).output, expect);
}

TEST(ForwardTest, ActivationsNonNegativeAndReproducible) {
  const Network net = Network::initialized(mini_vgg(4), 3);
  Rng rng(3);
  Tensor x = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
  ForwardPass a = forward_full(net, x), b = forward_full(net, x);
  EXPECT_EQ(a.graph.value(a.output), b.graph.value(b.output));
  const Evaluation e = evaluate(net, x, true);
  EXPECT_EQ(e.output, a.graph.value(a.output));
  for (std::size_t k = 0; k < a.activations.size(); ++k) {
    EXPECT_GE(a.graph.value(a.activations[k]).min(), 0.0);
    EXPECT_EQ(e.activations[k], a.graph.value(a.activations[k]));
  }
}

TEST(ForwardTest, ShapeMismatchRejected) {
  const Network net = Network::initialized(mini_vgg(4), 3);
  EXPECT_THROW(forward_full(net, Tensor(Shape{3, 16, 16})), ShapeError);
  EXPECT_THROW(evaluate(net, Tensor(Shape{1, 32, 32})), ShapeError);
}

TEST(ForwardTest, DetectorAcceptsAnySize) {
  const Network net = Network::initialized(mini_vgg_detector(3), 4);
  Rng rng(4);
  const Tensor out = evaluate(net, oracle::random_tensor(rng, {3, 48, 40}, 0, 1)).output;
  EXPECT_EQ(out.shape(), (Shape{3, 12, 10}));
  const Tensor scores = class_scores(net, out);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = -1e300;
    for (std::size_t i = 0; i < 120; ++i) m = std::max(m, out[c * 120 + i]);
    EXPECT_EQ(scores[c], m);
  }
}

TEST(TrainTest, SeparableToySetReachesFullAccuracy) {
  const Dataset d = separable_set(64, 7);
  TrainOptions opt;
  opt.epochs = 50;
  opt.lr = 0.1;
  opt.batch_size = 8;
  opt.seed = 1;
  const Network net = train(toy_spec(), d, opt);
  EXPECT_EQ(accuracy(net, d), 1.0);
  ASSERT_TRUE(net.train_accuracy.has_value());
  EXPECT_EQ(*net.train_accuracy, 1.0);
}

TEST(TrainTest, ZeroEpochsReturnsInit) {
  const Dataset d = separable_set(16, 8);
  TrainOptions opt;
  opt.epochs = 0;
  opt.seed = 9;
  EXPECT_EQ(train(toy_spec(), d, opt), Network::initialized(toy_spec(), 9));
}

TEST(TrainTest, DeterministicGivenSeed) {
  const Dataset d = gen_shapes(40, 32, 3, 0.3, 2);
  TrainOptions opt;
  opt.epochs = 1;
  opt.seed = 4;
  EXPECT_EQ(train(mini_vgg(3), d, opt), train(mini_vgg(3), d, opt));
}

TEST(TrainTest, RejectsBadInputs) {
  TrainOptions opt;
  EXPECT_THROW(train(toy_spec(), Dataset{}, opt), ValidationError);
  Dataset d = separable_set(4, 1);
  d[2].label = 5;
  d[2].labels = {5};
  EXPECT_THROW(train(toy_spec(), d, opt), ValidationError);
}

TEST(TrainTest, DivergenceAborts) {
  Dataset d = separable_set(32, 3);
  d[5].image[0] = std::nan("");
  TrainOptions opt;
  opt.epochs = 1;
  EXPECT_THROW(train(toy_spec(), d, opt), NumericError);
}

TEST(TrainTest, MultiLabelDetectorLearnsSomething) {
  const Dataset d = gen_shapes(60, 32, 3, 0.5, 5);
  TrainOptions opt;
  opt.epochs = 2;
  opt.seed = 2;
  const Network net = train(mini_vgg_detector(3), d, opt);
  ASSERT_TRUE(net.train_accuracy.has_value());
  EXPECT_TRUE(std::isfinite(*net.train_accuracy));
}

TEST(WeightsTest, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("roundtrip");
  Network net = Network::initialized(mini_vgg(4), 11);
  net.train_accuracy = 0.75;
  save_weights(net, dir / "w.pbw");
  const Network back = load_weights(mini_vgg(4), dir / "w.pbw");
  EXPECT_EQ(back, net);
  EXPECT_EQ(back.train_accuracy, std::optional<double>(0.75));
  EXPECT_EQ(load_weights(dir / "w.pbw"), net);
}

TEST(WeightsTest, WrongSpecRejected) {
  const fs::path dir = temp_dir("wrongspec");
  save_weights(Network::initialized(mini_vgg(4), 1), dir / "w.pbw");
  EXPECT_THROW(load_weights(mini_vgg(3), dir / "w.pbw"), ShapeError);
}

TEST(WeightsTest, TruncatedFileRejected) {
  const fs::path dir = temp_dir("truncated");
  save_weights(Network::initialized(mini_vgg(2), 1), dir / "w.pbw");
  std::string bytes = read_file(dir / "w.pbw");
  bytes.pop_back();
  write_file(dir / "t.pbw", bytes);
  try {
    load_weights(dir / "t.pbw");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  write_file(dir / "m.pbw", "NOTMAGIC" + bytes.substr(8));
  EXPECT_THROW(load_weights(dir / "m.pbw"), IoError);
}

TEST(WeightsTest, FileLayout) {
  const Network net = Network::initialized(mini_vgg(2), 1);
  const std::string bytes = encode_container(to_container(net));
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), "PBALLWTS");
  std::uint64_t len = 0;
  for (int k = 7; k >= 0; --k) len = (len << 8) | static_cast<unsigned char>(bytes[8 + k]);
  const json header = json::parse(bytes.substr(16, len));
  EXPECT_TRUE(header.contains("spec"));
  std::size_t payload = 0;
  for (const auto& t : header["tensors"]) payload += t["nbytes"].get<std::size_t>();
  EXPECT_EQ(bytes.size(), 16 + len + payload);
  // first tensor is the first conv weight, little-endian float64
  const auto& first = header["tensors"][0];
  double v = 0;
  std::memcpy(&v, bytes.data() + 16 + len + first["offset"].get<std::size_t>(), 8);
  EXPECT_EQ(v, net.params()[0][0][0]);
}

TEST(RandomizeTest, PastEndIsIdentity) {
  const Network net = Network::initialized(mini_vgg(3), 1);
  EXPECT_EQ(randomize_from(net, net.spec().layers.size(), 99), net);
  EXPECT_EQ(randomize_from(net, 1000, 99), net);
}

TEST(RandomizeTest, FromZeroEqualsFreshInit) {
  Network net = Network::initialized(mini_vgg(3), 1);
  net.mutable_params()[0][0][0] += 1.0;
  EXPECT_EQ(randomize_from(net, 0, 42), Network::initialized(mini_vgg(3), 42));
}

TEST(RandomizeTest, EarlierLayersUntouched) {
  const Network net = Network::initialized(mini_vgg(3), 1);
  const auto positions = weighted_layer_positions(net.spec());
  for (std::size_t pos : positions) {
    const Network r = randomize_from(net, pos, 7);
    for (std::size_t i = 0; i < pos; ++i) EXPECT_EQ(r.params()[i], net.params()[i]);
    EXPECT_NE(r.params()[pos], net.params()[pos]);
  }
}

TEST(ConfidenceTest, SoftmaxAndSigmoid) {
  const Network net = Network::initialized(mini_vgg(3), 2);
  Rng rng(5);
  Tensor x = oracle::random_tensor(rng, {3, 32, 32}, 0, 1);
  const Tensor p = kernels::softmax(predict_scores(net, x));
  EXPECT_EQ(confidence(net, x, 1), p[1]);
  const Network det = Network::initialized(mini_vgg_detector(3), 2);
  const double s = predict_scores(det, x)[2];
  EXPECT_NEAR(confidence(det, x, 2), 1 / (1 + std::exp(-s)), 1e-15);
}
