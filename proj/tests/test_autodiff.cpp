#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "graftnet/autodiff.hpp"
#include "graftnet/params.hpp"

using namespace graftnet;
using graftnet::testing::gradient_error;
using graftnet::testing::random_const;
using graftnet::testing::random_param;
using graftnet::testing::Vd;
using Vf = ad::Value<float>;

namespace {

// Contract a value with fixed random weights so every output coordinate
// gets a distinct upstream gradient.
Vd probe(const Vd& y, std::uint64_t seed) {
  Rng rng(seed);
  return ad::dot(y, random_const(rng, y.shape()));
}

constexpr double kTol = 1e-3;
constexpr int kSeeds = 10;

}  // namespace

TEST(Linear, ZeroWeightGivesZero) {
  auto x = Vd::constant({3}, {1, -2, 5});
  auto y = ad::linear(x, Vd::zeros({2, 3}), Vd::zeros({2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Linear, IdentityPassesInputThrough) {
  auto x = Vd::constant({3}, {1, -2, 5});
  auto y = ad::linear(x, Vd::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Vd::zeros({3}));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Linear, ShapeMismatchThrows) {
  EXPECT_THROW(ad::linear(Vd::zeros({4}), Vd::zeros({2, 3})), DimensionError);
  EXPECT_THROW(ad::linear(Vd::zeros({3}), Vd::zeros({2, 3}), Vd::zeros({3})), DimensionError);
}

TEST(Linear, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(100 + s);
    auto x = random_param(rng, {3});
    auto w = random_param(rng, {3, 3});
    auto b = random_param(rng, {3});
    EXPECT_LT(gradient_error([&] { return probe(ad::linear(x, w, b), s); }, {x, w, b}), kTol);
    auto xs = random_param(rng, {4, 3});
    EXPECT_LT(gradient_error([&] { return probe(ad::linear(xs, w, b), s); }, {xs, w, b}), kTol);
  }
}

TEST(Activations, KnownValues) {
  EXPECT_EQ(ad::sigmoid(Vd::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(ad::tanh(Vd::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(ad::relu(Vd::scalar(-1.0)).item(), 0.0);
}

TEST(Activations, SigmoidSlopeAtZero) {
  auto x = Vd::parameter({4}, {0, 0, 0, 0});
  ad::backward(ad::sum(ad::sigmoid(x)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Activations, SigmoidStaysOpen) {
  auto y = ad::sigmoid(Vd::constant({4}, {-1e3, -30, 30, 1e3}));
  for (double p : y.data()) {
    EXPECT_GE(p, 0.0);
    EXPECT_FALSE(std::isnan(p));
  }
  auto yf = ad::sigmoid(Vf::constant({2}, {-10.f, 10.f}));
  EXPECT_GT(yf[0], 0.f);
  EXPECT_LT(yf[1], 1.f);
}

TEST(Activations, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(200 + s);
    auto x = random_param(rng, {2, 5}, 2.0);
    EXPECT_LT(gradient_error([&] { return probe(ad::tanh(x), s); }, {x}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::sigmoid(x), s); }, {x}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::relu(x), s); }, {x}), kTol);
  }
}

TEST(GroupedSoftmax, ClosedForms) {
  auto single = ad::grouped_softmax(Vd::constant({1}, {3.7}), {0}, 1);
  EXPECT_DOUBLE_EQ(single[0], 1.0);
  auto pair = ad::grouped_softmax(Vd::constant({2}, {std::log(2.0), 0.0}), {0, 0}, 1);
  EXPECT_NEAR(pair[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(pair[1], 1.0 / 3.0, 1e-12);
  auto flat = ad::grouped_softmax(Vd::constant({4}, {1, 1, 1, 1}), {0, 0, 0, 0}, 1);
  for (double v : flat.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(GroupedSoftmax, EmptyGroupIsContractViolation) {
  EXPECT_THROW(ad::grouped_softmax(Vd::constant({2}, {1, 2}), {0, 2}, 3), ContractViolation);
}

TEST(GroupedSoftmax, GroupSumsAndShiftInvariance) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 12, groups = 4;
    std::vector<std::size_t> group_of(n);
    for (std::size_t i = 0; i < n; ++i) group_of[i] = i < groups ? i : rng.below(groups);
    auto scores = random_const(rng, {n}, 5.0);
    auto p = ad::grouped_softmax(scores, group_of, groups);
    std::vector<double> total(groups, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GT(p[i], 0.0);
      total[group_of[i]] += p[i];
    }
    for (double t : total) EXPECT_NEAR(t, 1.0, 1e-9);

    std::vector<double> shifted(scores.data().begin(), scores.data().end());
    for (std::size_t i = 0; i < n; ++i) shifted[i] += 10.0 * static_cast<double>(group_of[i]) - 3.0;
    auto q = ad::grouped_softmax(Vd::constant({n}, shifted), group_of, groups);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(GroupedSoftmax, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(300 + s);
    auto x = random_param(rng, {7}, 2.0);
    std::vector<std::size_t> group_of{0, 1, 0, 2, 1, 0, 2};
    EXPECT_LT(gradient_error([&] { return probe(ad::grouped_softmax(x, group_of, 3), s); }, {x}), kTol);
  }
}

TEST(SeqEncode, ZeroParametersGiveZeroStates) {
  const std::size_t n = 4, m = 3;
  ad::LstmWeights<double> w{Vd::zeros({4 * n, m}), Vd::zeros({4 * n, n}), Vd::zeros({4 * n})};
  Rng rng(1);
  auto h = ad::seq_encode(random_const(rng, {5, m}), w);
  ASSERT_EQ(h.shape(), (ad::Shape{5, n}));
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(SeqEncode, ShapeFollowsLength) {
  Rng rng(2);
  const std::size_t n = 3, m = 2;
  ad::LstmWeights<double> w{random_const(rng, {4 * n, m}), random_const(rng, {4 * n, n}),
                            random_const(rng, {4 * n})};
  for (std::size_t len : {1u, 2u, 9u}) {
    EXPECT_EQ(ad::seq_encode(random_const(rng, {len, m}), w).shape(), (ad::Shape{len, n}));
  }
}

TEST(SeqEncode, EmptySequenceIsContractViolation) {
  const std::size_t n = 2, m = 2;
  ad::LstmWeights<double> w{Vd::zeros({4 * n, m}), Vd::zeros({4 * n, n}), Vd::zeros({4 * n})};
  EXPECT_THROW(ad::seq_encode(Vd::zeros({m}), w), ContractViolation);
  EXPECT_THROW(ad::lstm_segments(Vd::zeros({2, m}), {0, 0, 2}, w), ContractViolation);
}

TEST(SeqEncode, SegmentsMatchSeparateRuns) {
  Rng rng(3);
  const std::size_t n = 3, m = 2;
  ad::LstmWeights<double> w{random_const(rng, {4 * n, m}), random_const(rng, {4 * n, n}),
                            random_const(rng, {4 * n})};
  auto a = random_const(rng, {3, m});
  auto b = random_const(rng, {2, m});
  std::vector<double> rows(a.data().begin(), a.data().end());
  rows.insert(rows.end(), b.data().begin(), b.data().end());
  auto joint = ad::lstm_segments(Vd::constant({5, m}, rows), {0, 3, 5}, w);
  auto ha = ad::seq_encode(a, w);
  auto hb = ad::seq_encode(b, w);
  for (std::size_t i = 0; i < 3 * n; ++i) EXPECT_EQ(joint[i], ha[i]);
  for (std::size_t i = 0; i < 2 * n; ++i) EXPECT_EQ(joint[3 * n + i], hb[i]);
}

TEST(SeqEncode, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(400 + s);
    const std::size_t n = 3, m = 2;
    auto x = random_param(rng, {5, m});
    ad::LstmWeights<double> w{random_param(rng, {4 * n, m}), random_param(rng, {4 * n, n}),
                              random_param(rng, {4 * n})};
    auto loss = [&] { return probe(ad::lstm_segments(x, {0, 2, 5}, w), s); };
    EXPECT_LT(gradient_error(loss, {x, w.input_weight, w.recurrent_weight, w.bias}), kTol);
  }
}

TEST(BceLoss, ClosedForms) {
  std::vector<double> one{1.0};
  EXPECT_NEAR(ad::bce_loss(Vd::constant({1}, {0.5}), std::span<const double>(one)).item(), std::log(2.0),
              1e-12);
  EXPECT_LT(ad::bce_loss(Vd::constant({1}, {1.0 - 1e-9}), std::span<const double>(one)).item(), 1e-6);
  std::vector<double> labels{1.0, 0.0};
  EXPECT_NEAR(ad::bce_loss(Vd::constant({2}, {0.9, 0.1}), std::span<const double>(labels)).item(),
              -std::log(0.9), 1e-12);
}

TEST(BceLoss, LengthMismatchThrows) {
  std::vector<double> labels{1.0, 0.0, 1.0};
  EXPECT_THROW(ad::bce_loss(Vd::constant({2}, {0.5, 0.5}), std::span<const double>(labels)), DimensionError);
}

TEST(BceLoss, SaturatedInputsStayFinite) {
  std::vector<double> labels{1.0, 0.0, 0.0, 1.0};
  auto p = Vd::parameter({4}, {0.0, 1.0, 0.0, 1.0});
  auto loss = ad::bce_loss(p, std::span<const double>(labels));
  ad::backward(loss);
  EXPECT_TRUE(std::isfinite(loss.item()));
  EXPECT_GE(loss.item(), 0.0);
  EXPECT_FALSE(p.has_fault());
}

TEST(BceLoss, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(500 + s);
    auto z = random_param(rng, {6}, 2.0);
    std::vector<double> labels(6);
    for (auto& y : labels) y = static_cast<double>(rng.below(2));
    auto loss = [&] { return ad::bce_loss(ad::sigmoid(z), std::span<const double>(labels)); };
    EXPECT_LT(gradient_error(loss, {z}), kTol);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = Vd::parameter({3}, {1, 2, 3});
  ad::backward(ad::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, DetachedParameterHasZeroGrad) {
  auto x = Vd::parameter({2}, {1, 2});
  auto unused = Vd::parameter({2}, {3, 4});
  ad::backward(ad::sum(x));
  for (double g : unused.mutable_grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarIsContractViolation) {
  EXPECT_THROW(ad::backward(Vd::parameter({2}, {1, 2})), ContractViolation);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = Vd::parameter({2}, {1, 2});
  auto loss = ad::sum(ad::scale(x, 3.0));
  ad::backward(loss);
  ad::backward(loss);
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ComposedFfnSigmoid) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(600 + s);
    auto x = random_param(rng, {4});
    auto w1 = random_param(rng, {5, 4});
    auto b1 = random_param(rng, {5});
    auto w2 = random_param(rng, {1, 5});
    auto loss = [&] { return ad::sum(ad::sigmoid(ad::linear(ad::relu(ad::linear(x, w1, b1)), w2))); };
    EXPECT_LT(gradient_error(loss, {x, w1, b1, w2}), kTol);
  }
}

TEST(Plumbing, FiniteDifferences) {
  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(700 + s);
    auto x = random_param(rng, {5, 3});
    auto y = random_param(rng, {5, 3});
    auto f = random_param(rng, {5});
    std::vector<std::size_t> idx{4, 0, 0, 2, 3, 1};
    std::vector<std::size_t> seg{1, 0, 3, 1, 0};
    std::vector<double> wts{0.5, -1.0, 2.0, 1.5, 0.25};
    EXPECT_LT(gradient_error([&] { return probe(ad::gather_rows(x, idx), s); }, {x}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::segment_sum(x, seg, 4, wts), s); }, {x}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::scale_rows(x, f), s); }, {x, f}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::concat<double>({x, y}), s); }, {x, y}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::mul(x, y), s); }, {x, y}), kTol);
    EXPECT_LT(gradient_error([&] { return probe(ad::add(x, ad::scale(y, 0.3)), s); }, {x, y}), kTol);
    EXPECT_LT(gradient_error([&] { return ad::dot(x, y); }, {x, y}), kTol);
    EXPECT_LT(gradient_error([&] { return ad::mean(ad::reshape(ad::mul(x, x), {15})); }, {x}), kTol);
  }
}

TEST(Determinism, IdenticalInputsGiveIdenticalBits) {
  auto run = [] {
    Rng rng(42);
    const std::size_t n = 4, m = 3;
    auto x = random_param(rng, {6, m});
    ad::LstmWeights<double> w{random_param(rng, {4 * n, m}), random_param(rng, {4 * n, n}),
                              random_param(rng, {4 * n})};
    auto h = ad::lstm_segments(x, {0, 4, 6}, w);
    auto loss = ad::sum(ad::sigmoid(h));
    ad::backward(loss);
    std::vector<double> out(h.data().begin(), h.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.recurrent_weight.grad().begin(), w.recurrent_weight.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamStore<float> store;
  store.add("w", {2}, {1.f, -2.f});
  store.at("w").mutable_grad();
  store.adam_step();
  EXPECT_EQ(store.step_count(), 1u);
  EXPECT_EQ(store.at("w")[0], 1.f);
  EXPECT_EQ(store.at("w")[1], -2.f);
}

TEST(Adam, ConstantGradientMovesAgainstSign) {
  ParamStore<float> store;
  store.add("w", {2}, {0.f, 0.f});
  for (int i = 0; i < 50; ++i) {
    auto g = store.at("w").mutable_grad();
    g[0] = 1.f;
    g[1] = -1.f;
    store.adam_step();
  }
  EXPECT_LT(store.at("w")[0], 0.f);
  EXPECT_GT(store.at("w")[1], 0.f);
}

TEST(Adam, QuadraticConverges) {
  // (w - 0.5)^2 from w = 0; minimizer w = 0.5.
  ParamStore<double> store;
  store.add("w", {1}, {0.0});
  AdamConfig config;
  config.learning_rate = 0.01;
  double w = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto& p = store.at("w");
    auto d = ad::add(p, Vd::constant({1}, {-0.5}));
    ad::backward(ad::mul(d, d));
    store.adam_step(config);
    w = store.at("w")[0];
  }
  EXPECT_NEAR(w, 0.5, 1e-2);
}

TEST(Adam, NanGradientRefused) {
  ParamStore<float> store;
  store.add("w", {1}, {1.f});
  store.at("w").mutable_grad()[0] = std::nanf("");
  EXPECT_THROW(store.adam_step(), NumericFault);
  EXPECT_EQ(store.at("w")[0], 1.f);
  EXPECT_EQ(store.step_count(), 0u);
}

TEST(Checkpoint, RoundTrip) {
  ParamStore<float> store;
  store.add("a", {2, 3}, {1, 2, 3, 4, 5, 6});
  store.add("b", {1}, {-0.125f});
  const auto dir = std::filesystem::temp_directory_path() / "graftnet_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(store, dir / "model.ckpt");
  ParamStore<float> other;
  other.add("a", {2, 3}, std::vector<float>(6, 0.f));
  other.add("b", {1}, {0.f});
  load_checkpoint(other, dir / "model.ckpt");
  EXPECT_EQ(other.snapshot(), store.snapshot());

  ParamStore<float> wrong;
  wrong.add("a", {3, 2}, std::vector<float>(6, 0.f));
  wrong.add("b", {1}, {0.f});
  EXPECT_THROW(load_checkpoint(wrong, dir / "model.ckpt"), ParseError);
  std::filesystem::remove_all(dir);
}
