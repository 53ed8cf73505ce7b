#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "peft/diffengine/ops.hpp"
#include "support/gradcheck.hpp"

using peft::ad::Tensor;
namespace ad = peft::ad;
using peft::testing::check_gradients;
using peft::testing::random_tensor;

namespace {

using Td = Tensor<double>;

// Contracts a tensor with fixed random weights so every output element matters.
Td probe_loss(const Td& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(out.shape(), rng, 1.0, false);
  return ad::sum(ad::mul(out, w));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 3}, rng, 1.0, false);
  auto eye = Td::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto c = ad::matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(c.values()[i], a.values()[i]);
}

TEST(Matmul, HandComputedProduct) {
  auto a = Td::from({2, 2}, {1, 2, 3, 4});
  auto b = Td::from({2, 1}, {5, 6});
  auto c = ad::matmul(a, b);
  ASSERT_EQ(c.shape(), (ad::Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c.values()[0], 17.0);
  EXPECT_DOUBLE_EQ(c.values()[1], 39.0);
}

TEST(Matmul, InnerMismatchIsDimensionError) {
  auto a = Td::zeros({2, 3});
  auto b = Td::zeros({2, 3});
  EXPECT_THROW(ad::matmul(a, b), peft::DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  auto x = Td::from({1, 4}, {2.5, 2.5, 2.5, 2.5});
  auto y = ad::layer_norm(x, Td::full({4}, 1.0), Td::zeros({4}), 1e-12);
  for (auto v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRow) {
  auto x = Td::from({1, 2}, {1, 3});
  auto y = ad::layer_norm(x, Td::full({2}, 1.0), Td::zeros({2}), 1e-15);
  EXPECT_NEAR(y.values()[0], -1.0, 1e-12);
  EXPECT_NEAR(y.values()[1], 1.0, 1e-12);
}

TEST(LayerNorm, ZeroGainGivesBeta) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({3, 5}, rng, 1.0, false);
  auto beta = random_tensor({5}, rng, 1.0, false);
  auto y = ad::layer_norm(x, Td::zeros({5}), beta, 1e-12);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.values()[r * 5 + j], beta.values()[j]);
}

TEST(LayerNorm, WidthMismatchIsDimensionError) {
  EXPECT_THROW(ad::layer_norm(Td::zeros({2, 4}), Td::zeros({3}), Td::zeros({3}), 1e-12), peft::DimensionError);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto logits = Td::zeros({3, 4});
  std::vector<std::int32_t> t = {0, 3, 1};
  EXPECT_NEAR(ad::softmax_cross_entropy(logits, t).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentTargetApproachesZero) {
  auto logits = Td::from({1, 3}, {200.0, 0.0, 0.0});
  std::vector<std::int32_t> t = {0};
  EXPECT_LT(ad::softmax_cross_entropy(logits, t).item(), 1e-80);
}

TEST(CrossEntropy, HandComputedTwoClass) {
  auto logits = Td::from({1, 2}, {0.0, std::log(3.0)});
  std::vector<std::int32_t> t = {0};
  EXPECT_NEAR(ad::softmax_cross_entropy(logits, t).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, AllIgnoredIsAnError) {
  std::vector<std::int32_t> t = {-100, -100};
  EXPECT_THROW(ad::softmax_cross_entropy(Td::zeros({2, 3}), t), peft::InputError);
}

TEST(CrossEntropy, IgnoredRowsGetNoGradient) {
  auto logits = Td::from({2, 2}, {0.3, -0.2, 1.0, 2.0}, true);
  std::vector<std::int32_t> t = {-100, 1};
  ad::backward(ad::softmax_cross_entropy(logits, t));
  EXPECT_EQ(logits.grad()[0], 0.0);
  EXPECT_EQ(logits.grad()[1], 0.0);
  EXPECT_NE(logits.grad()[2], 0.0);
}

TEST(CrossEntropy, TargetOutOfRangeIsInputError) {
  std::vector<std::int32_t> t = {5};
  EXPECT_THROW(ad::softmax_cross_entropy(Td::zeros({1, 3}), t), peft::InputError);
}

TEST(Backward, SumOfSquares) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  ad::backward(ad::sum(ad::mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, FrozenLeafGetsNoGradient) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  auto frozen = Td::from({2}, {3.0, 4.0}, false);
  ad::backward(ad::sum(ad::mul(x, frozen)));
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(frozen.grad_at(0), 0.0);
  EXPECT_EQ(frozen.grad_at(1), 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
}

TEST(Backward, NonScalarLossIsRejected) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  auto y = ad::scale(x, 2.0);
  EXPECT_THROW(ad::backward(y), peft::DimensionError);
  peft::ad::current_tape<double>().clear();
}

TEST(Backward, NonParticipatingLeafHoldsZeroAfterZeroGrad) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  auto unused = Td::from({3}, {1.0, 1.0, 1.0}, true);
  unused.zero_grad();
  ad::backward(ad::sum(x));
  for (auto g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, TapeIsFreedAfterBackward) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  auto loss = ad::sum(ad::gelu(x));
  EXPECT_GT(ad::current_tape<double>().size(), 0u);
  ad::backward(loss);
  EXPECT_EQ(ad::current_tape<double>().size(), 0u);
}

TEST(Backward, TapeRecordsAreTopological) {
  auto x = Td::from({2, 2}, {1, 2, 3, 4}, true);
  auto y = ad::matmul(ad::gelu(x), x);
  auto loss = ad::sum(ad::add(y, x));
  const auto& recs = ad::current_tape<double>().records();
  std::vector<std::uint64_t> produced = {x.id()};
  for (const auto& r : recs) {
    for (auto in : r.inputs) EXPECT_NE(std::find(produced.begin(), produced.end(), in), produced.end());
    produced.push_back(r.output->id);
  }
  ad::backward(loss);
}

TEST(Gelu, ZeroMapsToZero) {
  auto y = ad::gelu(Td::from({1}, {0.0}));
  EXPECT_EQ(y.item(), 0.0);
}

TEST(Gelu, MatchesTanhFormula) {
  const double x = 1.3;
  const double expect = 0.5 * x * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  EXPECT_NEAR(ad::gelu(Td::from({1}, {x})).item(), expect, 1e-14);
}

TEST(Shape, SplitThenConcatIsIdentity) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 7}, rng, 1.0, false);
  auto parts = ad::split_last_dim(x, {2, 4, 1});
  auto y = ad::concat_last_dim(parts);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.values()[i], x.values()[i]);
}

TEST(Shape, ReshapeRejectsWrongCount) {
  EXPECT_THROW(ad::reshape(Td::zeros({2, 3}), {4}), peft::DimensionError);
}

TEST(Shape, TransposeSwapsAxes) {
  auto x = Td::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = ad::transpose(x, 0, 1);
  ASSERT_EQ(y.shape(), (ad::Shape{3, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 4, 2, 5, 3, 6}));
}

TEST(Shape, AddBroadcastsTrailingOnly) {
  EXPECT_NO_THROW(ad::add(Td::zeros({2, 3}), Td::zeros({3})));
  EXPECT_THROW(ad::add(Td::zeros({2, 3}), Td::zeros({2})), peft::DimensionError);
}

TEST(Embedding, GradientAccumulatesPerRepeatedIndex) {
  std::mt19937_64 rng(11);
  auto table = random_tensor({5, 3}, rng);
  std::vector<std::int32_t> ids = {1, 3, 1, 1, 0};
  auto loss = [&] { return probe_loss(ad::embedding_lookup(table, ids)); };
  auto res = check_gradients(loss, {table}, {"table"});
  EXPECT_LT(res.max_rel_error, kTol) << res.worst;
  // row 1 is hit three times: its gradient is the sum of three probe rows
  std::mt19937_64 wrng(99);
  auto w = random_tensor({5, 3}, wrng, 1.0, false);
  table.zero_grad();
  ad::backward(loss());
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(table.grad()[3 + j], w.values()[0 * 3 + j] + w.values()[2 * 3 + j] + w.values()[3 * 3 + j], 1e-12);
  EXPECT_EQ(table.grad()[2 * 3], 0.0);  // row 2 never looked up
}

TEST(Embedding, OutOfRangeIdIsInputError) {
  std::vector<std::int32_t> ids = {7};
  EXPECT_THROW(ad::embedding_lookup(Td::zeros({5, 2}), ids), peft::InputError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every differentiable op at 64-bit.

class OpGradients : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  void expect_ok(const std::function<Td()>& f, std::vector<Td> leaves) {
    auto res = check_gradients(f, std::move(leaves));
    EXPECT_LT(res.max_rel_error, kTol) << res.worst;
    EXPECT_GT(res.checked, 0u);
  }
};

TEST_F(OpGradients, Matmul) {
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  expect_ok([&] { return probe_loss(ad::matmul(a, b)); }, {a, b});
}

TEST_F(OpGradients, MatmulTransposedB) {
  auto a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
  expect_ok([&] { return probe_loss(ad::matmul_nt(a, b)); }, {a, b});
}

TEST_F(OpGradients, BatchedMatmul) {
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 2}, rng);
  expect_ok([&] { return probe_loss(ad::bmm(a, b)); }, {a, b});
}

TEST_F(OpGradients, AddSubMulWithBroadcast) {
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({4}, rng), c = random_tensor({3, 4}, rng);
  expect_ok([&] { return probe_loss(ad::mul(ad::sub(ad::add(a, b), c), c)); }, {a, b, c});
}

TEST_F(OpGradients, ScaleSumMean) {
  auto a = random_tensor({3, 3}, rng);
  expect_ok([&] { return ad::add(ad::scale(ad::sum(ad::mul(a, a)), 0.7), ad::mean(a)); }, {a});
}

TEST_F(OpGradients, Gelu) {
  auto a = random_tensor({4, 5}, rng, 2.0);
  expect_ok([&] { return probe_loss(ad::gelu(a)); }, {a});
}

TEST_F(OpGradients, LayerNorm) {
  auto x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  expect_ok([&] { return probe_loss(ad::layer_norm(x, g, b, 1e-12)); }, {x, g, b});
}

TEST_F(OpGradients, Softmax) {
  auto x = random_tensor({3, 5}, rng);
  expect_ok([&] { return probe_loss(ad::softmax_last(x)); }, {x});
}

TEST_F(OpGradients, MaskedSoftmaxPaddedAndCausal) {
  auto s = random_tensor({2, 2, 3, 3}, rng);
  std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1};
  expect_ok([&] { return probe_loss(ad::masked_softmax(s, mask, false)); }, {s});
  expect_ok([&] { return probe_loss(ad::masked_softmax(s, mask, true)); }, {s});
}

TEST_F(OpGradients, CrossEntropy) {
  auto x = random_tensor({4, 6}, rng);
  std::vector<std::int32_t> t = {2, -100, 5, 0};
  expect_ok([&] { return ad::softmax_cross_entropy(x, t); }, {x});
}

TEST_F(OpGradients, SelectRowsWithRepeats) {
  auto x = random_tensor({5, 3}, rng);
  std::vector<std::size_t> rows = {4, 0, 4};
  expect_ok([&] { return probe_loss(ad::select_rows(x, rows)); }, {x});
}

TEST_F(OpGradients, ReshapeTranspose) {
  auto x = random_tensor({2, 3, 4}, rng);
  expect_ok([&] { return probe_loss(ad::transpose(ad::reshape(x, {2, 4, 3}), 0, 2)); }, {x});
}

TEST_F(OpGradients, ConcatSplit) {
  auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
  expect_ok(
      [&] {
        auto parts = ad::split_last_dim(ad::concat_last_dim<double>({a, b}), {1, 4});
        return ad::add(probe_loss(parts[0], 1), probe_loss(parts[1], 2));
      },
      {a, b});
}

TEST_F(OpGradients, LinearWithBias) {
  auto x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  expect_ok([&] { return probe_loss(ad::linear(x, w, &b)); }, {x, w, b});
}

TEST_F(OpGradients, DropoutWithFixedMask) {
  auto x = random_tensor({4, 4}, rng);
  expect_ok(
      [&] {
        std::mt19937_64 mask_rng(5);
        return probe_loss(ad::dropout(x, 0.3, mask_rng));
      },
      {x});
}

TEST(MlpGradients, ThreeLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  auto x = random_tensor({4, 6}, rng, 1.0, false);
  auto w1 = random_tensor({6, 8}, rng, 0.5), b1 = random_tensor({8}, rng, 0.1);
  auto w2 = random_tensor({8, 8}, rng, 0.5), b2 = random_tensor({8}, rng, 0.1);
  auto w3 = random_tensor({8, 3}, rng, 0.5), b3 = random_tensor({3}, rng, 0.1);
  std::vector<std::int32_t> targets = {0, 2, 1, 2};
  auto loss = [&] {
    auto h = ad::gelu(ad::linear(x, w1, &b1));
    h = ad::gelu(ad::linear(h, w2, &b2));
    return ad::softmax_cross_entropy(ad::linear(h, w3, &b3), targets);
  };
  auto res = check_gradients(loss, {w1, b1, w2, b2, w3, b3}, {"w1", "b1", "w2", "b2", "w3", "b3"});
  EXPECT_LT(res.max_rel_error, kTol) << res.worst;
}

TEST(Determinism, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(123);
    auto a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
    auto loss = ad::sum(ad::softmax_last(ad::gelu(ad::matmul(a, b))));
    ad::backward(loss);
    std::vector<double> out = {loss.item()};
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    return out;
  };
  auto r1 = run(), r2 = run();
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(r1[i]), std::bit_cast<std::uint64_t>(r2[i]));
}

TEST(NoGrad, GuardSuppressesRecording) {
  auto x = Td::from({2}, {1.0, 2.0}, true);
  {
    ad::NoGradGuard ng;
    auto y = ad::gelu(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(ad::current_tape<double>().size(), 0u);
}

TEST(Float32, EngineRunsInSinglePrecision) {
  auto a = Tensor<float>::from({2, 2}, {1, 2, 3, 4}, true);
  auto loss = ad::sum(ad::mul(a, a));
  ad::backward(loss);
  EXPECT_FLOAT_EQ(a.grad()[3], 8.0f);
}
