#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "peft/encoder/checkpoint.hpp"
#include "peft/encoder/model.hpp"
#include "support/gradcheck.hpp"

namespace ad = peft::ad;
using peft::encoder::EncoderConfig;
using peft::encoder::TokenBatch;

namespace {

EncoderConfig tiny(std::size_t layers = 2) {
  EncoderConfig c;
  c.vocab_size = 23;
  c.hidden = 8;
  c.layers = layers;
  c.heads = 2;
  c.ff_dim = 12;
  c.max_positions = 16;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

TokenBatch batch_of(const std::vector<std::vector<std::int32_t>>& rows, std::size_t length) {
  TokenBatch b;
  b.batch = rows.size();
  b.length = length;
  for (const auto& r : rows) {
    for (std::size_t t = 0; t < length; ++t) {
      b.ids.push_back(t < r.size() ? r[t] : 0);
      b.attention_mask.push_back(t < r.size() ? 1 : 0);
    }
  }
  return b;
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / (stem + "_" + std::to_string(::getpid()))).string();
}

}  // namespace

// Oracle: sum of numel over the tensors the builder actually allocates.
TEST(ParameterCount, ClosedFormMatchesAllocation) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> small(1, 6);
  for (int trial = 0; trial < 20; ++trial) {
    EncoderConfig c;
    c.heads = static_cast<std::size_t>(small(rng));
    c.hidden = c.heads * static_cast<std::size_t>(small(rng));
    c.layers = static_cast<std::size_t>(small(rng)) - 1;
    c.ff_dim = static_cast<std::size_t>(small(rng)) * 3;
    c.vocab_size = 10 + static_cast<std::size_t>(small(rng)) * 7;
    c.max_positions = static_cast<std::size_t>(small(rng)) * 4;
    c.type_vocab = static_cast<std::size_t>(small(rng) % 2 + 1);
    auto model = peft::encoder::build_encoder<float>(c, 1);
    std::size_t allocated = 0, backbone = 0;
    for (const auto& e : model.params().entries()) {
      allocated += e.tensor.numel();
      if (e.name.rfind("mlm_head.", 0) != 0) backbone += e.tensor.numel();
    }
    EXPECT_EQ(peft::encoder::total_parameter_count(c), allocated) << "trial " << trial;
    EXPECT_EQ(peft::encoder::backbone_parameter_count(c), backbone) << "trial " << trial;
    EXPECT_EQ(peft::count_parameters(peft::encoder::backbone_layout(c)), backbone);
  }
}

TEST(ParameterCount, MultilingualBertBackbone) {
  // embeddings: (119547 + 512 + 2) * 768 + 2 * 768; per layer: 4(768² + 768) + 2·768·3072 + 3072 + 768 + 4·768
  const auto c = EncoderConfig::mbert_base();
  const std::size_t emb = (119547 + 512 + 2) * 768 + 2 * 768;
  const std::size_t layer = 4 * (768 * 768 + 768) + 768 * 3072 + 3072 + 3072 * 768 + 768 + 4 * 768;
  EXPECT_EQ(emb, 92208384u);
  EXPECT_EQ(layer, 7087872u);
  EXPECT_EQ(peft::encoder::backbone_parameter_count(c), emb + 12 * layer);
  EXPECT_EQ(peft::encoder::backbone_parameter_count(c), 177262848u);
}

TEST(Config, ValidationErrors) {
  auto c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), peft::ConfigError);
  c = tiny();
  c.hidden = 0;
  EXPECT_THROW(c.validate(), peft::ConfigError);
  c = tiny(0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTripAndUnknownKey) {
  auto c = tiny();
  c.objective = peft::encoder::Objective::clm;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<EncoderConfig>(), c);
  j["hiddne"] = 4;
  EXPECT_THROW(j.get<EncoderConfig>(), peft::ConfigError);
}

TEST(Encode, OutputShape) {
  auto m = peft::encoder::build_encoder<double>(tiny(), 3);
  auto h = peft::encoder::encode(m, batch_of({{1, 2, 3}, {4, 5}}, 3));
  EXPECT_EQ(h.shape(), (ad::Shape{2, 3, 8}));
}

TEST(Encode, EmbeddingsOnlyModel) {
  auto m = peft::encoder::build_encoder<double>(tiny(0), 3);
  auto h = peft::encoder::encode(m, batch_of({{1, 2}}, 2));
  EXPECT_EQ(h.shape(), (ad::Shape{1, 2, 8}));
  auto logits = peft::encoder::mlm_logits(m, h);
  EXPECT_EQ(logits.shape(), (ad::Shape{1, 2, 23}));
}

TEST(Encode, SameSeedIsBitIdentical) {
  auto m1 = peft::encoder::build_encoder<float>(tiny(), 9);
  auto m2 = peft::encoder::build_encoder<float>(tiny(), 9);
  auto b = batch_of({{1, 7, 3, 9}}, 4);
  auto h1 = peft::encoder::encode(m1, b), h2 = peft::encoder::encode(m2, b);
  for (std::size_t i = 0; i < h1.numel(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(h1.values()[i]), std::bit_cast<std::uint32_t>(h2.values()[i]));
}

TEST(Encode, PaddingDoesNotChangeRealPositions) {
  auto m = peft::encoder::build_encoder<double>(tiny(), 4);
  auto short_h = peft::encoder::encode(m, batch_of({{5, 6, 7}}, 3));
  auto b = batch_of({{5, 6, 7}}, 6);
  b.ids[3] = 11;  // arbitrary ids in padded slots
  b.ids[4] = 19;
  auto long_h = peft::encoder::encode(m, b);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(short_h.values()[t * 8 + j], long_h.values()[t * 8 + j], 1e-12);
}

TEST(Encode, AttentionRowsAreDistributions) {
  auto m = peft::encoder::build_encoder<double>(tiny(), 5);
  peft::encoder::Probe<double> probe;
  peft::encoder::ForwardContext<double> ctx;
  ctx.probe = &probe;
  auto b = batch_of({{1, 2, 3, 4}, {5, 6}}, 4);
  peft::encoder::encode(m, b, {}, ctx);
  ASSERT_EQ(probe.attention.size(), 2u);
  for (const auto& a : probe.attention) {
    ASSERT_EQ(a.shape(), (ad::Shape{2, 2, 4, 4}));
    for (std::size_t row = 0; row < 16; ++row) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.values()[row * 4 + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // second sequence: keys 2 and 3 are padding
    for (std::size_t head = 0; head < 2; ++head)
      for (std::size_t q = 0; q < 4; ++q) {
        const auto base = ((1 * 2 + head) * 4 + q) * 4;
        EXPECT_EQ(a.values()[base + 2], 0.0);
        EXPECT_EQ(a.values()[base + 3], 0.0);
      }
  }
}

TEST(Encode, CausalObjectiveIgnoresFutureTokens) {
  auto c = tiny();
  c.objective = peft::encoder::Objective::clm;
  auto m = peft::encoder::build_encoder<double>(c, 6);
  auto h1 = peft::encoder::encode(m, batch_of({{1, 2, 3, 4}}, 4));
  auto h2 = peft::encoder::encode(m, batch_of({{1, 2, 9, 10}}, 4));
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(h1.values()[j], h2.values()[j], 1e-12);
  bool differs = false;
  for (std::size_t j = 16; j < 32; ++j) differs = differs || h1.values()[j] != h2.values()[j];
  EXPECT_TRUE(differs);
}

TEST(Encode, RejectsBadInput) {
  auto m = peft::encoder::build_encoder<double>(tiny(), 6);
  EXPECT_THROW(peft::encoder::encode(m, batch_of({{1, 40}}, 2)), peft::InputError);
  EXPECT_THROW(peft::encoder::encode(m, batch_of({{1}}, 17)), peft::InputError);
  TokenBatch empty;
  EXPECT_THROW(peft::encoder::encode(m, empty), peft::InputError);
}

TEST(Encode, DropoutOnlyWhenTraining) {
  auto c = tiny();
  c.dropout = 0.3;
  auto m = peft::encoder::build_encoder<double>(c, 6);
  auto b = batch_of({{1, 2, 3}}, 3);
  auto eval1 = peft::encoder::encode(m, b), eval2 = peft::encoder::encode(m, b);
  std::mt19937_64 rng(1);
  peft::encoder::ForwardContext<double> ctx{true, &rng, nullptr};
  auto train = peft::encoder::encode(m, b, {}, ctx);
  bool differs = false;
  for (std::size_t i = 0; i < eval1.numel(); ++i) {
    EXPECT_EQ(eval1.values()[i], eval2.values()[i]);
    differs = differs || eval1.values()[i] != train.values()[i];
  }
  EXPECT_TRUE(differs);
  ad::current_tape<double>().clear();
}

TEST(MlmHead, OutputProjectionIsTiedToTokenTable) {
  auto m = peft::encoder::build_encoder<double>(tiny(0), 8);
  auto table = m.p("embeddings.token.weight");
  auto b = batch_of({{1, 2}}, 2);
  auto h = peft::encoder::encode(m, b);
  std::vector<std::size_t> rows = {0};
  std::vector<std::int32_t> target = {17};  // id never present in the input
  ad::backward(ad::softmax_cross_entropy(peft::encoder::mlm_logits_at(m, h, rows), target));
  double g = 0;
  for (std::size_t j = 0; j < 8; ++j) g += std::abs(table.grad_at(17 * 8 + j));
  EXPECT_GT(g, 0.0);
}

TEST(MlmHead, FullModelGradientsMatchFiniteDifferences) {
  auto m = peft::encoder::build_encoder<double>(tiny(), 10);
  auto b = batch_of({{3, 4, 5, 6}, {7, 8, 9}}, 4);
  std::vector<std::size_t> rows = {1, 4, 6};
  std::vector<std::int32_t> targets = {2, 11, 20};
  auto loss = [&] {
    auto h = peft::encoder::encode(m, b);
    return ad::softmax_cross_entropy(peft::encoder::mlm_logits_at(m, h, rows), targets);
  };
  std::vector<ad::Tensor<double>> leaves;
  std::vector<std::string> names;
  for (const auto& e : m.params().entries()) {
    leaves.push_back(e.tensor);
    names.push_back(e.name);
  }
  auto res = peft::testing::check_gradients(loss, leaves, names, 4);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Heads, ShapesAndValidation) {
  auto c = tiny();
  auto m = peft::encoder::build_encoder<double>(c, 11);
  auto h = peft::encoder::encode(m, batch_of({{1, 2, 3}, {4}}, 3));
  auto seq = peft::encoder::make_head<double>(c, peft::encoder::HeadKind::sequence, {"neg", "pos", "neu"}, 1);
  EXPECT_EQ(peft::encoder::classify(m, seq, h).shape(), (ad::Shape{2, 3}));
  auto tok = peft::encoder::make_head<double>(c, peft::encoder::HeadKind::token, {"O", "B-PER", "I-PER"}, 1);
  EXPECT_EQ(peft::encoder::token_classify(m, tok, h).shape(), (ad::Shape{2, 3, 3}));
  EXPECT_THROW(peft::encoder::make_head<double>(c, peft::encoder::HeadKind::sequence, {"only"}, 1),
               peft::ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (int precision : {32, 64}) {
    const auto path = temp_path("enc_ckpt");
    auto check = [&]<class T>(T) {
      auto m = peft::encoder::build_encoder<T>(tiny(), 12);
      peft::checkpoint::save_encoder(path, m);
      auto back = peft::checkpoint::load_encoder<T>(path);
      EXPECT_EQ(back.config(), m.config());
      for (const auto& e : m.params().entries()) {
        auto other = back.p(e.name);
        ASSERT_EQ(other.shape(), e.tensor.shape());
        for (std::size_t i = 0; i < other.numel(); ++i) EXPECT_EQ(other.values()[i], e.tensor.values()[i]) << e.name;
      }
    };
    if (precision == 32) check(float{});
    else check(double{});
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const auto path = temp_path("bad_ckpt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPTxxxxxxxxxxxx";
  }
  EXPECT_THROW(peft::checkpoint::load_encoder<float>(path), peft::FormatError);
  auto m = peft::encoder::build_encoder<float>(tiny(), 12);
  peft::checkpoint::save_encoder(path, m);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
  EXPECT_THROW(peft::checkpoint::load_encoder<float>(path), peft::FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(peft::checkpoint::load_encoder<float>(path), peft::FormatError);
}
