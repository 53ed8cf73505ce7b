#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "peft/adapters/adapted_model.hpp"
#include "peft/adapters/checkpoint.hpp"
#include "support/gradcheck.hpp"

namespace ad = peft::ad;
using namespace peft::adapters;
using peft::encoder::EncoderConfig;

namespace {

EncoderConfig tiny(std::size_t layers = 2) {
  EncoderConfig c;
  c.vocab_size = 19;
  c.hidden = 8;
  c.layers = layers;
  c.heads = 2;
  c.ff_dim = 12;
  c.max_positions = 12;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

AdapterSpec spec_of(Family f) {
  AdapterSpec s;
  s.family = f;
  s.reduction_factor = 2;
  s.lora_rank = 2;
  s.lora_alpha = 4;
  return s;
}

peft::encoder::TokenBatch batch() {
  peft::encoder::TokenBatch b;
  b.batch = 2;
  b.length = 4;
  b.ids = {1, 5, 9, 2, 3, 4, 0, 0};
  b.attention_mask = {1, 1, 1, 1, 1, 1, 0, 0};
  return b;
}

// Overwrites every value with small random numbers so zero-initialised paths are active.
template <class T>
void scramble(const peft::ParameterStore<T>& store, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (const auto& e : store.entries())
    for (auto& v : e.tensor.mutable_values()) v = static_cast<T>(d(rng));
}

std::shared_ptr<peft::encoder::EncoderModel<double>> base_model(std::size_t layers = 2) {
  return std::make_shared<peft::encoder::EncoderModel<double>>(peft::encoder::build_encoder<double>(tiny(layers), 1));
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / (stem + "_" + std::to_string(::getpid()))).string();
}

}  // namespace

namespace peft::adapters {
inline void PrintTo(Family f, std::ostream* os) { *os << to_string(f); }
}  // namespace peft::adapters

// Oracle: numel summed over allocated tensors vs closed form.
TEST(AdapterCount, ClosedFormMatchesAllocation) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    EncoderConfig c;
    c.hidden = 8 * (1 + trial % 5);
    c.heads = 2;
    c.layers = static_cast<std::size_t>(trial % 4);
    for (auto f : {Family::seq_bn, Family::seq_bn_inv, Family::lora}) {
      auto s = spec_of(f);
      s.reduction_factor = (trial % 2) ? 4 : 2;
      s.lora_rank = 1 + trial % 3;
      if (trial % 3 == 0) s.lora_targets = {Projection::key, Projection::output, Projection::query};
      auto a = Adapter<float>::create(s, c, 1);
      EXPECT_EQ(adapter_parameter_count(c, s), a.params().numel()) << to_string(f) << " trial " << trial;
    }
  }
}

// Counts and shares of the multilingual BERT backbone at the default adapter settings.
TEST(AdapterCount, MultilingualBertFamilies) {
  const auto c = EncoderConfig::mbert_base();
  AdapterSpec bn;
  AdapterSpec inv;
  inv.family = Family::seq_bn_inv;
  AdapterSpec lora;
  lora.family = Family::lora;
  EXPECT_EQ(adapter_parameter_count(c, bn), 894528u);
  EXPECT_EQ(adapter_parameter_count(c, inv), 1190592u);
  EXPECT_EQ(adapter_parameter_count(c, lora), 294912u);
  // allocation oracle at full geometry (adapters only, no backbone)
  EXPECT_EQ(Adapter<float>::create(inv, c, 0).params().numel(), 1190592u);
  const double denom = static_cast<double>(peft::encoder::backbone_parameter_count(c));
  EXPECT_NEAR(100.0 * 894528 / denom, 0.505, 5e-4);
  EXPECT_NEAR(100.0 * 1190592 / denom, 0.672, 5e-4);
  EXPECT_NEAR(100.0 * 294912 / denom, 0.166, 5e-4);
}

TEST(AdapterSpec, Validation) {
  auto c = tiny();
  auto s = spec_of(Family::seq_bn);
  s.reduction_factor = 3;
  EXPECT_THROW(s.validate(c), peft::ConfigError);
  s = spec_of(Family::seq_bn_inv);
  s.invertible_split = 0.3;
  EXPECT_THROW(s.validate(c), peft::ConfigError);
  s = spec_of(Family::lora);
  s.lora_rank = 0;
  EXPECT_THROW(s.validate(c), peft::ConfigError);
  s = spec_of(Family::lora);
  s.lora_targets = {Projection::query, Projection::query};
  EXPECT_THROW(s.validate(c), peft::ConfigError);
  nlohmann::json j = spec_of(Family::lora);
  EXPECT_EQ(j.get<AdapterSpec>().lora_rank, 2u);
  j["rank"] = 3;
  EXPECT_THROW(j.get<AdapterSpec>(), peft::ConfigError);
}

TEST(ZeroInit, EveryFamilyStartsAsIdentity) {
  auto base = base_model();
  auto b = batch();
  auto ref = peft::encoder::encode(*base, b);
  auto ref_logits = peft::encoder::mlm_logits(*base, ref);
  for (auto f : {Family::seq_bn, Family::seq_bn_inv, Family::lora}) {
    auto m = attach_adapter(base, spec_of(f), 5);
    auto h = m.encode(b);
    auto logits = m.mlm_logits(h);
    for (std::size_t i = 0; i < h.numel(); ++i) ASSERT_EQ(h.values()[i], ref.values()[i]) << to_string(f);
    for (std::size_t i = 0; i < logits.numel(); ++i)
      ASSERT_EQ(logits.values()[i], ref_logits.values()[i]) << to_string(f);
    ad::current_tape<double>().clear();
  }
}

TEST(Invertible, InverseUndoesForward) {
  auto c = tiny();
  auto a = Adapter<double>::create(spec_of(Family::seq_bn_inv), c, 3);
  scramble(a.params(), 8, 0.8);
  std::mt19937_64 rng(2);
  auto e = peft::testing::random_tensor({5, 8}, rng, 1.0, false);
  auto o = invertible_forward(a, e);
  auto back = invertible_inverse(a, o);
  double moved = 0;
  for (std::size_t i = 0; i < e.numel(); ++i) {
    EXPECT_NEAR(back.values()[i], e.values()[i], 1e-12);
    moved += std::abs(o.values()[i] - e.values()[i]);
  }
  EXPECT_GT(moved, 1e-3);
}

TEST(Invertible, UnevenSplit) {
  auto c = tiny();
  auto s = spec_of(Family::seq_bn_inv);
  s.invertible_split = 0.25;
  auto a = Adapter<double>::create(s, c, 3);
  scramble(a.params(), 9);
  std::mt19937_64 rng(2);
  auto e = peft::testing::random_tensor({3, 8}, rng, 1.0, false);
  auto back = invertible_inverse(a, invertible_forward(a, e));
  for (std::size_t i = 0; i < e.numel(); ++i) EXPECT_NEAR(back.values()[i], e.values()[i], 1e-12);
}

TEST(Freezing, BackboneGetsNoGradientWhenAdapterTrains) {
  auto base = base_model();
  auto m = attach_adapter(base, spec_of(Family::seq_bn), 5);
  std::vector<std::size_t> rows = {0, 5};
  std::vector<std::int32_t> tg = {3, 4};
  ad::backward(ad::softmax_cross_entropy(m.mlm_logits_at(m.encode(batch()), rows), tg));
  for (const auto& e : base->params().entries()) EXPECT_FALSE(e.tensor.has_grad()) << e.name;
  bool any = false;
  for (const auto& e : m.language_adapters()[0]->params().entries())
    for (auto g : e.tensor.grad()) any = any || g != 0.0;
  EXPECT_TRUE(any);
  EXPECT_EQ(count_trainable(m), adapter_parameter_count(tiny(), spec_of(Family::seq_bn)));
  peft::FreezeMask mask{{"encoder"}};
  EXPECT_EQ(count_trainable(m, mask), count_trainable(m));
}

class AdapterGradients : public ::testing::TestWithParam<Family> {};

TEST_P(AdapterGradients, MatchFiniteDifferences) {
  auto base = base_model();
  auto m = attach_adapter(base, spec_of(GetParam()), 5);
  scramble(m.language_adapters()[0]->params(), 17);
  std::vector<std::size_t> rows = {1, 2, 4};
  std::vector<std::int32_t> tg = {3, 4, 7};
  auto b = batch();
  auto loss = [&] { return ad::softmax_cross_entropy(m.mlm_logits_at(m.encode(b), rows), tg); };
  std::vector<ad::Tensor<double>> leaves;
  std::vector<std::string> names;
  for (const auto& e : m.language_adapters()[0]->params().entries()) {
    leaves.push_back(e.tensor);
    names.push_back(e.name);
  }
  auto res = peft::testing::check_gradients(loss, leaves, names, 6);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

INSTANTIATE_TEST_SUITE_P(Families, AdapterGradients,
                         ::testing::Values(Family::seq_bn, Family::seq_bn_inv, Family::lora),
                         [](const auto& info) { return to_string(info.param); });

TEST(Stacking, TaskAdapterOnLanguageAdapter) {
  auto base = base_model();
  auto la = attach_adapter(base, spec_of(Family::seq_bn), 5);
  auto task = stack_task_adapter(la, spec_of(Family::seq_bn), 6);
  const auto bn = adapter_parameter_count(tiny(), spec_of(Family::seq_bn));
  EXPECT_EQ(count_trainable(task), bn);
  peft::FreezeMask mask{{"encoder", "la"}};
  EXPECT_EQ(count_trainable(task, mask), bn);
  EXPECT_THROW(stack_task_adapter(task, spec_of(Family::seq_bn), 7), peft::ConfigError);
  EXPECT_THROW(stack_task_adapter(la, spec_of(Family::lora), 7), peft::ConfigError);
  // the language view is untouched by stacking
  EXPECT_FALSE(la.task_adapter());
}

TEST(Stacking, TaskAdapterAloneIsBaseline) {
  auto base = base_model();
  AdaptedModel<double> bare(base);
  auto task = stack_task_adapter(bare, spec_of(Family::seq_bn), 6);
  EXPECT_EQ(task.language_adapters().size(), 0u);
  EXPECT_EQ(count_trainable(task), adapter_parameter_count(tiny(), spec_of(Family::seq_bn)));
}

TEST(Fusion, WeightsAreDistributionsAndGradientsFlow) {
  auto base = base_model();
  auto a = attach_adapter(base, spec_of(Family::seq_bn), 1);
  auto b = attach_adapter(base, spec_of(Family::seq_bn), 2);
  scramble(a.language_adapters()[0]->params(), 3);
  scramble(b.language_adapters()[0]->params(), 4);
  auto fused = fuse<double>({a, b}, 9);
  peft::encoder::Probe<double> probe;
  peft::encoder::ForwardContext<double> ctx;
  ctx.probe = &probe;
  ad::NoGradGuard ng;
  fused.encode(batch(), ctx);
  ASSERT_EQ(probe.fusion_weights.size(), 2u);
  for (const auto& w : probe.fusion_weights) {
    ASSERT_EQ(w.shape().back(), 2u);
    for (std::size_t r = 0; r < w.numel() / 2; ++r)
      EXPECT_NEAR(w.values()[2 * r] + w.values()[2 * r + 1], 1.0, 1e-12);
  }
  EXPECT_EQ(count_trainable(fused), peft::count_parameters(fusion_layout(tiny())));
}

TEST(Fusion, GradientsMatchFiniteDifferences) {
  auto base = base_model(1);
  auto a = attach_adapter(base, spec_of(Family::seq_bn), 1);
  auto b = attach_adapter(base, spec_of(Family::seq_bn), 2);
  scramble(a.language_adapters()[0]->params(), 3);
  scramble(b.language_adapters()[0]->params(), 4);
  auto fused = stack_task_adapter(fuse<double>({a, b}, 9), spec_of(Family::seq_bn), 3);
  scramble(fused.task_adapter()->params(), 5);
  auto head = peft::encoder::make_head<double>(tiny(1), peft::encoder::HeadKind::sequence, {"x", "y"}, 4);
  std::vector<std::int32_t> tg = {1, 0};
  auto bt = batch();
  auto loss = [&] {
    return ad::softmax_cross_entropy(peft::encoder::classify(fused.base(), head, fused.encode(bt)), tg);
  };
  std::vector<ad::Tensor<double>> leaves;
  std::vector<std::string> names;
  for (const auto& p : fused.parameters())
    if (p.tensor.requires_grad()) {
      leaves.push_back(p.tensor);
      names.push_back(p.name);
    }
  auto res = peft::testing::check_gradients(loss, leaves, names, 4);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Fusion, RejectsIncompatibleMembers) {
  auto base = base_model();
  auto other = base_model();
  auto a = attach_adapter(base, spec_of(Family::seq_bn), 1);
  auto b = attach_adapter(other, spec_of(Family::seq_bn), 2);
  EXPECT_THROW(fuse<double>({a, b}, 1), peft::ConfigError);
  auto inv = attach_adapter(base, spec_of(Family::seq_bn_inv), 2);
  EXPECT_THROW(fuse<double>({a, inv}, 1), peft::ConfigError);
  EXPECT_THROW(fuse<double>({}, 1), peft::ConfigError);
}

TEST(AdapterCheckpoint, LanguageAdapterRoundTrip) {
  const auto path = temp_path("la_ckpt");
  auto base = base_model();
  for (auto f : {Family::seq_bn, Family::seq_bn_inv, Family::lora}) {
    auto m = attach_adapter(base, spec_of(f), 5);
    scramble(m.language_adapters()[0]->params(), 6);
    peft::checkpoint::save_adapter(path, *m.language_adapters()[0]);
    auto back = peft::checkpoint::load_adapter<double>(path, tiny());
    EXPECT_EQ(back->spec().family, f);
    for (const auto& e : m.language_adapters()[0]->params().entries())
      for (std::size_t i = 0; i < e.tensor.numel(); ++i)
        ASSERT_EQ(back->params().get(e.name).values()[i], e.tensor.values()[i]);
  }
  EXPECT_THROW(peft::checkpoint::load_adapter<double>(path, tiny(3)), peft::FormatError);
  EXPECT_THROW(peft::checkpoint::load_encoder<double>(path), peft::FormatError);
  std::filesystem::remove(path);
}

TEST(AdapterCheckpoint, TaskWithFusionRoundTrip) {
  const auto path = temp_path("task_ckpt");
  auto base = base_model();
  auto a = attach_adapter(base, spec_of(Family::seq_bn), 1);
  auto b = attach_adapter(base, spec_of(Family::seq_bn), 2);
  auto model = stack_task_adapter(fuse<double>({a, b}, 9), spec_of(Family::seq_bn), 3);
  scramble(model.task_adapter()->params(), 4);
  scramble(model.fusion()->params(), 5);
  auto head = peft::encoder::make_head<double>(tiny(), peft::encoder::HeadKind::token, {"O", "B-X", "I-X"}, 4);
  peft::checkpoint::save_task(path, model, head);

  AdaptedModel<double> view(base);
  view.add_language_adapter(a.language_adapters()[0]);
  view.add_language_adapter(b.language_adapters()[0]);
  auto loaded = peft::checkpoint::load_task(path, view);
  EXPECT_EQ(loaded.head.labels, head.labels);
  EXPECT_EQ(loaded.head.kind, peft::encoder::HeadKind::token);
  ad::NoGradGuard ng;
  auto h1 = model.encode(batch()), h2 = loaded.model.encode(batch());
  for (std::size_t i = 0; i < h1.numel(); ++i) ASSERT_EQ(h1.values()[i], h2.values()[i]);

  AdaptedModel<double> wrong(base);
  wrong.add_language_adapter(a.language_adapters()[0]);
  EXPECT_THROW(peft::checkpoint::load_task(path, wrong), peft::FormatError);
  std::filesystem::remove(path);
}
