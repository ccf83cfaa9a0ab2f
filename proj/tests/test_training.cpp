#include <gtest/gtest.h>

#include <cmath>

#include "model_fixtures.hpp"
#include "vcgpt/synth_data.hpp"
#include "vcgpt/training.hpp"

using namespace vcgpt;
using vcgpt::testing::scramble;

namespace {

ModelConfig small_config(Variant v, std::size_t vocab, std::size_t resolution = 16) {
  ModelConfig c;
  c.variant = v;
  c.d_model = 16;
  c.n_heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.fusion_layers = v == Variant::vanilla ? 0 : 1;
  c.patch_size = 8;
  c.image_size = resolution;
  c.vocab_size = vocab;
  return c;
}

struct Fixture {
  Dataset data;
  Vocabulary vocab;
};

Fixture fixture(std::size_t images, std::size_t resolution = 16) {
  Fixture f{generate_split(0, Split::train, images, resolution), {}};
  f.vocab = Vocabulary::build(f.data.all_captions());
  return f;
}

std::vector<std::vector<double>> snapshot(const CaptionModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.push_back(p.tensor.values());
  return out;
}

}  // namespace

TEST(LrSchedule, WarmupThenLinearDecay) {
  EXPECT_EQ(lr_at(0, 100, 1e-3, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, 1e-3, 0.1), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, 1e-3, 0.1), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(55, 100, 1e-3, 0.1), 5e-4);
  EXPECT_EQ(lr_at(100, 100, 1e-3, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(0, 100, 1e-3, 0.0), 1e-3);
  EXPECT_THROW((void)lr_at(101, 100, 1e-3, 0.1), ContractError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.warmup_fraction = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_TRUE(phase_defaults(Phase::pretrain).is_frozen(ParamGroup::encoder));
  EXPECT_FALSE(phase_defaults(Phase::finetune).is_frozen(ParamGroup::encoder));
}

TEST(AdamW, ZeroLearningRateLeavesParametersRegardlessOfDecay) {
  for (double wd : {0.0, 0.01, 0.5}) {
    CaptionModel m(vcgpt::testing::tiny_config(Variant::full_se), 1);
    scramble(m, 2);
    TrainConfig tc;
    tc.frozen = {false, false, false};
    tc.lr_encoder = tc.lr_decoder = tc.lr_fusion = 0.0;
    tc.weight_decay = wd;
    const auto before = snapshot(m);
    AdamW opt(m, tc);
    {
      TrainableScope scope(m, tc);
      Tape tape;
      TapeScope ts(tape);
      tape.backward(vcgpt::testing::batch_loss(m, vcgpt::testing::tiny_batch(m.config(), 3)));
    }
    opt.step(m, 1.0);
    EXPECT_EQ(snapshot(m), before);
  }
}

TEST(AdamW, FirstStepMovesEachWeightByAboutLr) {
  CaptionModel m(vcgpt::testing::tiny_config(Variant::vanilla), 1);
  scramble(m, 2);
  TrainConfig tc;
  tc.frozen = {false, false, false};
  tc.weight_decay = 0.0;
  const auto before = snapshot(m);
  AdamW opt(m, tc);
  {
    TrainableScope scope(m, tc);
    Tape tape;
    TapeScope ts(tape);
    tape.backward(vcgpt::testing::batch_loss(m, vcgpt::testing::tiny_batch(m.config(), 3)));
  }
  const auto grads = [&] {
    std::vector<std::vector<double>> g;
    for (const auto& p : m.parameters()) g.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    return g;
  }();
  opt.step(m, 1.0);
  const auto after = snapshot(m);
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t k = 0; k < after[i].size(); ++k) {
      const double g = grads[i][k];
      const double want = g == 0.0 ? 0.0 : -1e-3 * g / (std::abs(g) + 1e-8);
      EXPECT_NEAR(after[i][k] - before[i][k], want, 1e-12);
    }
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  CaptionModel m(vcgpt::testing::tiny_config(Variant::full_se), 1);
  scramble(m, 2, 1.0);
  TrainConfig tc;
  tc.frozen = {false, false, false};
  tc.grad_clip = 0.01;
  {
    TrainableScope scope(m, tc);
    Tape tape;
    TapeScope ts(tape);
    tape.backward(vcgpt::testing::batch_loss(m, vcgpt::testing::tiny_batch(m.config(), 3)));
  }
  const double before = clip_grad_norm(m, tc);
  EXPECT_GT(before, 0.01);
  double sq = 0.0;
  for (const auto& p : m.parameters())
    for (double g : p.tensor.grad()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 0.01, 1e-12);
}

TEST(CeTrain, InitialLossIsNearLogVocab) {
  const auto f = fixture(8);
  const CaptionModel m(small_config(Variant::full_se, f.vocab.size()), 0);
  const double loss = dataset_loss(m, f.data, f.vocab);
  const double ln_v = std::log(static_cast<double>(f.vocab.size()));
  EXPECT_NEAR(loss, ln_v, 0.1 * ln_v);
}

TEST(CeTrain, FrozenGroupsAreBitUnchanged) {
  const auto f = fixture(6);
  const std::vector<std::array<bool, 3>> matrix{
      {true, false, false}, {false, false, false}, {true, true, false}, {false, true, true}, {true, false, true}};
  for (const auto& frozen : matrix) {
    CaptionModel m(small_config(Variant::full_se, f.vocab.size()), 1);
    const auto before = snapshot(m);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.frozen = frozen;
    ce_train(m, f.data, nullptr, f.vocab, tc);
    const auto after = snapshot(m);
    for (std::size_t i = 0; i < after.size(); ++i) {
      const auto g = static_cast<std::size_t>(m.parameters()[i].group);
      if (frozen[g]) {
        EXPECT_EQ(after[i], before[i]) << m.parameters()[i].name;
      }
    }
    bool moved = false;
    for (std::size_t i = 0; i < after.size(); ++i) moved = moved || after[i] != before[i];
    EXPECT_TRUE(moved);
  }
}

TEST(CeTrain, AllFrozenLeavesEverything) {
  const auto f = fixture(4);
  CaptionModel m(small_config(Variant::vanilla, f.vocab.size()), 1);
  const auto before = snapshot(m);
  TrainConfig tc;
  tc.epochs = 2;
  tc.frozen = {true, true, true};
  const auto report = ce_train(m, f.data, nullptr, f.vocab, tc);
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(report.epochs.size(), 2u);
}

TEST(CeTrain, DeterministicReportAndWeights) {
  const auto f = fixture(6);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 7;
  tc.frozen = {false, false, false};
  CaptionModel a(small_config(Variant::full_se, f.vocab.size()), 2), b = a;
  const auto ra = ce_train(a, f.data, &f.data, f.vocab, tc);
  const auto rb = ce_train(b, f.data, &f.data, f.vocab, tc);
  EXPECT_EQ(ra.to_csv(), rb.to_csv());
  EXPECT_EQ(snapshot(a), snapshot(b));
  tc.seed = 8;
  CaptionModel c(small_config(Variant::full_se, f.vocab.size()), 2);
  ce_train(c, f.data, nullptr, f.vocab, tc);
  EXPECT_NE(snapshot(c), snapshot(a));
}

TEST(CeTrain, ReportCsvLayout) {
  const auto f = fixture(2);
  CaptionModel m(small_config(Variant::vanilla, f.vocab.size()), 2);
  TrainConfig tc;
  tc.epochs = 3;
  const auto r = ce_train(m, f.data, &f.data, f.vocab, tc);
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,val_cider,val_bleu4,seconds");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  for (const auto& e : r.epochs) {
    EXPECT_TRUE(std::isfinite(e.val_loss));
    EXPECT_EQ(e.seconds, 0.0);
  }
}

TEST(CeTrain, OverfitsOneCaption) {
  auto f = fixture(1, 16);
  f.data.samples[0].captions.resize(1);
  const std::string caption = f.data.samples[0].captions[0];
  f.vocab = Vocabulary::build({caption});
  ModelConfig mc = small_config(Variant::full_se, f.vocab.size());
  mc.d_model = 32;
  CaptionModel m(mc, 3);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 1;
  tc.frozen = {false, false, false};
  tc.lr_encoder = tc.lr_decoder = tc.lr_fusion = 3e-3;
  const auto r = ce_train(m, f.data, &f.data, f.vocab, tc);
  for (std::size_t e = 1; e < 5; ++e) EXPECT_LE(r.epochs[e].val_loss, r.epochs[e - 1].val_loss + 1e-6) << e;
  EXPECT_LT(r.epochs.back().train_loss, 0.05);
  EXPECT_EQ(greedy_captions(m, f.data, f.vocab, 20)[0], caption);
}

TEST(CeTrain, CaptionLongerThanModelIsDataError) {
  const auto f = fixture(2);
  ModelConfig mc = small_config(Variant::vanilla, f.vocab.size());
  mc.max_text_len = 3;
  CaptionModel m(mc, 1);
  EXPECT_THROW(ce_train(m, f.data, nullptr, f.vocab, TrainConfig{}), DataError);
}

TEST(CeTrain, NonFiniteLossAbortsWithContext) {
  const auto f = fixture(2);
  CaptionModel m(small_config(Variant::vanilla, f.vocab.size()), 1);
  m.tok_emb.data()[0 + 16 * Vocabulary::kBos] = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  tc.frozen = {false, false, false};
  try {
    ce_train(m, f.data, nullptr, f.vocab, tc);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, step 0"), std::string::npos) << e.what();
  }
}

TEST(CeTrain, MismatchedInputsRejected) {
  const auto f = fixture(2);
  CaptionModel m(small_config(Variant::vanilla, f.vocab.size() + 1), 1);
  EXPECT_THROW(ce_train(m, f.data, nullptr, f.vocab, TrainConfig{}), DataError);
  CaptionModel r(small_config(Variant::vanilla, f.vocab.size(), 32), 1);
  EXPECT_THROW(ce_train(r, f.data, nullptr, f.vocab, TrainConfig{}), DataError);
}

namespace {

std::vector<std::vector<double>> scst_grads(CaptionModel& m, const Tensor& image, const std::vector<TokenId>& seq,
                                            double advantage) {
  TrainConfig tc;
  tc.frozen = {false, false, false};
  m.zero_grad();
  {
    TrainableScope scope(m, tc);
    Tape tape;
    TapeScope ts(tape);
    const Tensor v = encode_image(m, image);
    tape.backward(scst_sequence_loss(m, v, seq, advantage));
  }
  std::vector<std::vector<double>> g;
  for (const auto& p : m.parameters()) g.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  m.zero_grad();
  return g;
}

}  // namespace

TEST(Scst, ZeroAdvantageGivesZeroGradient) {
  CaptionModel m(vcgpt::testing::tiny_config(Variant::full_se), 4);
  scramble(m, 5);
  Rng rng(6);
  const Tensor img = vcgpt::testing::random_image(rng, 8);
  for (const auto& g : scst_grads(m, img, {4, 5, 2}, 0.0))
    for (double x : g) EXPECT_EQ(x, 0.0);
}

TEST(Scst, GradientIsLinearInTheReward) {
  CaptionModel m(vcgpt::testing::tiny_config(Variant::full_se), 4);
  scramble(m, 5);
  Rng rng(6);
  const Tensor img = vcgpt::testing::random_image(rng, 8);
  const std::vector<TokenId> seq{4, 7, 5, 2};
  const auto g1 = scst_grads(m, img, seq, 0.3);
  const auto g2 = scst_grads(m, img, seq, 0.6);
  const auto g7 = scst_grads(m, img, seq, 0.3 * 7.0);
  for (std::size_t i = 0; i < g1.size(); ++i)
    for (std::size_t k = 0; k < g1[i].size(); ++k) {
      EXPECT_EQ(g2[i][k], 2.0 * g1[i][k]);
      EXPECT_NEAR(g7[i][k], 7.0 * g1[i][k], 1e-12 * (1.0 + std::abs(g7[i][k])));
    }
}

TEST(Scst, LossIsMinusAdvantageTimesSequenceLogProb) {
  CaptionModel m(vcgpt::testing::tiny_config(Variant::vanilla), 4);
  scramble(m, 5);
  Rng rng(6);
  const Tensor v = encode_image(m, vcgpt::testing::random_image(rng, 8));
  const std::vector<TokenId> seq{6, 4, 2};
  double lp = 0.0;
  std::vector<TokenId> prefix{Vocabulary::kBos};
  for (TokenId t : seq) {
    const auto row = log_softmax(decode_step(m, v, prefix).logits.data());
    lp += row[static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  EXPECT_NEAR(scst_sequence_loss(m, v, seq, 0.5).item(), -0.5 * lp, 1e-12);
}

TEST(Scst, TrainerReportsRewardAndIsDeterministic) {
  const auto f = fixture(4);
  CaptionModel base(small_config(Variant::full_se, f.vocab.size()), 1);
  TrainConfig ce;
  ce.epochs = 3;
  ce.frozen = {false, false, false};
  ce_train(base, f.data, nullptr, f.vocab, ce);
  TrainConfig sc = phase_defaults(Phase::scst);
  sc.epochs = 2;
  CaptionModel a = base, b = base;
  const auto ra = scst_train(a, f.data, nullptr, f.vocab, sc);
  const auto rb = scst_train(b, f.data, nullptr, f.vocab, sc);
  EXPECT_EQ(ra.to_csv(), rb.to_csv());
  EXPECT_EQ(snapshot(a), snapshot(b));
  ASSERT_TRUE(ra.epochs[0].mean_reward.has_value());
  EXPECT_GE(*ra.epochs[0].mean_reward, 0.0);
  EXPECT_NE(ra.to_csv().find(",mean_reward\n"), std::string::npos);
}

TEST(Scst, EmptyReferencesRejected) {
  auto f = fixture(2);
  f.data.samples[1].captions.clear();
  CaptionModel m(small_config(Variant::full_se, f.vocab.size()), 1);
  EXPECT_THROW(scst_train(m, f.data, nullptr, f.vocab, phase_defaults(Phase::scst)), DataError);
}
