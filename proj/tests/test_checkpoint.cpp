#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "model_fixtures.hpp"
#include "test_util.hpp"
#include "vcgpt/checkpoint.hpp"

using namespace vcgpt;
using vcgpt::testing::TempDir;
using vcgpt::testing::scramble;
using vcgpt::testing::tiny_config;

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir tmp("ckpt_roundtrip");
  for (Variant v : {Variant::vanilla, Variant::fusion_no_se, Variant::full_se}) {
    CaptionModel m(tiny_config(v), 3);
    scramble(m, 4);
    const auto dir = tmp / variant_name(v);
    save_checkpoint(m, dir);
    const CaptionModel back = load_checkpoint(dir);
    EXPECT_EQ(back.config(), m.config());
    ASSERT_EQ(back.parameters().size(), m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
      EXPECT_EQ(back.parameters()[i].name, m.parameters()[i].name);
      EXPECT_EQ(back.parameters()[i].tensor.values(), m.parameters()[i].tensor.values());
    }
    EXPECT_TRUE(back.w_g.same_storage(back.tok_emb));
    Rng rng(5);
    const Tensor img = vcgpt::testing::random_image(rng, 8);
    const std::vector<TokenId> p{1, 4, 5};
    EXPECT_EQ(forward_text(back, encode_image(back, img), p).logits.values(),
              forward_text(m, encode_image(m, img), p).logits.values());
  }
}

TEST(Checkpoint, SavingTwiceIsByteIdentical) {
  TempDir tmp("ckpt_bytes");
  CaptionModel m(tiny_config(Variant::full_se), 6);
  save_checkpoint(m, tmp / "a");
  save_checkpoint(load_checkpoint(tmp / "a"), tmp / "b");
  EXPECT_EQ(vcgpt::testing::tree_bytes(tmp / "a"), vcgpt::testing::tree_bytes(tmp / "b"));
  EXPECT_EQ(std::filesystem::file_size(tmp / "a" / kWeightsFile), m.parameter_count() * 8);
}

TEST(Checkpoint, InterpolatedModelRoundTrips) {
  TempDir tmp("ckpt_interp");
  CaptionModel m(tiny_config(Variant::full_se), 7);
  interpolate_pos_embeddings(m, 16);
  save_checkpoint(m, tmp.path());
  const CaptionModel back = load_checkpoint(tmp.path());
  EXPECT_EQ(back.config().image_size, 16u);
  EXPECT_EQ(back.enc_pos.values(), m.enc_pos.values());
}

TEST(Checkpoint, ShapeMismatchListsExpectedAndFound) {
  TempDir tmp("ckpt_mismatch");
  CaptionModel m(tiny_config(Variant::full_se), 8);
  save_checkpoint(m, tmp.path());
  nlohmann::json j = nlohmann::json::parse(vcgpt::testing::slurp(tmp / kManifestFile));
  j["config"]["d_model"] = 4;
  j["config"]["n_heads"] = 1;
  std::ofstream(tmp / kManifestFile) << j.dump(2);
  try {
    (void)load_checkpoint(tmp.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("encoder.patch_w [48,4] expected, found encoder.patch_w [48,8]"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, CorruptInputsAreReported) {
  TempDir tmp("ckpt_corrupt");
  EXPECT_THROW((void)load_checkpoint(tmp / "missing"), IoError);
  CaptionModel m(tiny_config(Variant::vanilla), 9);
  save_checkpoint(m, tmp.path());
  std::filesystem::resize_file(tmp / kWeightsFile, 16);
  EXPECT_THROW((void)load_checkpoint(tmp.path()), DataError);
  std::ofstream(tmp / kManifestFile) << "{ not json";
  EXPECT_THROW((void)load_checkpoint(tmp.path()), DataError);
}
