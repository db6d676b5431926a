#include <gtest/gtest.h>

#include <filesystem>

#include "spaner/checkpoint.hpp"
#include "spaner/data.hpp"
#include "spaner/extension.hpp"

using namespace spaner;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.width = 8;
  cfg.prompt_tokens = 2;
  cfg.heads = 2;
  cfg.proj_dim = 8;
  cfg.lambda = 0.5;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  cfg.seed = 4;
  return cfg;
}

SyntheticSpec three_modalities() {
  SyntheticSpec s;
  s.classes = 4;
  s.latent_dim = 4;
  s.instances_per_class = 4;
  s.modalities = {{"vision", 8, 0.05}, {"text", 8, 0.05}, {"audio", 12, 0.05}};
  s.seed = 2;
  return s;
}

SpanerModel trained_base(const PairedEmbeddings& data) {
  Rng rng(1);
  SpanerModel model = init_model(small_config(), {{"vision", 8}, {"text", 8}}, rng);
  fit(model, make_pairs(data.at("vision"), data.at("text")), small_config());
  return model;
}

ExtensionConfig audio_extension() { return {"audio", 12, "vision", small_config()}; }

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(3);
  SpanerModel model = init_model(small_config(), {{"vision", 8}, {"text", 16}}, rng);
  model.branch("text").projection.bias.value.fill(-0.0);
  model.prompt.tokens.frozen = true;
  const Checkpoint ck = make_checkpoint(model, {{"note", "x"}});
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "SPNR");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.config, ck.config);

  SpanerModel restored = restore_model(back);
  auto a = model.parameters();
  auto b = restored.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(bitwise_equal(a[i].param->value, b[i].param->value)) << a[i].name;
    EXPECT_EQ(a[i].param->frozen, b[i].param->frozen);
  }
  EXPECT_TRUE(restored.branch("text").adapter.has_value());
  EXPECT_EQ(encode_checkpoint(make_checkpoint(restored, {{"note", "x"}})), bytes);

  const auto path = std::filesystem::temp_directory_path() / "spaner_test_ck.spnr";
  save_checkpoint(ck, path);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationAndCorruption) {
  Rng rng(3);
  SpanerModel model = init_model(small_config(), {{"vision", 8}, {"text", 8}}, rng);
  const std::string bytes = encode_checkpoint(make_checkpoint(model));
  for (std::size_t len = 0; len < bytes.size(); len += 13) {
    EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, len)), FormatError) << len;
  }
  std::string bad = bytes;
  bad[1] = 'Q';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + '\0'), FormatError);
  bad = bytes;
  bad[12] = '!';  // first byte of the JSON config
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, RestoreRejectsMismatchedParameters) {
  Rng rng(3);
  SpanerModel model = init_model(small_config(), {{"vision", 8}, {"text", 8}}, rng);
  Checkpoint ck = make_checkpoint(model);
  ck.parameters.pop_back();
  EXPECT_THROW(restore_model(ck), DataError);
  ck = make_checkpoint(model);
  ck.parameters[0].shape = {4, 4};
  EXPECT_THROW(restore_model(ck), DataError);
  ck = make_checkpoint(model);
  ck.config["model"].erase("width");
  EXPECT_THROW(restore_model(ck), DataError);
}

TEST(Extension, FrozenParametersStayBitIdentical) {
  const auto data = gen_synthetic(three_modalities());
  SpanerModel base = trained_base(data);
  const Checkpoint before = make_checkpoint(base);
  Rng rng(8);
  auto result = extend(base, audio_extension(), make_pairs(data.at("audio"), data.at("vision")), rng);
  const Checkpoint after = make_checkpoint(result.model);

  EXPECT_EQ(result.frozen.size(), before.parameters.size());
  EXPECT_TRUE(assert_frozen_unchanged(before, after, result.frozen).ok());
  EXPECT_GT(after.parameters.size(), before.parameters.size());
  for (std::size_t i = 0; i < before.parameters.size(); ++i) {
    EXPECT_EQ(after.parameters[i].name, before.parameters[i].name);
    EXPECT_TRUE(after.parameters[i].frozen);
  }
  EXPECT_EQ(result.history.steps.size(), 4u);  // 2 epochs x 2 batches
  // input_dim 12 differs from width 8, so an adapter is trained.
  ASSERT_TRUE(result.model.branch("audio").adapter.has_value());
  EXPECT_EQ(result.model.branch("audio").adapter->value.shape(), (Shape{12, 8}));
  EXPECT_FALSE(result.model.branch("audio").adapter->frozen);
}

TEST(Extension, FrozenParametersGetNoGradient) {
  const auto data = gen_synthetic(three_modalities());
  Rng rng(8);
  auto result = extend(trained_base(data), audio_extension(), make_pairs(data.at("audio"), data.at("vision")), rng);
  PairBatch batch{"audio", data.at("audio").vectors, "vision", data.at("vision").vectors};
  compute_gradients(result.model, batch, result.model.objective);
  for (auto& [name, p] : result.model.parameters()) {
    if (!p->frozen) continue;
    for (double g : p->grad.data()) EXPECT_EQ(g, 0.0) << name;
  }
}

TEST(Extension, ReportNamesExactlyThePerturbedParameter) {
  const auto data = gen_synthetic(three_modalities());
  SpanerModel base = trained_base(data);
  const Checkpoint before = make_checkpoint(base);
  Rng rng(8);
  auto result = extend(base, audio_extension(), make_pairs(data.at("audio"), data.at("vision")), rng);
  result.model.branch("text").aligner.key.value(1, 2) += 1e-12;
  const FrozenReport report = assert_frozen_unchanged(before, make_checkpoint(result.model), result.frozen);
  ASSERT_EQ(report.changed.size(), 1u);
  EXPECT_EQ(report.changed[0], "text.aligner.key");
  EXPECT_FALSE(report.ok());
}

TEST(Extension, LineageAndConfigErrors) {
  const auto data = gen_synthetic(three_modalities());
  SpanerModel base = trained_base(data);
  Rng rng(8);
  const auto pairs = make_pairs(data.at("audio"), data.at("vision"));
  ExtensionConfig cfg = audio_extension();
  cfg.anchor = "depth";
  EXPECT_THROW(extend(base, cfg, pairs, rng), ConfigError);
  cfg = audio_extension();
  cfg.modality = "text";
  EXPECT_THROW(extend(base, cfg, pairs, rng), ConfigError);

  const Checkpoint ck = make_checkpoint(base);
  Checkpoint shrunk = ck;
  shrunk.parameters.pop_back();
  EXPECT_THROW(assert_frozen_unchanged(ck, shrunk, {}), LineageError);
  EXPECT_THROW(assert_frozen_unchanged(ck, ck, {"nope"}), LineageError);
}
