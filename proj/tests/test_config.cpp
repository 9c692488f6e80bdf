#include <gtest/gtest.h>

#include <sstream>

#include "ddrn/config.hpp"

namespace ddrn {
namespace {

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

TEST(ConfigTest, DefaultsAreValid) {
  RunConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.train.batch_size(), 64u);
  EXPECT_EQ(cfg.model.num_patches(), 49u);
  EXPECT_EQ(cfg.model.seq_len(), 51u);
}

TEST(ConfigTest, ParsesKeysCommentsAndBlankLines) {
  RunConfig cfg = parse("# toy run\n\nepochs = 3\n  lr=0.001  # inline\nembedding_space = off\nnum_ids = 8\n");
  EXPECT_EQ(cfg.train.epochs, 3u);
  EXPECT_DOUBLE_EQ(cfg.train.lr, 0.001);
  EXPECT_FALSE(cfg.model.embedding_space);
  EXPECT_EQ(cfg.model.num_ids, 8u);
  EXPECT_EQ(cfg.synth.num_ids, 8u);
}

TEST(ConfigTest, ErrorsCarryLineNumbers) {
  struct Case {
    const char* text;
    std::size_t line;
    const char* fragment;
  };
  const Case cases[] = {
      {"epochs = 3\nbogus = 1\n", 2, "unknown key"},
      {"epochs = 3\n\nepochs = 4\n", 3, "duplicate"},
      {"lr = fast\n", 1, "lr"},
      {"# c\nepochs\n", 2, "key = value"},
      {"epochs = -1\n", 1, "non-negative"},
      {"hs_arcface = maybe\n", 1, "true/false"},
      {"tau = nan\n", 1, "finite"},
  };
  for (const auto& c : cases) {
    try {
      parse(c.text);
      ADD_FAILURE() << "no error for: " << c.text;
    } catch (const ConfigParseError& e) {
      EXPECT_EQ(e.line(), c.line) << c.text;
      EXPECT_NE(std::string(e.what()).find(c.fragment), std::string::npos) << e.what();
      EXPECT_NE(std::string(e.what()).find("line " + std::to_string(c.line)), std::string::npos);
    }
  }
}

TEST(ConfigTest, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/run.cfg"), std::string::npos);
  }
}

TEST(ConfigTest, FormatRoundTrips) {
  RunConfig cfg;
  cfg.train.lr = 1.0 / 3.0;
  cfg.model.tau = 0.1;
  cfg.train.seed = 18446744073709551615ull;
  cfg.train.hs_arcface = false;
  const std::string text = format_config(cfg);
  EXPECT_NE(text.find("tau = 0.1\n"), std::string::npos);
  const RunConfig back = parse(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.train.lr, cfg.train.lr);
  EXPECT_EQ(back.train.seed, cfg.train.seed);
  EXPECT_FALSE(back.train.hs_arcface);
}

TEST(ConfigTest, ValidationNamesConstraint) {
  RunConfig cfg;
  cfg.model.heads = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.model.stride = 5;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stride"), std::string::npos);
  }
  cfg = RunConfig{};
  cfg.model.num_ids = 16;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RunConfig{};
  cfg.train.ids_per_batch = 40;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(AblationTest, AppliesSwitches) {
  RunConfig cfg;
  apply_ablation(cfg, "embedding_space=off,orthogonal_loss=off,hs_arcface=off");
  EXPECT_FALSE(cfg.model.embedding_space);
  EXPECT_FALSE(cfg.train.orthogonal_loss);
  EXPECT_FALSE(cfg.train.hs_arcface);
  apply_ablation(cfg, "hs_arcface=on");
  EXPECT_TRUE(cfg.train.hs_arcface);
  EXPECT_FALSE(cfg.model.embedding_space);
}

TEST(AblationTest, RejectsMalformedSpecs) {
  RunConfig cfg;
  EXPECT_THROW(apply_ablation(cfg, "dropout=on"), ConfigError);
  EXPECT_THROW(apply_ablation(cfg, "hs_arcface=yes"), ConfigError);
  EXPECT_THROW(apply_ablation(cfg, "hs_arcface"), ConfigError);
}

}  // namespace
}  // namespace ddrn
