#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "spaner/cli.hpp"

using namespace spaner;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("spaner_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path path(const std::string& name) const { return dir_ / name; }

  int run(std::vector<std::string> args, const cli::GradientHook& hook = {}) {
    out_.str("");
    err_.str("");
    return cli::run(args, out_, err_, hook);
  }

  std::string write_config(const std::string& name, const std::string& text) {
    io::write_file(path(name), text);
    return path(name).string();
  }

  // Three modalities, a semantic file and short training.
  std::string standard_config() {
    return write_config("cfg.json", R"({
      "seed": 5,
      "data": {"classes": 4, "instances_per_class": 6, "semantic_source": "text",
               "modalities": [{"tag": "vision", "dim": 8, "noise": 0.05},
                              {"tag": "text", "dim": 8, "noise": 0.05},
                              {"tag": "audio", "dim": 12, "noise": 0.05}]},
      "train": {"width": 8, "prompt_tokens": 2, "heads": 2, "proj_dim": 8, "epochs": 3,
                "batch_size": 8, "lambda": 0.5, "learning_rate": 0.01},
      "extend": {"modality": "audio", "anchor": "vision", "epochs": 2}
    })");
  }

  // gen-data + train into dir/data and dir/train.
  void prepare(const std::string& cfg) {
    ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("data").string()}), 0) << err_.str();
    ASSERT_EQ(run({"train", "--config", cfg, "--data", path("data").string(), "--out", path("train").string()}), 0)
        << err_.str();
  }

  std::string read(const std::string& name) const { return io::read_file(dir_ / name); }

  fs::path dir_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST_F(Cli, GenDataWritesOneFilePerModalityAndManifest) {
  const std::string cfg = write_config("cfg.json", R"({"data": {"modalities": [
      {"tag": "a", "dim": 4, "noise": 0.1}, {"tag": "b", "dim": 5, "noise": 0.1}, {"tag": "c", "dim": 6, "noise": 0.1}]}})");
  ASSERT_EQ(run({"gen-data", "--config", cfg, "--out", path("d").string()}), 0) << err_.str();
  std::size_t spne = 0;
  for (const auto& e : fs::directory_iterator(path("d"))) spne += e.path().extension() == ".spne";
  EXPECT_EQ(spne, 3u);
  const auto manifest = nlohmann::json::parse(read("d/manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 0);
  EXPECT_EQ(manifest.at("files").size(), 3u);
  EXPECT_EQ(manifest.at("config").at("data").at("modalities").size(), 3u);
  EXPECT_EQ(read_embeddings(path("d/b.spne")).dim(), 5u);
}

TEST_F(Cli, GenDataIsDeterministicAndSeedOverrides) {
  ASSERT_EQ(run({"gen-data", "--out", path("x").string()}), 0);
  ASSERT_EQ(run({"gen-data", "--out", path("y").string()}), 0);
  ASSERT_EQ(run({"gen-data", "--out", path("z").string(), "--seed", "9"}), 0);
  EXPECT_EQ(read("x/vision.spne"), read("y/vision.spne"));
  EXPECT_EQ(read("x/manifest.json"), read("y/manifest.json"));
  EXPECT_NE(read("x/vision.spne"), read("z/vision.spne"));
  EXPECT_EQ(nlohmann::json::parse(read("z/manifest.json")).at("seed"), 9);
}

TEST_F(Cli, ConfigErrorsExitTwoAndNameTheField) {
  const std::string neg = write_config("neg.json", R"({"data": {"modalities": [
      {"tag": "a", "dim": 4, "noise": -0.5}, {"tag": "b", "dim": 4, "noise": 0.1}]}})");
  EXPECT_EQ(run({"gen-data", "--config", neg, "--out", path("d").string()}), 2);
  EXPECT_NE(err_.str().find("noise"), std::string::npos);
  EXPECT_FALSE(fs::exists(path("d")));

  const std::string unknown = write_config("unknown.json", R"({"train": {"epochs": 1, "epocs": 2}})");
  EXPECT_EQ(run({"gen-data", "--config", unknown, "--out", path("d").string()}), 2);
  EXPECT_NE(err_.str().find("train.epocs"), std::string::npos);

  const std::string typed = write_config("typed.json", R"({"train": {"epochs": -1}})");
  EXPECT_EQ(run({"gen-data", "--config", typed, "--out", path("d").string()}), 2);
  EXPECT_NE(err_.str().find("train.epochs"), std::string::npos);

  const std::string broken = write_config("broken.json", "{\"seed\": ");
  EXPECT_EQ(run({"gen-data", "--config", broken, "--out", path("d").string()}), 2);
  EXPECT_EQ(run({"gen-data"}), 2);  // missing --out
  EXPECT_EQ(run({"no-such-command"}), 2);
}

TEST_F(Cli, TrainWritesHistoryWithLambdaEcho) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string history = read("train/history.csv");
  EXPECT_EQ(history.rfind("# spaner train config=", 0), 0u);
  EXPECT_NE(history.substr(0, history.find('\n')).find("\"lambda\":0.5"), std::string::npos);
  const auto rows = csv::parse(history);
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], (std::vector<std::string>{"step", "L", "L_align", "L_ca"}));
  // 24 rows at batch 8 -> 3 batches per epoch, 3 epochs.
  EXPECT_EQ(rows.size() - 1, 9u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double l = std::stod(rows[i][1]), la = std::stod(rows[i][2]), lc = std::stod(rows[i][3]);
    EXPECT_NEAR(l, la + 0.5 * lc, 1e-12);
  }
  const Checkpoint ck = load_checkpoint(path("train/checkpoint.spnr"));
  EXPECT_EQ(ck.config.at("run").at("train").at("lambda"), 0.5);
  EXPECT_EQ(ck.config.at("model").at("modalities").size(), 2u);
}

TEST_F(Cli, TrainIsByteReproducible) {
  const std::string cfg = standard_config();
  prepare(cfg);
  ASSERT_EQ(run({"train", "--config", cfg, "--data", path("data").string(), "--out", path("again").string()}), 0);
  EXPECT_EQ(read("train/history.csv"), read("again/history.csv"));
  EXPECT_EQ(read("train/checkpoint.spnr"), read("again/checkpoint.spnr"));
}

TEST_F(Cli, ExtendAddsParametersAndReportsNothingChanged) {
  const std::string cfg = standard_config();
  prepare(cfg);
  ASSERT_EQ(run({"extend", "--config", cfg, "--checkpoint", path("train/checkpoint.spnr").string(), "--data",
                 path("data").string(), "--out", path("ext").string()}),
            0)
      << err_.str();
  const auto report = csv::parse(read("ext/frozen_report.csv"));
  EXPECT_EQ(report.size(), 1u);  // header only
  const Checkpoint before = load_checkpoint(path("train/checkpoint.spnr"));
  const Checkpoint after = load_checkpoint(path("ext/checkpoint.spnr"));
  EXPECT_GT(after.parameters.size(), before.parameters.size());
  for (std::size_t i = 0; i < before.parameters.size(); ++i) {
    EXPECT_EQ(after.parameters[i].name, before.parameters[i].name);
    EXPECT_EQ(after.parameters[i].values, before.parameters[i].values);
  }
  EXPECT_NE(after.find("audio.adapter.weight"), nullptr);
}

TEST_F(Cli, ExtendWithMissingAnchorExitsTwo) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string bad = write_config("bad.json", R"({
      "data": {"classes": 4, "instances_per_class": 6,
               "modalities": [{"tag": "vision", "dim": 8, "noise": 0.05}, {"tag": "text", "dim": 8, "noise": 0.05},
                              {"tag": "audio", "dim": 12, "noise": 0.05}]},
      "train": {"width": 8, "prompt_tokens": 2, "heads": 2, "proj_dim": 8},
      "extend": {"modality": "audio", "anchor": "depth"}})");
  EXPECT_EQ(run({"extend", "--config", bad, "--checkpoint", path("train/checkpoint.spnr").string(), "--data",
                 path("data").string(), "--out", path("ext").string()}),
            2);
  EXPECT_NE(err_.str().find("depth"), std::string::npos);
}

TEST_F(Cli, EvalReportsAndSelfRetrieval) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string ck = path("train/checkpoint.spnr").string();
  ASSERT_EQ(run({"eval", "--config", cfg, "--checkpoint", ck, "--query", path("data/vision.spne").string(),
                 "--gallery", path("data/text.spne").string(), "--out", path("eval.csv").string()}),
            0)
      << err_.str();
  auto rows = csv::parse(read("eval.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"direction", "k", "accuracy", "seed"}));
  EXPECT_EQ(rows[1][0], "vision->text");
  EXPECT_EQ(rows[1][3], "5");
  const double acc = std::stod(rows[1][2]);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);

  ASSERT_EQ(run({"eval", "--checkpoint", ck, "--query", path("data/text.spne").string(), "--gallery",
                 path("data/text.spne").string(), "--match", "instance", "--out", path("self.csv").string()}),
            0);
  EXPECT_EQ(csv::parse(read("self.csv"))[1][2], "1");

  EXPECT_EQ(run({"eval", "--checkpoint", ck, "--query", path("data/text.spne").string(), "--gallery",
                 path("data/vision.spne").string(), "--k", "25", "--out", path("k.csv").string()}),
            2);
}

TEST_F(Cli, WorkersDoNotChangeEvalOutput) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string ck = path("train/checkpoint.spnr").string();
  for (const char* w : {"1", "3"}) {
    ASSERT_EQ(run({"eval", "--checkpoint", ck, "--query", path("data/vision.spne").string(), "--gallery",
                   path("data/text.spne").string(), "--k", "3", "--workers", w, "--out",
                   path(std::string("w") + w + ".csv").string()}),
              0);
  }
  const auto a = csv::parse(read("w1.csv")), b = csv::parse(read("w3.csv"));
  EXPECT_EQ(a, b);
}

TEST_F(Cli, CorruptOrTruncatedInputsExitThree) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string ck_bytes = read("train/checkpoint.spnr");
  io::write_file(path("trunc.spnr"), ck_bytes.substr(0, ck_bytes.size() / 2));
  const std::string q = path("data/vision.spne").string(), g = path("data/text.spne").string();
  EXPECT_EQ(run({"eval", "--checkpoint", path("trunc.spnr").string(), "--query", q, "--gallery", g, "--out",
                 path("e.csv").string()}),
            3);
  EXPECT_NE(err_.str().find("truncated"), std::string::npos);

  std::string spne = read("data/vision.spne");
  spne[0] = 'X';
  io::write_file(path("bad.spne"), spne);
  EXPECT_EQ(run({"eval", "--checkpoint", path("train/checkpoint.spnr").string(), "--query", path("bad.spne").string(),
                 "--gallery", g, "--out", path("e.csv").string()}),
            3);
  EXPECT_EQ(run({"eval", "--checkpoint", path("missing.spnr").string(), "--query", q, "--gallery", g, "--out",
                 path("e.csv").string()}),
            3);
  EXPECT_EQ(run({"train", "--config", cfg, "--data", path("nowhere").string(), "--out", path("t").string()}), 3);
}

TEST_F(Cli, ConfusionOutputsAndQuoting) {
  const std::string cfg = standard_config();
  prepare(cfg);
  // Same rows as the text file, with class names that need quoting.
  LabeledEmbeddings text = read_embeddings(path("data/text.spne"));
  text.class_names = {"plain", "with,comma", "with \"quote\"", "multi\nline"};
  write_embeddings(text, path("named.spne"));
  const std::string ck = path("train/checkpoint.spnr").string();
  ASSERT_EQ(run({"confusion", "--checkpoint", ck, "--query", path("named.spne").string(), "--gallery",
                 path("data/vision.spne").string(), "--out", path("conf").string()}),
            0)
      << err_.str();
  EXPECT_NE(out_.str().find("row sums match"), std::string::npos);

  const std::string raw = read("conf/confusion.csv");
  EXPECT_NE(raw.find("\"with,comma\""), std::string::npos);
  EXPECT_NE(raw.find("\"with \"\"quote\"\"\""), std::string::npos);
  const auto rows = csv::parse(raw);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"true\\retrieved", "plain", "with,comma", "with \"quote\"", "multi\nline"}));
  std::uint64_t total = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][0], rows[0][i]);
    std::uint64_t row_sum = 0;
    for (std::size_t j = 1; j < rows[i].size(); ++j) row_sum += std::stoull(rows[i][j]);
    EXPECT_EQ(row_sum, 6u);
    total += row_sum;
  }
  EXPECT_EQ(total, 24u);

  ASSERT_EQ(run({"confusion", "--checkpoint", ck, "--query", path("named.spne").string(), "--gallery",
                 path("data/vision.spne").string(), "--out", path("conf0").string(), "--top-n", "0"}),
            0);
  const auto top = csv::parse(read("conf0/top_confusions.csv"));
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0], (std::vector<std::string>{"rank", "true_class", "retrieved_class", "count"}));
}

TEST_F(Cli, ProjectCoversEveryRowDeterministically) {
  const std::string cfg = standard_config();
  prepare(cfg);
  const std::string ck = path("train/checkpoint.spnr").string();
  const std::vector<std::string> args{"project", "--checkpoint", ck, "--out", path("p1.csv").string(),
                                      path("data/vision.spne").string(), path("data/text.spne").string()};
  ASSERT_EQ(run(args), 0) << err_.str();
  auto again = args;
  again[4] = path("p2.csv").string();
  ASSERT_EQ(run(again), 0);
  EXPECT_EQ(read("p1.csv"), read("p2.csv"));
  const auto rows = csv::parse(read("p1.csv"));
  ASSERT_EQ(rows.size(), 1u + 48u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"x", "y", "class_id", "class_name", "modality"}));
  EXPECT_EQ(rows[1][4], "vision");
  EXPECT_EQ(rows[48][4], "text");
  EXPECT_EQ(rows[48][3], "class_3");
}

TEST_F(Cli, GradCheckPassesAndDetectsCorruptedBackward) {
  const std::string cfg = write_config("gc.json", R"({
      "train": {"width": 8, "prompt_tokens": 2, "heads": 2, "proj_dim": 8, "lambda": 0.5, "temperature": 1.0},
      "grad_check": {"batch": 4}})");
  EXPECT_EQ(run({"grad-check", "--config", cfg}), 0) << out_.str() << err_.str();
  EXPECT_NE(out_.str().find("max relative error"), std::string::npos);
  EXPECT_NE(out_.str().find("worst parameter"), std::string::npos);

  // A backward rule that drops the 1/sqrt(d/h) score scale on the key path.
  const auto corrupt = [](SpanerModel& m) { m.branch("vision").aligner.key.grad *= std::sqrt(4.0); };
  EXPECT_EQ(run({"grad-check", "--config", cfg}, corrupt), 4);
  EXPECT_NE(out_.str().find("worst parameter vision.aligner.key"), std::string::npos);
}

TEST_F(Cli, GradCheckDefaultConfigPasses) {
  EXPECT_EQ(run({"grad-check"}), 0) << out_.str() << err_.str();
}
