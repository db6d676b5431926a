#include <gtest/gtest.h>

#include "spaner/eval.hpp"

using namespace spaner;

namespace {

LabeledEmbeddings labeled(std::string tag, Tensor v, std::vector<std::uint32_t> classes, std::size_t class_count) {
  std::vector<std::uint32_t> ids(classes.size());
  std::iota(ids.begin(), ids.end(), 0u);
  std::vector<std::string> names;
  for (std::size_t c = 0; c < class_count; ++c) names.push_back("c" + std::to_string(c));
  return {std::move(tag), std::move(v), std::move(classes), std::move(ids), std::move(names)};
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.width = 8;
  cfg.prompt_tokens = 2;
  cfg.heads = 2;
  cfg.proj_dim = 8;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  return cfg;
}

}  // namespace

TEST(RetrieveTopk, OrderAndTies) {
  const Tensor q = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor g = Tensor::matrix({{0, 1}, {1, 0}, {1, 0}, {0.5, 0.5}});
  const auto top = retrieve_topk(q, g, 3);
  EXPECT_EQ(top[0], (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(top[1], (std::vector<std::size_t>{0, 3, 1}));
  EXPECT_THROW(retrieve_topk(q, g, 5), ArgumentError);
  EXPECT_THROW(retrieve_topk(q, g, 0), ArgumentError);
  EXPECT_THROW(retrieve_topk(q, Tensor({2, 3}), 1), DimensionError);
}

TEST(RetrieveTopk, WorkersDoNotChangeResults) {
  Rng rng(4);
  Tensor q({37, 5}), g({23, 5});
  for (double& v : q.data()) v = rng.normal();
  for (double& v : g.data()) v = rng.normal();
  const auto one = retrieve_topk(q, g, 4, 1);
  for (std::size_t w : {2, 3, 8, 64}) EXPECT_EQ(retrieve_topk(q, g, 4, w), one);
}

TEST(ScoreRetrieval, ClassAndInstanceMatching) {
  const Tensor z = Tensor::matrix({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto q = labeled("a", z, {0, 1, 1}, 2);
  const Tensor gz = Tensor::matrix({{0, 1}, {1, 0}, {0.6, 0.8}});
  const auto g = labeled("b", gz, {1, 0, 1}, 2);
  const auto cls = score_retrieval(z, q, gz, g, 1, MatchMode::Class);
  EXPECT_EQ(cls.direction, "a->b");
  EXPECT_EQ(cls.correct, 3u);  // tops: 1 (class 0), 0 (class 1), 2 (class 1)
  const auto inst = score_retrieval(z, q, gz, g, 1, MatchMode::Instance);
  EXPECT_EQ(inst.correct, 1u);  // only query 2 retrieves instance 2
  EXPECT_EQ(score_retrieval(z, q, gz, g, 2, MatchMode::Instance).correct, 1u);
  EXPECT_DOUBLE_EQ(score_retrieval(z, q, gz, g, 3, MatchMode::Instance).accuracy, 1.0);
}

TEST(RetrievalAccuracy, SelfRetrievalByInstanceIsPerfect) {
  SyntheticSpec s;
  s.classes = 3;
  s.instances_per_class = 4;
  s.modalities = {{"vision", 8, 0.2}, {"text", 8, 0.2}};
  const auto data = gen_synthetic(s);
  Rng rng(2);
  SpanerModel model = init_model(small_config(), {{"vision", 8}, {"text", 8}}, rng);
  const auto r = retrieval_accuracy(model, data.at("vision"), data.at("vision"), 1, MatchMode::Instance);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  const auto e = embed_all(model, data.at("text"));
  for (std::size_t i = 0; i < e.rows(); ++i) {
    double n = 0.0;
    for (double v : e.row(i)) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  EXPECT_THROW(retrieval_accuracy(model, data.at("vision"), LabeledEmbeddings{}, 1), DataError);
  auto unknown = data.at("vision");
  unknown.modality = "depth";
  EXPECT_THROW(embed_all(model, unknown), ConfigError);
}

TEST(Confusion, RowSumsTraceAndTopPairs) {
  const Tensor qz = Tensor::matrix({{1, 0}, {1, 0}, {0, 1}, {0, 1}, {0.7, 0.7}});
  const auto q = labeled("a", qz, {0, 0, 1, 1, 2}, 3);
  const Tensor gz = Tensor::matrix({{1, 0}, {0, 1}, {0.6, 0.8}});
  const auto g = labeled("b", gz, {0, 2, 2}, 3);
  const auto r = score_retrieval(qz, q, gz, g, 1, MatchMode::Class);
  const ConfusionMatrix cm = confusion_from_top1(r, q, g);
  EXPECT_EQ(cm.row_sum(0), 2u);
  EXPECT_EQ(cm.row_sum(1), 2u);
  EXPECT_EQ(cm.row_sum(2), 1u);
  EXPECT_EQ(cm.counts[1][2], 2u);
  EXPECT_EQ(cm.total(), 5u);
  EXPECT_DOUBLE_EQ(static_cast<double>(cm.trace()) / 5.0, r.accuracy);

  const auto top = top_confusions(cm, 20);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0], (ConfusedPair{1, 2, 2}));
  EXPECT_TRUE(top_confusions(cm, 0).empty());
}

TEST(Confusion, TopConfusionsOrdering) {
  ConfusionMatrix cm;
  cm.counts = {{5, 1, 3}, {3, 0, 0}, {2, 3, 9}};
  cm.class_names = {"x", "y", "z"};
  const auto top = top_confusions(cm, 20);
  const std::vector<ConfusedPair> expected{{0, 2, 3}, {1, 0, 3}, {2, 1, 3}, {2, 0, 2}, {0, 1, 1}};
  EXPECT_EQ(top, expected);
  EXPECT_EQ(top_confusions(cm, 2).size(), 2u);
  for (const auto& p : top) EXPECT_NE(p.true_class, p.retrieved_class);
}

TEST(Pca, RecoversAxisAlignedSpread) {
  // Points spread mostly along e1, then e2; e3 has tiny variance.
  Rng rng(6);
  Tensor x({200, 3});
  for (std::size_t i = 0; i < 200; ++i) {
    x(i, 0) = 5.0 * rng.normal() + 1.0;
    x(i, 1) = 2.0 * rng.normal() - 3.0;
    x(i, 2) = 0.1 * rng.normal();
  }
  const auto p = pca_project_2d(x);
  EXPECT_NEAR(std::abs(p.components(0, 0)), 1.0, 1e-2);
  EXPECT_NEAR(std::abs(p.components(1, 1)), 1.0, 1e-2);
  EXPECT_GT(p.variance[0], p.variance[1]);
  EXPECT_GT(p.components(0, 0), 0.0);
  // Coordinates are centered and their variances are the eigenvalues.
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 200; ++i) mean += p.coords(i, c);
    mean /= 200.0;
    for (std::size_t i = 0; i < 200; ++i) var += std::pow(p.coords(i, c) - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(var / 199.0, p.variance[c], 1e-8 * p.variance[c]);
  }
  double dot = 0.0;
  for (std::size_t j = 0; j < 3; ++j) dot += p.components(0, j) * p.components(1, j);
  EXPECT_NEAR(dot, 0.0, 1e-8);
}

TEST(Pca, DeterministicAndDegenerate) {
  Rng rng(1);
  Tensor x({30, 4});
  for (double& v : x.data()) v = rng.normal();
  EXPECT_TRUE(bitwise_equal(pca_project_2d(x).coords, pca_project_2d(x).coords));
  Tensor line({10, 3});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 3; ++j) line(i, j) = static_cast<double>(i) * (j + 1.0);
  EXPECT_THROW(pca_project_2d(line), DataError);
  EXPECT_THROW(pca_project_2d(Tensor({2, 3})), ArgumentError);
}

TEST(KShotExperiment, RowsAndDeterminism) {
  KShotExperimentConfig cfg;
  cfg.data.classes = 3;
  cfg.data.instances_per_class = 5;
  cfg.data.modalities = {{"vision", 8, 0.05}, {"text", 8, 0.05}, {"audio", 12, 0.05}};
  cfg.first = "vision";
  cfg.second = "text";
  cfg.extension = ExtensionPlan{"audio", "vision", small_config()};
  cfg.semantic_source = "text";
  cfg.directions = {{"semantic", "audio"}, {"vision", "audio"}};
  cfg.seeds = {1, 2};
  cfg.train = small_config();
  const auto rows = kshot_experiment(cfg);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].k, 1u);
  EXPECT_EQ(rows[0].direction, "semantic->audio");
  EXPECT_EQ(rows[3].k, 4u);
  EXPECT_EQ(rows[3].direction, "vision->audio");
  for (const auto& r : rows) {
    ASSERT_EQ(r.accuracies.size(), 2u);
    EXPECT_NEAR(r.mean, (r.accuracies[0] + r.accuracies[1]) / 2.0, 1e-15);
    EXPECT_NEAR(r.stddev, std::abs(r.accuracies[0] - r.accuracies[1]) / std::sqrt(2.0), 1e-15);
  }
  const auto again = kshot_experiment(cfg);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].accuracies, again[i].accuracies);
}

TEST(RetrieveTopk, InvariantUnderPositiveGalleryRescaling) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor q({9, 6}), g({15, 6});
    for (double& v : q.data()) v = rng.normal();
    for (double& v : g.data()) v = rng.normal();
    g = ops::row_normalize(g);
    Tensor scaled = g;
    scaled *= std::exp(rng.uniform(-4.0, 4.0));
    EXPECT_EQ(retrieve_topk(q, scaled, 5), retrieve_topk(q, g, 5));
    EXPECT_EQ(retrieve_topk(q, ops::row_normalize(scaled), 5), retrieve_topk(q, g, 5));
  }
}

TEST(RetrievalReports, DirectionsAreIndependent) {
  const Tensor a = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor b = Tensor::matrix({{0.8, 0.6}, {0.9, 0.1}});
  const auto qa = labeled("a", a, {0, 1}, 2);
  const auto gb = labeled("b", b, {0, 1}, 2);
  const auto ab = score_retrieval(a, qa, b, gb, 1, MatchMode::Class);
  const auto ba = score_retrieval(b, gb, a, qa, 1, MatchMode::Class);
  EXPECT_EQ(ab.direction, "a->b");
  EXPECT_EQ(ba.direction, "b->a");
  EXPECT_DOUBLE_EQ(ab.accuracy, 0.0);  // a0 -> b1, a1 -> b0
  EXPECT_DOUBLE_EQ(ba.accuracy, 0.5);  // b0 -> a0, b1 -> a0
}
