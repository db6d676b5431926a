#ifndef SPANER_EVAL_HPP
#define SPANER_EVAL_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "spaner/data.hpp"
#include "spaner/errors.hpp"
#include "spaner/extension.hpp"
#include "spaner/model.hpp"
#include "spaner/tensor.hpp"

namespace spaner {

/// Pooled aligner embeddings of every row, normalized to unit length.
inline Tensor embed_all(const SpanerModel& model, const LabeledEmbeddings& data) {
  if (data.size() == 0) throw DataError("embed_all: no rows in modality '" + data.modality + "'");
  return ops::row_normalize(forward_branch(model, data.modality, data.vectors).pooled.z);
}

/// Indices of the k largest inner products per query, descending; ties go
/// to the lower gallery index. Queries are split across `workers` threads.
inline std::vector<std::vector<std::size_t>> retrieve_topk(const Tensor& queries, const Tensor& gallery,
                                                           std::size_t k, std::size_t workers = 1) {
  ops::require_matrix(queries, "retrieve_topk");
  ops::require_matrix(gallery, "retrieve_topk");
  if (queries.cols() != gallery.cols()) {
    throw DimensionError("retrieve_topk: query width " + std::to_string(queries.cols()) +
                         " vs gallery width " + std::to_string(gallery.cols()));
  }
  if (k == 0 || k > gallery.rows()) {
    throw ArgumentError("retrieve_topk: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(gallery.rows()) + "]");
  }
  const std::size_t nq = queries.rows(), ng = gallery.rows(), d = queries.cols();
  std::vector<std::vector<std::size_t>> out(nq);
  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<double> scores(ng);
    std::vector<std::size_t> order(ng);
    for (std::size_t q = begin; q < end; ++q) {
      auto qr = queries.row(q);
      for (std::size_t g = 0; g < ng; ++g) {
        auto gr = gallery.row(g);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += qr[j] * gr[j];
        scores[g] = s;
      }
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                        });
      out[q].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, nq));
  if (workers == 1) {
    work(0, nq);
    return out;
  }
  std::vector<std::thread> threads;
  const std::size_t chunk = (nq + workers - 1) / workers;
  for (std::size_t begin = 0; begin < nq; begin += chunk) {
    threads.emplace_back(work, begin, std::min(nq, begin + chunk));
  }
  for (auto& t : threads) t.join();
  return out;
}

enum class MatchMode { Class, Instance };

inline const char* to_string(MatchMode m) { return m == MatchMode::Class ? "class" : "instance"; }

struct RetrievalReport {
  std::string direction;  // "query->gallery"
  std::size_t k = 1;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t queries = 0;
  MatchMode match = MatchMode::Class;
  std::vector<std::vector<std::size_t>> topk;
};

/// Scores precomputed embeddings. A query is correct when any of its top-k
/// gallery items matches (by class id, or by instance id in Instance mode).
inline RetrievalReport score_retrieval(const Tensor& query_z, const LabeledEmbeddings& query,
                                       const Tensor& gallery_z, const LabeledEmbeddings& gallery,
                                       std::size_t k, MatchMode match, std::size_t workers = 1) {
  RetrievalReport r;
  r.direction = query.modality + "->" + gallery.modality;
  r.k = k;
  r.match = match;
  r.topk = retrieve_topk(query_z, gallery_z, k, workers);
  r.queries = query.size();
  for (std::size_t q = 0; q < r.queries; ++q) {
    const bool hit = std::any_of(r.topk[q].begin(), r.topk[q].end(), [&](std::size_t g) {
      return match == MatchMode::Class ? gallery.class_ids[g] == query.class_ids[q]
                                       : gallery.instance_ids[g] == query.instance_ids[q];
    });
    r.correct += hit ? 1 : 0;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.queries);
  return r;
}

inline RetrievalReport retrieval_accuracy(const SpanerModel& model, const LabeledEmbeddings& query,
                                          const LabeledEmbeddings& gallery, std::size_t k = 1,
                                          MatchMode match = MatchMode::Class, std::size_t workers = 1) {
  if (query.size() == 0 || gallery.size() == 0) throw DataError("retrieval needs non-empty query and gallery sets");
  return score_retrieval(embed_all(model, query), query, embed_all(model, gallery), gallery, k, match, workers);
}

// ---------------------------------------------------------------------------
// Confusion analysis.

struct ConfusionMatrix {
  std::vector<std::vector<std::uint64_t>> counts;  // [true class][retrieved class]
  std::vector<std::string> class_names;

  std::size_t classes() const { return counts.size(); }

  std::uint64_t row_sum(std::size_t c) const {
    return std::accumulate(counts[c].begin(), counts[c].end(), std::uint64_t{0});
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < classes(); ++c) t += row_sum(c);
    return t;
  }

  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < classes(); ++c) t += counts[c][c];
    return t;
  }
};

/// counts[i][j] += 1 when a class-i query's top-1 gallery item has class j.
inline ConfusionMatrix confusion_from_top1(const RetrievalReport& report, const LabeledEmbeddings& query,
                                           const LabeledEmbeddings& gallery) {
  const std::size_t c = query.class_count();
  ConfusionMatrix cm{std::vector<std::vector<std::uint64_t>>(c, std::vector<std::uint64_t>(c, 0)),
                     query.class_names};
  for (std::size_t q = 0; q < report.topk.size(); ++q) {
    const std::uint32_t retrieved = gallery.class_ids[report.topk[q].front()];
    if (retrieved >= c) throw DataError("gallery class id " + std::to_string(retrieved) + " unknown to the query set");
    ++cm.counts[query.class_ids[q]][retrieved];
  }
  return cm;
}

inline ConfusionMatrix confusion_matrix(const SpanerModel& model, const LabeledEmbeddings& query,
                                        const LabeledEmbeddings& gallery, std::size_t workers = 1) {
  const RetrievalReport r = retrieval_accuracy(model, query, gallery, 1, MatchMode::Class, workers);
  return confusion_from_top1(r, query, gallery);
}

struct ConfusedPair {
  std::size_t true_class = 0;
  std::size_t retrieved_class = 0;
  std::uint64_t count = 0;

  friend bool operator==(const ConfusedPair&, const ConfusedPair&) = default;
};

/// Nonzero off-diagonal cells by count descending, then (i, j) ascending.
inline std::vector<ConfusedPair> top_confusions(const ConfusionMatrix& cm, std::size_t n) {
  std::vector<ConfusedPair> pairs;
  for (std::size_t i = 0; i < cm.classes(); ++i)
    for (std::size_t j = 0; j < cm.classes(); ++j)
      if (i != j && cm.counts[i][j] > 0) pairs.push_back({i, j, cm.counts[i][j]});
  std::stable_sort(pairs.begin(), pairs.end(), [](const ConfusedPair& a, const ConfusedPair& b) {
    if (a.count != b.count) return a.count > b.count;
    return std::pair(a.true_class, a.retrieved_class) < std::pair(b.true_class, b.retrieved_class);
  });
  if (pairs.size() > n) pairs.resize(n);
  return pairs;
}

// ---------------------------------------------------------------------------
// 2-D projection.

struct Projection2D {
  Tensor coords;                  // [N x 2]
  Tensor components;              // [2 x d], unit rows
  std::array<double, 2> variance{};  // eigenvalues of the sample covariance
};

namespace detail {

// Dominant eigenpair of a symmetric PSD matrix by power iteration.
inline std::pair<std::vector<double>, double> power_iteration(const Tensor& cov, double tol,
                                                              std::size_t max_iter) {
  const std::size_t d = cov.rows();
  std::vector<double> v(d), next(d);
  // Deterministic start that is unlikely to be orthogonal to the top direction.
  for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.1 * static_cast<double>(j % 7) + 0.01 * static_cast<double>(j);
  auto normalize = [](std::vector<double>& x) {
    double n = 0.0;
    for (double e : x) n += e * e;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& e : x) e /= n;
    return n;
  };
  normalize(v);
  double lambda = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += cov(i, j) * v[j];
      next[i] = s;
    }
    lambda = normalize(next);
    if (lambda == 0.0) return {v, 0.0};
    double diff = 0.0;
    for (std::size_t j = 0; j < d; ++j) diff = std::max(diff, std::abs(next[j] - v[j]));
    v.swap(next);
    if (diff < tol) break;
  }
  return {v, lambda};
}

inline void first_nonzero_positive(std::vector<double>& v) {
  for (double e : v) {
    if (std::abs(e) > 1e-12) {
      if (e < 0.0)
        for (double& x : v) x = -x;
      return;
    }
  }
}

}  // namespace detail

/// Centers the rows and projects onto the top two principal directions
/// (power iteration with deflation). Each direction's first non-negligible
/// loading is made positive.
inline Projection2D pca_project_2d(const Tensor& x, double tol = 1e-10, std::size_t max_iter = 1000) {
  ops::require_matrix(x, "pca_project_2d");
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 3) throw ArgumentError("pca_project_2d needs at least 3 points");
  if (d < 2) throw DataError("pca_project_2d: data of rank < 2 after centering");
  Tensor centered = x;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered(i, j) -= mean;
  }
  Tensor cov = ops::matmul(ops::transpose(centered), centered);
  cov *= 1.0 / static_cast<double>(n - 1);

  double scale = 0.0;
  for (std::size_t j = 0; j < d; ++j) scale = std::max(scale, cov(j, j));
  Projection2D out{Tensor({n, 2}), Tensor({2, d}), {}};
  for (std::size_t c = 0; c < 2; ++c) {
    auto [v, lambda] = detail::power_iteration(cov, tol, max_iter);
    if (!(lambda > 1e-12 * scale) || scale == 0.0) {
      throw DataError("pca_project_2d: data of rank < 2 after centering");
    }
    detail::first_nonzero_positive(v);
    out.variance[c] = lambda;
    for (std::size_t j = 0; j < d; ++j) out.components(c, j) = v[j];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) -= lambda * v[i] * v[j];
  }
  out.coords = ops::matmul(centered, ops::transpose(out.components));
  return out;
}

// ---------------------------------------------------------------------------
// k-shot experiment.

inline constexpr const char* kSemanticQuery = "semantic";

struct RetrievalDirection {
  std::string query;    // modality tag, or "semantic" for one-per-class queries
  std::string gallery;  // modality tag

  std::string label() const { return query + "->" + gallery; }
};

struct ExtensionPlan {
  std::string modality;
  std::string anchor;
  TrainConfig train;
};

struct KShotExperimentConfig {
  SyntheticSpec data;                  // seed is replaced per run
  std::string first;                   // base pair trained on the support set
  std::string second;
  std::optional<ExtensionPlan> extension;
  std::string semantic_source;         // modality whose map produces semantic queries
  std::vector<std::size_t> shots{1, 4};
  std::vector<RetrievalDirection> directions;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  TrainConfig train;
};

struct KShotRow {
  std::size_t k = 0;
  std::string direction;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across seeds
  std::vector<double> accuracies;  // one per seed, in seed order
};

/// Trains the base pair (and the optional extension) on k-shot support sets
/// and scores every direction on the held-out query rows, for every seed.
inline std::vector<KShotRow> kshot_experiment(const KShotExperimentConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("kshot experiment needs at least one seed");
  if (cfg.shots.empty()) throw ConfigError("kshot experiment needs at least one k");
  std::vector<KShotRow> rows;
  for (std::size_t k : cfg.shots)
    for (const auto& dir : cfg.directions) rows.push_back({k, dir.label(), 0.0, 0.0, {}});

  for (std::uint64_t seed : cfg.seeds) {
    SyntheticSpec spec = cfg.data;
    spec.seed = seed;
    const PairedEmbeddings data = gen_synthetic(spec);
    for (std::size_t ki = 0; ki < cfg.shots.size(); ++ki) {
      const std::size_t k = cfg.shots[ki];
      Rng split_rng = Rng(seed).split(0x4b53484f54ULL + k);
      const auto split = kshot_split(data, k, split_rng);

      TrainConfig train = cfg.train;
      train.seed = seed;
      Rng init_rng = Rng(seed).split(0x494e4954ULL);
      SpanerModel model = init_model(train, {{cfg.first, spec.modality(cfg.first).dim},
                                             {cfg.second, spec.modality(cfg.second).dim}},
                                     init_rng);
      fit(model, make_pairs(split.at(cfg.first).support, split.at(cfg.second).support), train);

      if (cfg.extension) {
        const auto& ext = *cfg.extension;
        ExtensionConfig ec{ext.modality, spec.modality(ext.modality).dim, ext.anchor, ext.train};
        ec.train.seed = seed;
        Rng ext_rng = Rng(seed).split(0x455854ULL);
        model = extend(std::move(model), ec,
                       make_pairs(split.at(ext.modality).support, split.at(ext.anchor).support), ext_rng)
                    .model;
      }

      const LabeledEmbeddings semantic =
          cfg.semantic_source.empty() ? LabeledEmbeddings{} : semantic_modality(spec, cfg.semantic_source);
      for (std::size_t di = 0; di < cfg.directions.size(); ++di) {
        const auto& dir = cfg.directions[di];
        const LabeledEmbeddings& query =
            dir.query == kSemanticQuery ? semantic : split.at(dir.query).query;
        if (query.size() == 0) throw ConfigError("semantic direction needs a semantic_source modality");
        const double acc = retrieval_accuracy(model, query, split.at(dir.gallery).query).accuracy;
        rows[ki * cfg.directions.size() + di].accuracies.push_back(acc);
      }
    }
  }
  for (auto& r : rows) {
    const double n = static_cast<double>(r.accuracies.size());
    r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
    r.stddev = r.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return rows;
}

}  // namespace spaner

#endif  // SPANER_EVAL_HPP
