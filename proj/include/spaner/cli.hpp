#ifndef SPANER_CLI_HPP
#define SPANER_CLI_HPP

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spaner/checkpoint.hpp"
#include "spaner/data.hpp"
#include "spaner/eval.hpp"
#include "spaner/extension.hpp"
#include "spaner/grad_check.hpp"
#include "spaner/model.hpp"
#include "spaner/report.hpp"

namespace spaner::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4 };

struct ExtendSettings {
  std::string modality;
  std::string anchor;
  std::optional<std::size_t> epochs;
  std::optional<double> learning_rate;
  std::optional<std::size_t> batch_size;
};

struct GradCheckSettings {
  std::size_t batch = 4;
  double step = 1e-4;
  double tolerance = 1e-4;
};

struct EvalSettings {
  std::vector<std::size_t> k{1};
  std::string match = "class";
  std::size_t top_n = 20;
  std::size_t workers = 1;

  MatchMode match_mode() const { return match == "instance" ? MatchMode::Instance : MatchMode::Class; }
};

struct RunConfig {
  std::uint64_t seed = 0;
  SyntheticSpec data;
  std::string semantic_source;             // empty: no semantic file
  TrainConfig train;
  std::vector<std::string> train_modalities;  // empty: first two data modalities
  ExtendSettings extend;
  GradCheckSettings grad_check;
  EvalSettings eval;

  /// Seeds and cross-field rules; called after overrides are applied.
  void resolve() {
    data.seed = seed;
    train.seed = seed;
    data.validate();
    train.validate();
    for (const auto& m : data.modalities) {
      if (m.tag.size() > kModalityTagBytes) throw ConfigError("data.modalities.tag '" + m.tag + "' exceeds 8 bytes");
      for (char c : m.tag) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') {
          throw ConfigError("data.modalities.tag '" + m.tag + "' may only use [A-Za-z0-9_-]");
        }
      }
    }
    if (!semantic_source.empty()) data.modality(semantic_source);
    if (train_modalities.empty()) {
      if (data.modalities.size() < 2) throw ConfigError("train.modalities: need two data modalities");
      train_modalities = {data.modalities[0].tag, data.modalities[1].tag};
    }
    if (train_modalities.size() != 2 || train_modalities[0] == train_modalities[1]) {
      throw ConfigError("train.modalities must name two distinct modalities");
    }
    if (grad_check.batch < 2) throw ConfigError("grad_check.batch must be >= 2");
    if (!(grad_check.step > 0.0)) throw ConfigError("grad_check.step must be > 0");
    if (!(grad_check.tolerance > 0.0)) throw ConfigError("grad_check.tolerance must be > 0");
    if (eval.k.empty()) throw ConfigError("eval.k must not be empty");
    for (auto k : eval.k)
      if (k == 0) throw ConfigError("eval.k entries must be >= 1");
    if (eval.match != "class" && eval.match != "instance") throw ConfigError("eval.match must be 'class' or 'instance'");
    if (eval.workers == 0) throw ConfigError("eval.workers must be >= 1");
  }

  TrainConfig extension_train() const {
    TrainConfig t = train;
    if (extend.epochs) t.epochs = *extend.epochs;
    if (extend.learning_rate) t.learning_rate = *extend.learning_rate;
    if (extend.batch_size) t.batch_size = *extend.batch_size;
    return t;
  }
};

// ---------------------------------------------------------------------------
// JSON <-> RunConfig. Every object rejects keys it does not know.

namespace detail {

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + label() + "' must be an object");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json* take(const std::string& k) {
    seen_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& k, double& out) {
    if (const json* v = take(k)) {
      if (!v->is_number()) throw ConfigError("config: '" + key(k) + "' must be a number");
      out = v->get<double>();
    }
  }

  template <typename U>
  void get_unsigned(const std::string& k, U& out) {
    if (const json* v = take(k)) out = static_cast<U>(as_unsigned(*v, key(k)));
  }

  void get(const std::string& k, bool& out) {
    if (const json* v = take(k)) {
      if (!v->is_boolean()) throw ConfigError("config: '" + key(k) + "' must be true or false");
      out = v->get<bool>();
    }
  }

  void get(const std::string& k, std::string& out) {
    if (const json* v = take(k)) {
      if (!v->is_string()) throw ConfigError("config: '" + key(k) + "' must be a string");
      out = v->get<std::string>();
    }
  }

  static std::uint64_t as_unsigned(const json& v, const std::string& name) {
    if (!v.is_number_unsigned()) throw ConfigError("config: '" + name + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + key(it.key()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_train(Fields& f, TrainConfig& t) {
  f.get("learning_rate", t.learning_rate);
  f.get("beta1", t.beta1);
  f.get("beta2", t.beta2);
  f.get("adam_eps", t.adam_eps);
  f.get_unsigned("epochs", t.epochs);
  f.get_unsigned("batch_size", t.batch_size);
  f.get("lambda", t.lambda);
  f.get("temperature", t.temperature);
  f.get("symmetric", t.symmetric);
  f.get_unsigned("width", t.width);
  f.get_unsigned("prompt_tokens", t.prompt_tokens);
  f.get_unsigned("heads", t.heads);
  f.get_unsigned("proj_dim", t.proj_dim);
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  RunConfig c;
  detail::Fields root(j, "");
  root.get_unsigned("seed", c.seed);
  if (const json* d = root.take("data")) {
    detail::Fields f(*d, "data");
    f.get_unsigned("classes", c.data.classes);
    f.get_unsigned("latent_dim", c.data.latent_dim);
    f.get_unsigned("instances_per_class", c.data.instances_per_class);
    f.get("latent_jitter", c.data.latent_jitter);
    f.get("semantic_source", c.semantic_source);
    if (const json* ms = f.take("modalities")) {
      if (!ms->is_array()) throw ConfigError("config: 'data.modalities' must be an array");
      c.data.modalities.clear();
      for (const auto& m : *ms) {
        detail::Fields mf(m, "data.modalities");
        ModalitySpec spec;
        mf.get("tag", spec.tag);
        mf.get_unsigned("dim", spec.dim);
        mf.get("noise", spec.noise);
        mf.finish();
        c.data.modalities.push_back(spec);
      }
    }
    f.finish();
  }
  if (const json* t = root.take("train")) {
    detail::Fields f(*t, "train");
    detail::read_train(f, c.train);
    if (const json* ms = f.take("modalities")) {
      if (!ms->is_array()) throw ConfigError("config: 'train.modalities' must be an array of tags");
      for (const auto& m : *ms) {
        if (!m.is_string()) throw ConfigError("config: 'train.modalities' must be an array of tags");
        c.train_modalities.push_back(m.get<std::string>());
      }
    }
    f.finish();
  }
  if (const json* e = root.take("extend")) {
    detail::Fields f(*e, "extend");
    f.get("modality", c.extend.modality);
    f.get("anchor", c.extend.anchor);
    if (const json* v = f.take("epochs")) c.extend.epochs = detail::Fields::as_unsigned(*v, "extend.epochs");
    if (const json* v = f.take("batch_size")) c.extend.batch_size = detail::Fields::as_unsigned(*v, "extend.batch_size");
    if (const json* v = f.take("learning_rate")) {
      if (!v->is_number()) throw ConfigError("config: 'extend.learning_rate' must be a number");
      c.extend.learning_rate = v->get<double>();
    }
    f.finish();
  }
  if (const json* g = root.take("grad_check")) {
    detail::Fields f(*g, "grad_check");
    f.get_unsigned("batch", c.grad_check.batch);
    f.get("step", c.grad_check.step);
    f.get("tolerance", c.grad_check.tolerance);
    f.finish();
  }
  if (const json* e = root.take("eval")) {
    detail::Fields f(*e, "eval");
    if (const json* ks = f.take("k")) {
      c.eval.k.clear();
      if (ks->is_array()) {
        for (const auto& k : *ks) c.eval.k.push_back(detail::Fields::as_unsigned(k, "eval.k"));
      } else {
        c.eval.k.push_back(detail::Fields::as_unsigned(*ks, "eval.k"));
      }
    }
    f.get("match", c.eval.match);
    f.get_unsigned("top_n", c.eval.top_n);
    f.get_unsigned("workers", c.eval.workers);
    f.finish();
  }
  root.finish();
  return c;
}

inline json to_json(const RunConfig& c) {
  json modalities = json::array();
  for (const auto& m : c.data.modalities) modalities.push_back({{"tag", m.tag}, {"dim", m.dim}, {"noise", m.noise}});
  const TrainConfig& t = c.train;
  json ext = {{"modality", c.extend.modality}, {"anchor", c.extend.anchor}};
  const TrainConfig et = c.extension_train();
  ext["epochs"] = et.epochs;
  ext["learning_rate"] = et.learning_rate;
  ext["batch_size"] = et.batch_size;
  return {{"seed", c.seed},
          {"data",
           {{"classes", c.data.classes},
            {"latent_dim", c.data.latent_dim},
            {"instances_per_class", c.data.instances_per_class},
            {"latent_jitter", c.data.latent_jitter},
            {"semantic_source", c.semantic_source},
            {"modalities", modalities}}},
          {"train",
           {{"learning_rate", t.learning_rate},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lambda", t.lambda},
            {"temperature", t.temperature},
            {"symmetric", t.symmetric},
            {"width", t.width},
            {"prompt_tokens", t.prompt_tokens},
            {"heads", t.heads},
            {"proj_dim", t.proj_dim},
            {"modalities", c.train_modalities}}},
          {"extend", ext},
          {"grad_check",
           {{"batch", c.grad_check.batch}, {"step", c.grad_check.step}, {"tolerance", c.grad_check.tolerance}}},
          {"eval",
           {{"k", c.eval.k}, {"match", c.eval.match}, {"top_n", c.eval.top_n}, {"workers", c.eval.workers}}}};
}

inline RunConfig load_config(const std::optional<fs::path>& path) {
  if (!path) return RunConfig{};
  const std::string text = io::read_file(*path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path->string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Commands.

namespace detail {

enum : std::uint64_t { kInitStream = 0x494e4954, kExtendStream = 0x455854, kGradCheckStream = 0x47524144 };

inline std::string echo(const std::string& command, const RunConfig& c) {
  return "spaner " + command + " config=" + to_json(c).dump();
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

struct Manifest {
  std::map<std::string, fs::path> files;
  std::optional<fs::path> semantic;
};

inline Manifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  Manifest m;
  try {
    const json j = json::parse(io::read_file(path));
    for (const auto& [tag, file] : j.at("files").items()) m.files[tag] = dir / file.get<std::string>();
    if (j.contains("semantic")) m.semantic = dir / j.at("semantic").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("manifest '" + path.string() + "' is malformed: " + e.what());
  }
  return m;
}

inline LabeledEmbeddings load_modality(const Manifest& m, const std::string& tag) {
  auto it = m.files.find(tag);
  if (it == m.files.end()) throw ConfigError("modality '" + tag + "' is not in the data manifest");
  LabeledEmbeddings e = read_embeddings(it->second);
  if (e.modality != tag) {
    throw DataError("file '" + it->second.string() + "' holds modality '" + e.modality + "', expected '" + tag + "'");
  }
  return e;
}

}  // namespace detail

struct Context {
  std::ostream& out;
  std::ostream& err;
};

inline int cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir, Context ctx) {
  const PairedEmbeddings data = gen_synthetic(cfg.data);
  detail::ensure_dir(out_dir);
  json files = json::object();
  for (const auto& m : cfg.data.modalities) {
    const std::string name = m.tag + ".spne";
    write_embeddings(data.at(m.tag), out_dir / name);
    files[m.tag] = name;
    ctx.out << "wrote " << (out_dir / name).string() << " (" << data.at(m.tag).size() << " x " << m.dim << ")\n";
  }
  json manifest = {{"seed", cfg.seed}, {"files", files}, {"config", to_json(cfg)}};
  if (!cfg.semantic_source.empty()) {
    write_embeddings(semantic_modality(cfg.data, cfg.semantic_source), out_dir / "semantic.spne");
    manifest["semantic"] = "semantic.spne";
    ctx.out << "wrote " << (out_dir / "semantic.spne").string() << " (one row per class)\n";
  }
  io::write_file(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return kOk;
}

inline int cmd_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, Context ctx) {
  const auto manifest = detail::read_manifest(data_dir);
  const auto& [a, b] = std::pair(cfg.train_modalities[0], cfg.train_modalities[1]);
  const LabeledEmbeddings first = detail::load_modality(manifest, a);
  const LabeledEmbeddings second = detail::load_modality(manifest, b);
  Rng rng = Rng(cfg.seed).split(detail::kInitStream);
  SpanerModel model = init_model(cfg.train, {{a, first.dim()}, {b, second.dim()}}, rng);
  const TrainHistory history = fit(model, make_pairs(first, second), cfg.train);

  detail::ensure_dir(out_dir);
  const std::string echo = detail::echo("train", cfg);
  save_checkpoint(make_checkpoint(model, to_json(cfg)), out_dir / "checkpoint.spnr");
  io::write_file(out_dir / "history.csv", csv::history(history, echo));
  ctx.out << "trained " << a << " <-> " << b << " for " << history.steps.size() << " steps (lambda "
          << csv::number(history.lambda) << ")\n";
  if (!history.steps.empty()) ctx.out << "final loss " << csv::number(history.steps.back().loss) << "\n";
  return kOk;
}

inline int cmd_extend(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data_dir,
                      const fs::path& out_dir, Context ctx) {
  if (cfg.extend.modality.empty()) throw ConfigError("extend.modality must be set");
  if (cfg.extend.anchor.empty()) throw ConfigError("extend.anchor must be set");
  const Checkpoint before = load_checkpoint(checkpoint);
  SpanerModel model = restore_model(before);
  if (!model.has(cfg.extend.anchor)) {
    throw ConfigError("extend.anchor '" + cfg.extend.anchor + "' is not a modality of the checkpoint");
  }
  const auto manifest = detail::read_manifest(data_dir);
  const LabeledEmbeddings added = detail::load_modality(manifest, cfg.extend.modality);
  const LabeledEmbeddings anchor = detail::load_modality(manifest, cfg.extend.anchor);

  const ExtensionConfig ec{cfg.extend.modality, added.dim(), cfg.extend.anchor, cfg.extension_train()};
  Rng rng = Rng(cfg.seed).split(detail::kExtendStream);
  ExtensionResult result = extend(std::move(model), ec, make_pairs(added, anchor), rng);
  const Checkpoint after = make_checkpoint(result.model, to_json(cfg));
  const FrozenReport report = assert_frozen_unchanged(before, after, result.frozen);

  detail::ensure_dir(out_dir);
  const std::string echo = detail::echo("extend", cfg);
  save_checkpoint(after, out_dir / "checkpoint.spnr");
  io::write_file(out_dir / "history.csv", csv::history(result.history, echo));
  io::write_file(out_dir / "frozen_report.csv", csv::frozen_report(report, echo));
  ctx.out << "extended with " << ec.modality << " (anchor " << ec.anchor << "): " << before.parameters.size()
          << " -> " << after.parameters.size() << " parameters, " << result.history.steps.size() << " steps\n";
  if (!report.ok()) {
    ctx.err << "error: " << report.changed.size() << " frozen parameter(s) changed:";
    for (const auto& n : report.changed) ctx.err << ' ' << n;
    ctx.err << "\n";
    return kDataError;
  }
  ctx.out << "frozen report: " << result.frozen.size() << " parameters unchanged\n";
  return kOk;
}

inline int cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& query_file,
                    const fs::path& gallery_file, const fs::path& out, Context ctx) {
  const SpanerModel model = restore_model(load_checkpoint(checkpoint));
  const LabeledEmbeddings query = read_embeddings(query_file);
  const LabeledEmbeddings gallery = read_embeddings(gallery_file);
  const Tensor qz = embed_all(model, query);
  const Tensor gz = embed_all(model, gallery);
  std::vector<RetrievalReport> reports;
  for (std::size_t k : cfg.eval.k) {
    reports.push_back(score_retrieval(qz, query, gz, gallery, k, cfg.eval.match_mode(), cfg.eval.workers));
    ctx.out << reports.back().direction << " k=" << k << " accuracy " << csv::number(reports.back().accuracy)
            << " (" << cfg.eval.match << " match)\n";
  }
  detail::ensure_parent(out);
  io::write_file(out, csv::retrieval(reports, cfg.seed, detail::echo("eval", cfg)));
  return kOk;
}

inline int cmd_confusion(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& query_file,
                         const fs::path& gallery_file, const fs::path& out_dir, Context ctx) {
  const SpanerModel model = restore_model(load_checkpoint(checkpoint));
  const LabeledEmbeddings query = read_embeddings(query_file);
  const LabeledEmbeddings gallery = read_embeddings(gallery_file);
  const RetrievalReport r = retrieval_accuracy(model, query, gallery, 1, MatchMode::Class, cfg.eval.workers);
  const ConfusionMatrix cm = confusion_from_top1(r, query, gallery);

  std::vector<std::uint64_t> per_class(cm.classes(), 0);
  for (auto c : query.class_ids) ++per_class[c];
  bool rows_ok = true;
  for (std::size_t c = 0; c < cm.classes(); ++c) rows_ok &= cm.row_sum(c) == per_class[c];
  ctx.out << "row sums " << (rows_ok ? "match" : "DO NOT match") << " per-class query counts (" << cm.total()
          << " queries, " << cm.classes() << " classes)\n";
  ctx.out << "top-1 accuracy " << csv::number(r.accuracy) << " = trace " << cm.trace() << " / " << cm.total() << "\n";

  detail::ensure_dir(out_dir);
  const std::string echo = detail::echo("confusion", cfg);
  io::write_file(out_dir / "confusion.csv", csv::confusion(cm, echo));
  io::write_file(out_dir / "top_confusions.csv",
                 csv::top_confusions(cm, top_confusions(cm, cfg.eval.top_n), echo));
  return rows_ok ? kOk : kNumericError;
}

inline int cmd_project(const RunConfig& cfg, const fs::path& checkpoint, const std::vector<fs::path>& files,
                       const fs::path& out, Context ctx) {
  if (files.empty()) throw ArgumentError("project needs at least one embedding file");
  const SpanerModel model = restore_model(load_checkpoint(checkpoint));
  std::vector<LabeledEmbeddings> sets;
  std::size_t total = 0;
  for (const auto& f : files) {
    sets.push_back(read_embeddings(f));
    total += sets.back().size();
  }
  Tensor all({total, model.shape.width});
  std::size_t row = 0;
  for (const auto& s : sets) {
    const Tensor z = embed_all(model, s);
    for (std::size_t i = 0; i < z.rows(); ++i, ++row)
      for (std::size_t j = 0; j < z.cols(); ++j) all(row, j) = z(i, j);
  }
  const Projection2D p = pca_project_2d(all);
  std::vector<csv::ProjectedRow> rows;
  row = 0;
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < s.size(); ++i, ++row) {
      rows.push_back({p.coords(row, 0), p.coords(row, 1), s.class_ids[i], s.class_names[s.class_ids[i]], s.modality});
    }
  }
  detail::ensure_parent(out);
  io::write_file(out, csv::projection(rows, detail::echo("project", cfg)));
  ctx.out << "projected " << total << " rows from " << files.size() << " file(s); explained variance "
          << csv::number(p.variance[0]) << ", " << csv::number(p.variance[1]) << "\n";
  return kOk;
}

/// Runs after the analytic gradients are filled; test fixtures use it to
/// corrupt a backward rule.
using GradientHook = std::function<void(SpanerModel&)>;

/// Central-difference check of the full objective on a random instance built
/// from the train section (two modalities of input width `train.width`).
inline GradCheckResult model_grad_check(const RunConfig& cfg, const GradientHook& hook = {}) {
  Rng rng = Rng(cfg.seed).split(detail::kGradCheckStream);
  const std::string a = cfg.train_modalities[0], b = cfg.train_modalities[1];
  SpanerModel model = init_model(cfg.train, {{a, cfg.train.width}, {b, cfg.train.width}}, rng);
  randomize_parameters(model, rng);
  PairBatch batch{a, Tensor({cfg.grad_check.batch, cfg.train.width}), b,
                  Tensor({cfg.grad_check.batch, cfg.train.width})};
  for (double& v : batch.first_inputs.data()) v = rng.uniform(-1.0, 1.0);
  for (double& v : batch.second_inputs.data()) v = rng.uniform(-1.0, 1.0);
  const Objective obj = cfg.train.objective();
  return grad_check([&] { return evaluate_loss(model, batch, obj).total; },
                    [&] {
                      compute_gradients(model, batch, obj);
                      if (hook) hook(model);
                    },
                    model.parameters(), cfg.grad_check.step);
}

inline int cmd_grad_check(const RunConfig& cfg, Context ctx, const GradientHook& hook = {}) {
  const GradCheckResult r = model_grad_check(cfg, hook);
  ctx.out << "compared " << r.compared << " coordinates\n";
  ctx.out << "max relative error " << csv::number(r.max_rel_error) << "\n";
  ctx.out << "worst parameter " << r.worst_parameter << "[" << r.worst_index << "]\n";
  if (r.max_rel_error > cfg.grad_check.tolerance) {
    ctx.err << "error: gradient check failed (tolerance " << csv::number(cfg.grad_check.tolerance) << ")\n";
    return kNumericError;
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// Argument parsing and exit-code mapping.

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
               const GradientHook& grad_hook = {}) {
  CLI::App app{"Shared-prompt multimodal alignment toolkit", "spaner"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_path;
  std::size_t k = 0, top_n = 0, workers = 0;
  std::string match;
  std::string checkpoint, data_dir, query, gallery;
  std::vector<std::string> files;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Overrides the configured seed");
  };
  auto* gen = app.add_subcommand("gen-data", "Write synthetic SPNE files and a manifest");
  common(gen);
  gen->add_option("--out", out_path, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the two configured modalities");
  common(train);
  train->add_option("--data", data_dir, "Directory with manifest.json")->required();
  train->add_option("--out", out_path, "Output directory")->required();

  auto* ext = app.add_subcommand("extend", "Add a modality against a frozen model");
  common(ext);
  ext->add_option("--checkpoint", checkpoint, "Input SPNR checkpoint")->required();
  ext->add_option("--data", data_dir, "Directory with manifest.json")->required();
  ext->add_option("--out", out_path, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Top-k cross-modal retrieval report");
  common(eval);
  eval->add_option("--checkpoint", checkpoint, "SPNR checkpoint")->required();
  eval->add_option("--query", query, "Query SPNE file")->required();
  eval->add_option("--gallery", gallery, "Gallery SPNE file")->required();
  eval->add_option("--out", out_path, "Report CSV")->required();
  eval->add_option("--k", k, "Overrides eval.k");
  eval->add_option("--match", match, "class or instance")->check(CLI::IsMember({"class", "instance"}));
  eval->add_option("--workers", workers, "Parallel query workers");

  auto* conf = app.add_subcommand("confusion", "Top-1 confusion matrix and most frequent errors");
  common(conf);
  conf->add_option("--checkpoint", checkpoint, "SPNR checkpoint")->required();
  conf->add_option("--query", query, "Query SPNE file")->required();
  conf->add_option("--gallery", gallery, "Gallery SPNE file")->required();
  conf->add_option("--out", out_path, "Output directory")->required();
  conf->add_option("--top-n", top_n, "Number of confused pairs to list");
  conf->add_option("--workers", workers, "Parallel query workers");

  auto* proj = app.add_subcommand("project", "Joint 2-D PCA projection of embeddings");
  common(proj);
  proj->add_option("--checkpoint", checkpoint, "SPNR checkpoint")->required();
  proj->add_option("--out", out_path, "Projection CSV")->required();
  proj->add_option("files", files, "SPNE files")->required();

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full objective");
  common(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  CLI::App* sub = app.get_subcommands().front();
  Context ctx{out, err};
  try {
    RunConfig cfg = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));
    if (sub->count("--seed")) cfg.seed = seed;
    if (sub->get_option_no_throw("--k") && sub->count("--k")) cfg.eval.k = {k};
    if (sub->get_option_no_throw("--top-n") && sub->count("--top-n")) cfg.eval.top_n = top_n;
    if (sub->get_option_no_throw("--workers") && sub->count("--workers")) cfg.eval.workers = workers;
    if (sub->get_option_no_throw("--match") && sub->count("--match")) cfg.eval.match = match;
    cfg.resolve();

    if (sub == gen) return cmd_gen_data(cfg, out_path, ctx);
    if (sub == train) return cmd_train(cfg, data_dir, out_path, ctx);
    if (sub == ext) return cmd_extend(cfg, checkpoint, data_dir, out_path, ctx);
    if (sub == eval) return cmd_eval(cfg, checkpoint, query, gallery, out_path, ctx);
    if (sub == conf) return cmd_confusion(cfg, checkpoint, query, gallery, out_path, ctx);
    if (sub == proj) return cmd_project(cfg, checkpoint, {files.begin(), files.end()}, out_path, ctx);
    return cmd_grad_check(cfg, ctx, grad_hook);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kNumericError;
  } catch (const Error& e) {
    // Data, format, lineage, dimension and index errors all come from inputs.
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
               const GradientHook& grad_hook = {}) {
  std::vector<const char*> argv{"spaner"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err, grad_hook);
}

}  // namespace spaner::cli

#endif  // SPANER_CLI_HPP
