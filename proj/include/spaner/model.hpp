#ifndef SPANER_MODEL_HPP
#define SPANER_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spaner/contrastive.hpp"
#include "spaner/errors.hpp"
#include "spaner/grad_check.hpp"
#include "spaner/rng.hpp"
#include "spaner/tensor.hpp"

namespace spaner {

/// Scalar weighting of the two contrastive terms: L = L_align + lambda * L_ca.
struct Objective {
  double lambda = 1.0;
  ContrastiveConfig loss;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  double temperature = 1.0;
  bool symmetric = false;
  std::size_t width = 32;          // shared prompt width d
  std::size_t prompt_tokens = 4;   // n
  std::size_t heads = 2;           // h
  std::size_t proj_dim = 32;       // d_proj

  Objective objective() const { return {lambda, {temperature, symmetric}}; }

  void validate() const {
    auto require = [](bool ok, const char* field, const char* rule) {
      if (!ok) throw ConfigError(std::string("train.") + field + " " + rule);
    };
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate", "must be >= 0");
    require(beta1 > 0.0 && beta1 < 1.0, "beta1", "must be in (0, 1)");
    require(beta2 > 0.0 && beta2 < 1.0, "beta2", "must be in (0, 1)");
    require(adam_eps > 0.0, "adam_eps", "must be > 0");
    require(batch_size >= 2, "batch_size", "must be >= 2");
    require(lambda >= 0.0 && std::isfinite(lambda), "lambda", "must be >= 0");
    require(temperature > 0.0, "temperature", "must be > 0");
    require(width >= 1, "width", "must be >= 1");
    require(prompt_tokens >= 1, "prompt_tokens", "must be >= 1");
    require(heads >= 1 && width % heads == 0, "heads", "must divide width");
    require(proj_dim >= 1, "proj_dim", "must be >= 1");
  }
};

struct SharedPrompt {
  Parameter tokens;  // [n x d]

  std::size_t count() const { return tokens.value.rows(); }
  std::size_t width() const { return tokens.value.cols(); }
};

struct CrossAttentionAligner {
  Parameter norm_gain;  // [d]
  Parameter norm_bias;  // [d]
  Parameter query;      // [d x d], heads occupy contiguous column blocks
  Parameter key;
  Parameter value;
  Parameter output;
  std::size_t heads = 1;
  double norm_eps = 1e-5;

  std::size_t width() const { return query.value.rows(); }
};

struct ProjectionHead {
  Parameter weight;  // [d x d_proj]
  Parameter bias;    // [d_proj]
};

struct ModalityBranch {
  std::string tag;
  std::size_t input_dim = 0;
  std::optional<Parameter> adapter;  // [input_dim x d], present iff input_dim != d
  CrossAttentionAligner aligner;
  ProjectionHead projection;
};

struct ModelShape {
  std::size_t width = 32;
  std::size_t prompt_tokens = 4;
  std::size_t heads = 2;
  std::size_t proj_dim = 32;
  double norm_eps = 1e-5;
};

class SpanerModel {
 public:
  ModelShape shape;
  Objective objective;
  SharedPrompt prompt;
  std::vector<ModalityBranch> branches;  // registration order

  bool has(const std::string& tag) const {
    for (const auto& b : branches)
      if (b.tag == tag) return true;
    return false;
  }

  const ModalityBranch& branch(const std::string& tag) const {
    for (const auto& b : branches)
      if (b.tag == tag) return b;
    throw ConfigError("unknown modality '" + tag + "'");
  }
  ModalityBranch& branch(const std::string& tag) {
    return const_cast<ModalityBranch&>(std::as_const(*this).branch(tag));
  }

  std::vector<std::string> modalities() const {
    std::vector<std::string> tags;
    for (const auto& b : branches) tags.push_back(b.tag);
    return tags;
  }

  /// Every Parameter with its stable name, prompt first, then branches in
  /// registration order. Pointers are valid until `branches` is modified.
  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    out.push_back({"prompt.tokens", &prompt.tokens});
    for (auto& b : branches) {
      const std::string p = b.tag + ".";
      if (b.adapter) out.push_back({p + "adapter.weight", &*b.adapter});
      out.push_back({p + "aligner.norm_gain", &b.aligner.norm_gain});
      out.push_back({p + "aligner.norm_bias", &b.aligner.norm_bias});
      out.push_back({p + "aligner.query", &b.aligner.query});
      out.push_back({p + "aligner.key", &b.aligner.key});
      out.push_back({p + "aligner.value", &b.aligner.value});
      out.push_back({p + "aligner.output", &b.aligner.output});
      out.push_back({p + "projection.weight", &b.projection.weight});
      out.push_back({p + "projection.bias", &b.projection.bias});
    }
    return out;
  }

  void zero_grad() {
    for (auto& np : parameters()) np.param->zero_grad();
  }

  void freeze_all() {
    for (auto& np : parameters()) np.param->frozen = true;
  }
};

namespace detail {

inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

inline Tensor column_block(const Tensor& m, std::size_t begin, std::size_t width) {
  Tensor out({m.rows(), width});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = m(i, begin + j);
  return out;
}

inline void set_column_block(Tensor& m, std::size_t begin, const Tensor& block) {
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) m(i, begin + j) = block(i, j);
}

inline Tensor rows_of(const Tensor& m, std::size_t begin, std::size_t count) {
  Tensor out({count, m.cols()});
  for (std::size_t i = 0; i < count; ++i) {
    auto src = m.row(begin + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

/// Appends a freshly initialized branch. Adapter only when input_dim != width.
inline void add_modality(SpanerModel& model, const std::string& tag, std::size_t input_dim, Rng& rng) {
  if (tag.empty()) throw ConfigError("modality tag must be non-empty");
  if (model.has(tag)) throw ConfigError("duplicate modality tag '" + tag + "'");
  if (input_dim < 1) throw ConfigError("modality '" + tag + "' input dim must be >= 1");
  const std::size_t d = model.shape.width;
  ModalityBranch b;
  b.tag = tag;
  b.input_dim = input_dim;
  if (input_dim != d) b.adapter = Parameter(detail::glorot_uniform(input_dim, d, rng));
  b.aligner.heads = model.shape.heads;
  b.aligner.norm_eps = model.shape.norm_eps;
  b.aligner.norm_gain = Parameter(Tensor({d}, 1.0));
  b.aligner.norm_bias = Parameter(Tensor({d}));
  b.aligner.query = Parameter(detail::glorot_uniform(d, d, rng));
  b.aligner.key = Parameter(detail::glorot_uniform(d, d, rng));
  b.aligner.value = Parameter(detail::glorot_uniform(d, d, rng));
  b.aligner.output = Parameter(detail::glorot_uniform(d, d, rng));
  b.projection.weight = Parameter(detail::glorot_uniform(d, model.shape.proj_dim, rng));
  b.projection.bias = Parameter(Tensor({model.shape.proj_dim}));
  model.branches.push_back(std::move(b));
}

inline SpanerModel init_model(const TrainConfig& cfg,
                              const std::vector<std::pair<std::string, std::size_t>>& modalities,
                              Rng& rng) {
  cfg.validate();
  if (modalities.size() < 2) throw ConfigError("a model needs at least two modalities");
  SpanerModel model;
  model.shape = {cfg.width, cfg.prompt_tokens, cfg.heads, cfg.proj_dim, 1e-5};
  model.objective = cfg.objective();
  Tensor tokens({cfg.prompt_tokens, cfg.width});
  for (double& v : tokens.data()) v = rng.normal(0.0, 0.02);
  model.prompt.tokens = Parameter(std::move(tokens));
  for (const auto& [tag, dim] : modalities) add_modality(model, tag, dim, rng);
  return model;
}

/// Redraws every parameter uniformly in [-1, 1]. Gradient checks use this:
/// at the N(0, 0.02^2) prompt scale the pre-norm is too curved for a 1e-4
/// finite-difference step.
inline void randomize_parameters(SpanerModel& model, Rng& rng) {
  for (auto& np : model.parameters())
    for (double& v : np.param->value.data()) v = rng.uniform(-1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Aligner: pre-norm -> multi-head self-attention over [x_b; S] -> residual.

struct AlignerSampleCache {
  Tensor tokens;  // [1+n x d]
  ops::LayerNormCache norm;
  Tensor normed;
  Tensor q, k, v;
  std::vector<Tensor> attention;  // per head, [1+n x 1+n]
  Tensor mixed;                   // concatenated head outputs
  Tensor out;                     // tokens + mixed * W_o
};

struct AlignerOutput {
  Tensor features;       // x' [B x d]
  Tensor prompt_tokens;  // S' [B x n x d]
  std::vector<AlignerSampleCache> cache;
};

inline AlignerSampleCache attend_sample(const CrossAttentionAligner& al, const Tensor& tokens) {
  const std::size_t len = tokens.rows(), d = tokens.cols();
  const std::size_t dh = d / al.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AlignerSampleCache c;
  c.tokens = tokens;
  c.normed = ops::layer_norm_rows(tokens, al.norm_gain.value, al.norm_bias.value, al.norm_eps, &c.norm);
  c.q = ops::matmul(c.normed, al.query.value);
  c.k = ops::matmul(c.normed, al.key.value);
  c.v = ops::matmul(c.normed, al.value.value);
  c.mixed = Tensor({len, d});
  for (std::size_t h = 0; h < al.heads; ++h) {
    const Tensor qh = detail::column_block(c.q, h * dh, dh);
    const Tensor kh = detail::column_block(c.k, h * dh, dh);
    const Tensor vh = detail::column_block(c.v, h * dh, dh);
    Tensor scores = ops::matmul(qh, ops::transpose(kh));
    scores *= scale;
    c.attention.push_back(ops::softmax_rows(scores));
    detail::set_column_block(c.mixed, h * dh, ops::matmul(c.attention.back(), vh));
  }
  c.out = c.tokens;
  c.out += ops::matmul(c.mixed, al.output.value);
  return c;
}

inline AlignerOutput aligner_forward(const CrossAttentionAligner& al, const SharedPrompt& prompt,
                                     const Tensor& x) {
  ops::require_matrix(x, "aligner_forward");
  const std::size_t d = al.width();
  if (x.cols() != d || prompt.width() != d) {
    throw DimensionError("aligner_forward: input " + shape_string(x.shape()) + ", prompt " +
                         shape_string(prompt.tokens.value.shape()) + ", aligner width " +
                         std::to_string(d));
  }
  if (d % al.heads != 0) throw DimensionError("aligner width must be divisible by head count");
  const std::size_t batch = x.rows(), n = prompt.count();
  AlignerOutput out{Tensor({batch, d}), Tensor({batch, n, d}), {}};
  out.cache.reserve(batch);
  Tensor tokens({1 + n, d});
  for (std::size_t t = 0; t < n; ++t) {
    auto src = prompt.tokens.value.row(t);
    std::copy(src.begin(), src.end(), tokens.row(1 + t).begin());
  }
  for (std::size_t b = 0; b < batch; ++b) {
    auto xb = x.row(b);
    std::copy(xb.begin(), xb.end(), tokens.row(0).begin());
    AlignerSampleCache c = attend_sample(al, tokens);
    auto o0 = c.out.row(0);
    std::copy(o0.begin(), o0.end(), out.features.row(b).begin());
    auto sb = out.prompt_tokens.row(b);
    std::copy(c.out.data().begin() + static_cast<std::ptrdiff_t>(d), c.out.data().end(), sb.begin());
    out.cache.push_back(std::move(c));
  }
  return out;
}

struct AlignerGrads {
  Tensor norm_gain, norm_bias, query, key, value, output;
  Tensor input;   // [B x d]
  Tensor prompt;  // [n x d], summed over the batch
};

/// Backward through the aligner given upstream gradients of every output
/// token ([B x (1+n) x d], token 0 is x'_b).
inline AlignerGrads aligner_backward(const CrossAttentionAligner& al, const AlignerOutput& fw,
                                     const Tensor& grad_tokens) {
  const std::size_t batch = fw.cache.size();
  const std::size_t d = al.width();
  const std::size_t len = fw.cache.front().tokens.rows();
  const std::size_t dh = d / al.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  AlignerGrads g{Tensor({d}), Tensor({d}), Tensor({d, d}), Tensor({d, d}), Tensor({d, d}),
                 Tensor({d, d}), Tensor({batch, d}), Tensor({len - 1, d})};
  const Tensor wo_t = ops::transpose(al.output.value);
  const Tensor wq_t = ops::transpose(al.query.value);
  const Tensor wk_t = ops::transpose(al.key.value);
  const Tensor wv_t = ops::transpose(al.value.value);
  for (std::size_t b = 0; b < batch; ++b) {
    const AlignerSampleCache& c = fw.cache[b];
    Tensor grad_out({len, d});
    auto src = grad_tokens.row(b);
    std::copy(src.begin(), src.end(), grad_out.data().begin());

    // Residual path.
    Tensor grad_in = grad_out;

    g.output += ops::matmul(ops::transpose(c.mixed), grad_out);
    const Tensor grad_mixed = ops::matmul(grad_out, wo_t);

    Tensor grad_q({len, d}), grad_k({len, d}), grad_v({len, d});
    for (std::size_t h = 0; h < al.heads; ++h) {
      const Tensor& attn = c.attention[h];
      const Tensor qh = detail::column_block(c.q, h * dh, dh);
      const Tensor kh = detail::column_block(c.k, h * dh, dh);
      const Tensor vh = detail::column_block(c.v, h * dh, dh);
      const Tensor grad_oh = detail::column_block(grad_mixed, h * dh, dh);
      const Tensor grad_attn = ops::matmul(grad_oh, ops::transpose(vh));
      detail::set_column_block(grad_v, h * dh, ops::matmul(ops::transpose(attn), grad_oh));
      Tensor grad_scores = ops::softmax_rows_backward(attn, grad_attn);
      grad_scores *= scale;
      detail::set_column_block(grad_q, h * dh, ops::matmul(grad_scores, kh));
      detail::set_column_block(grad_k, h * dh, ops::matmul(ops::transpose(grad_scores), qh));
    }

    const Tensor normed_t = ops::transpose(c.normed);
    g.query += ops::matmul(normed_t, grad_q);
    g.key += ops::matmul(normed_t, grad_k);
    g.value += ops::matmul(normed_t, grad_v);
    Tensor grad_normed = ops::matmul(grad_q, wq_t);
    grad_normed += ops::matmul(grad_k, wk_t);
    grad_normed += ops::matmul(grad_v, wv_t);

    ops::LayerNormGrads ln = ops::layer_norm_rows_backward(c.norm, al.norm_gain.value, grad_normed);
    g.norm_gain += ln.gain;
    g.norm_bias += ln.bias;
    grad_in += ln.input;

    auto gi0 = grad_in.row(0);
    std::copy(gi0.begin(), gi0.end(), g.input.row(b).begin());
    for (std::size_t t = 1; t < len; ++t)
      for (std::size_t j = 0; j < d; ++j) g.prompt(t - 1, j) += grad_in(t, j);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Max-pool readout over {x'_b, S'_b,1 .. S'_b,n}.

struct PooledEmbedding {
  Tensor z;                         // [B x d]
  std::vector<ops::TokenMax> pooled;  // per sample, for routing gradients
  std::size_t tokens = 0;           // 1 + n
};

inline PooledEmbedding pooled_embedding(const Tensor& features, const Tensor& prompt_tokens) {
  ops::require_matrix(features, "pooled_embedding");
  if (prompt_tokens.rank() != 3 || prompt_tokens.shape()[0] != features.rows() ||
      prompt_tokens.shape()[2] != features.cols()) {
    throw DimensionError("pooled_embedding: features " + shape_string(features.shape()) +
                         " vs prompt tokens " + shape_string(prompt_tokens.shape()));
  }
  const std::size_t batch = features.rows(), d = features.cols();
  const std::size_t n = prompt_tokens.shape()[1];
  PooledEmbedding out{Tensor({batch, d}), {}, 1 + n};
  Tensor seq({1 + n, d});
  for (std::size_t b = 0; b < batch; ++b) {
    auto fb = features.row(b);
    std::copy(fb.begin(), fb.end(), seq.row(0).begin());
    auto sb = prompt_tokens.row(b);
    std::copy(sb.begin(), sb.end(), seq.data().begin() + static_cast<std::ptrdiff_t>(d));
    ops::TokenMax tm = ops::elementwise_max_over_tokens(seq);
    std::copy(tm.value.data().begin(), tm.value.data().end(), out.z.row(b).begin());
    out.pooled.push_back(std::move(tm));
  }
  return out;
}

/// Routes dL/dz back onto the [B x (1+n) x d] token grid.
inline Tensor pooled_embedding_backward(const PooledEmbedding& pe, const Tensor& grad_z) {
  const std::size_t batch = grad_z.rows(), d = grad_z.cols();
  Tensor grad({batch, pe.tokens, d});
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor gb = ops::elementwise_max_over_tokens_backward(pe.pooled[b], pe.tokens, grad_z.row(b));
    std::copy(gb.data().begin(), gb.data().end(), grad.row(b).begin());
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Branch forward / backward.

struct BranchForward {
  std::string tag;
  Tensor input;  // raw encoder output [B x d_in]
  Tensor x;      // after dim adapter [B x d]
  AlignerOutput aligned;
  PooledEmbedding pooled;
  Tensor f;      // projection of x [B x d_proj]

  const Tensor& z() const { return pooled.z; }
};

inline Tensor project(const ProjectionHead& head, const Tensor& x) {
  Tensor f = ops::matmul(x, head.weight.value);
  for (std::size_t i = 0; i < f.rows(); ++i)
    for (std::size_t j = 0; j < f.cols(); ++j) f(i, j) += head.bias.value[j];
  return f;
}

inline BranchForward forward_branch(const SpanerModel& model, const std::string& tag,
                                    const Tensor& input) {
  const ModalityBranch& br = model.branch(tag);
  ops::require_matrix(input, "forward");
  if (input.cols() != br.input_dim) {
    throw DimensionError("forward: modality '" + tag + "' expects width " +
                         std::to_string(br.input_dim) + ", got " + shape_string(input.shape()));
  }
  BranchForward fw;
  fw.tag = tag;
  fw.input = input;
  fw.x = br.adapter ? ops::matmul(input, br.adapter->value) : input;
  fw.aligned = aligner_forward(br.aligner, model.prompt, fw.x);
  fw.pooled = pooled_embedding(fw.aligned.features, fw.aligned.prompt_tokens);
  fw.f = project(br.projection, fw.x);
  return fw;
}

struct ModalityOutput {
  Tensor z;
  Tensor f;
};

inline std::map<std::string, ModalityOutput> forward(const SpanerModel& model,
                                                     const std::map<std::string, Tensor>& batch) {
  std::map<std::string, ModalityOutput> out;
  std::optional<std::size_t> rows;
  for (const auto& [tag, input] : batch) {
    if (!model.has(tag)) throw ConfigError("unknown modality '" + tag + "'");
    if (rows && input.rows() != *rows) throw DimensionError("forward: batch sizes differ across modalities");
    rows = input.rows();
    BranchForward fw = forward_branch(model, tag, input);
    out[tag] = {fw.pooled.z, fw.f};
  }
  return out;
}

/// Accumulates parameter gradients of one branch. Frozen parameters are
/// left untouched.
inline void backward_branch(SpanerModel& model, const BranchForward& fw, const Tensor& grad_z,
                            const Tensor& grad_f) {
  ModalityBranch& br = model.branch(fw.tag);

  // f = x W + b
  br.projection.weight.accumulate(ops::matmul(ops::transpose(fw.x), grad_f));
  Tensor grad_bias({grad_f.cols()});
  for (std::size_t i = 0; i < grad_f.rows(); ++i)
    for (std::size_t j = 0; j < grad_f.cols(); ++j) grad_bias[j] += grad_f(i, j);
  br.projection.bias.accumulate(grad_bias);
  Tensor grad_x = ops::matmul(grad_f, ops::transpose(br.projection.weight.value));

  const Tensor grad_tokens = pooled_embedding_backward(fw.pooled, grad_z);
  AlignerGrads ag = aligner_backward(br.aligner, fw.aligned, grad_tokens);
  br.aligner.norm_gain.accumulate(ag.norm_gain);
  br.aligner.norm_bias.accumulate(ag.norm_bias);
  br.aligner.query.accumulate(ag.query);
  br.aligner.key.accumulate(ag.key);
  br.aligner.value.accumulate(ag.value);
  br.aligner.output.accumulate(ag.output);
  model.prompt.tokens.accumulate(ag.prompt);
  grad_x += ag.input;

  if (br.adapter) br.adapter->accumulate(ops::matmul(ops::transpose(fw.input), grad_x));
}

// ---------------------------------------------------------------------------
// Loss and training.

struct StepLosses {
  double total = 0.0;
  double align = 0.0;
  double ca = 0.0;
};

struct PairBatch {
  std::string first;
  Tensor first_inputs;
  std::string second;
  Tensor second_inputs;
};

inline StepLosses evaluate_loss(const SpanerModel& model, const PairBatch& batch,
                                const Objective& objective) {
  const BranchForward a = forward_branch(model, batch.first, batch.first_inputs);
  const BranchForward b = forward_branch(model, batch.second, batch.second_inputs);
  StepLosses l;
  l.ca = contrastive_loss(a.z(), b.z(), objective.loss).loss;
  l.align = contrastive_loss(a.f, b.f, objective.loss).loss;
  l.total = l.align + objective.lambda * l.ca;
  return l;
}

/// Zeroes all gradients, then fills them with dL/dtheta for this batch.
inline StepLosses compute_gradients(SpanerModel& model, const PairBatch& batch,
                                    const Objective& objective) {
  if (batch.first_inputs.rows() != batch.second_inputs.rows()) {
    throw DimensionError("paired batch has " + std::to_string(batch.first_inputs.rows()) +
                         " vs " + std::to_string(batch.second_inputs.rows()) + " rows");
  }
  model.zero_grad();
  const BranchForward a = forward_branch(model, batch.first, batch.first_inputs);
  const BranchForward b = forward_branch(model, batch.second, batch.second_inputs);
  ContrastiveResult ca = contrastive_loss(a.z(), b.z(), objective.loss, true);
  ContrastiveResult align = contrastive_loss(a.f, b.f, objective.loss, true);
  StepLosses l{align.loss + objective.lambda * ca.loss, align.loss, ca.loss};
  ca.grad_z1 *= objective.lambda;
  ca.grad_z2 *= objective.lambda;
  backward_branch(model, a, ca.grad_z1, align.grad_z1);
  backward_branch(model, b, ca.grad_z2, align.grad_z2);
  return l;
}

/// Adam with bias correction and no weight decay; moments keyed by parameter name.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  explicit AdamOptimizer(const TrainConfig& cfg)
      : AdamOptimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps) {}

  void step(SpanerModel& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, param] : model.parameters()) {
      if (param->frozen) continue;
      auto [it, inserted] = moments_.try_emplace(name);
      if (inserted) it->second = {Tensor(param->value.shape()), Tensor(param->value.shape())};
      auto& [m, v] = it->second;
      auto value = param->value.data();
      auto grad = param->grad.data();
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::uint64_t steps() const noexcept { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

inline StepLosses training_step(SpanerModel& model, const PairBatch& batch, AdamOptimizer& opt,
                                const Objective& objective, std::size_t step_index = 0) {
  if (batch.first_inputs.rows() < 2) {
    throw ArgumentError("training_step needs a batch of at least 2 pairs");
  }
  const StepLosses l = compute_gradients(model, batch, objective);
  if (!std::isfinite(l.total) || !std::isfinite(l.align) || !std::isfinite(l.ca)) {
    throw NumericError("non-finite loss at step " + std::to_string(step_index));
  }
  opt.step(model);
  return l;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double loss_align = 0.0;
  double loss_ca = 0.0;
};

struct TrainHistory {
  double lambda = 1.0;
  std::vector<StepRecord> steps;
};

/// Rows of `first` and `second` describe the same instances, in order.
struct PairedDataset {
  std::string first_tag;
  Tensor first;
  std::string second_tag;
  Tensor second;

  std::size_t size() const { return first.empty() ? 0 : first.rows(); }
};

/// Splits a shuffled index list into batches of `batch_size`; a trailing
/// singleton is merged into the previous batch so every batch has >= 2 rows.
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() < 2) {
    const std::vector<std::size_t> tail = batches.back();
    batches.pop_back();
    batches.back().insert(batches.back().end(), tail.begin(), tail.end());
  }
  return batches;
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), m.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

using StepObserver = std::function<void(const SpanerModel&, const StepRecord&)>;

/// Runs epochs x batches training steps with a seeded shuffle per epoch.
/// The observer, if given, sees the model after each optimizer step (the
/// gradients of that step are still in place).
inline TrainHistory fit(SpanerModel& model, const PairedDataset& data, const TrainConfig& cfg,
                        const StepObserver& observer = {}) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("fit: empty dataset");
  if (data.first.rows() != data.second.rows()) {
    throw DimensionError("fit: paired tensors have different row counts");
  }
  if (data.size() < 2) throw ConfigError("fit: need at least 2 paired rows");
  model.branch(data.first_tag);
  model.branch(data.second_tag);

  const Objective objective = cfg.objective();
  AdamOptimizer opt(cfg);
  const Rng root(cfg.seed);
  TrainHistory history;
  history.lambda = cfg.lambda;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler = root.split(0x5348554646ULL + epoch);
    shuffler.shuffle(std::span<std::size_t>(order));
    for (const auto& rows : make_batches(std::move(order), cfg.batch_size)) {
      PairBatch batch{data.first_tag, gather_rows(data.first, rows), data.second_tag,
                      gather_rows(data.second, rows)};
      const StepLosses l = training_step(model, batch, opt, objective, step);
      StepRecord rec{step, l.total, l.align, l.ca};
      history.steps.push_back(rec);
      if (observer) observer(model, rec);
      ++step;
    }
  }
  return history;
}

}  // namespace spaner

#endif  // SPANER_MODEL_HPP
