#ifndef SPANER_CONTRASTIVE_HPP
#define SPANER_CONTRASTIVE_HPP

#include <numeric>
#include <vector>

#include "spaner/errors.hpp"
#include "spaner/tensor.hpp"

namespace spaner {

struct ContrastiveConfig {
  double temperature = 1.0;
  bool symmetric = false;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  }
};

struct ContrastiveResult {
  double loss = 0.0;
  Tensor grad_z1;  // filled only when gradients were requested
  Tensor grad_z2;
};

/// Paired contrastive loss: rows of z1 and z2 are normalized, their cosine
/// similarity matrix is scaled by 1/temperature and scored by cross-entropy
/// against the diagonal. Symmetric mode averages with the transposed direction.
inline ContrastiveResult contrastive_loss(const Tensor& z1, const Tensor& z2,
                                          const ContrastiveConfig& cfg,
                                          bool with_grad = false) {
  cfg.validate();
  ops::require_matrix(z1, "contrastive_loss");
  ops::require_matrix(z2, "contrastive_loss");
  Tensor::require_same_shape(z1, z2, "contrastive_loss");

  const std::size_t batch = z1.rows();
  std::vector<std::size_t> targets(batch);
  std::iota(targets.begin(), targets.end(), std::size_t{0});

  const Tensor n1 = ops::row_normalize(z1);
  const Tensor n2 = ops::row_normalize(z2);
  Tensor logits = ops::matmul(n1, ops::transpose(n2));
  logits *= 1.0 / cfg.temperature;

  ContrastiveResult out;
  out.loss = ops::softmax_cross_entropy_rows(logits, targets);
  Tensor logits_t;
  if (cfg.symmetric) {
    logits_t = ops::transpose(logits);
    out.loss = 0.5 * (out.loss + ops::softmax_cross_entropy_rows(logits_t, targets));
  }
  if (!with_grad) return out;

  const double direction_weight = cfg.symmetric ? 0.5 : 1.0;
  Tensor grad_logits = ops::softmax_cross_entropy_rows_backward(logits, targets, direction_weight);
  if (cfg.symmetric) {
    grad_logits += ops::transpose(
        ops::softmax_cross_entropy_rows_backward(logits_t, targets, direction_weight));
  }
  grad_logits *= 1.0 / cfg.temperature;

  // similarity = n1 * n2^T
  Tensor grad_n1 = ops::matmul(grad_logits, n2);
  Tensor grad_n2 = ops::matmul(ops::transpose(grad_logits), n1);
  out.grad_z1 = ops::row_normalize_backward(z1, grad_n1);
  out.grad_z2 = ops::row_normalize_backward(z2, grad_n2);
  return out;
}

}  // namespace spaner

#endif  // SPANER_CONTRASTIVE_HPP
