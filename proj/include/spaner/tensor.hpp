#ifndef SPANER_TENSOR_HPP
#define SPANER_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spaner/errors.hpp"

namespace spaner {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  /// Builds a 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row i of a 2-D tensor (or slab i of a 3-D tensor, flattened).
  std::span<const double> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<const double>(data_).subspan(i * stride, stride);
  }
  std::span<double> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<double>(data_).subspan(i * stride, stride);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(*this, other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape_ != b.shape_) {
      throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape_) +
                           " vs " + shape_string(b.shape_));
    }
  }

 private:
  static std::size_t element_count(const Shape& shape) {
    for (std::size_t s : shape) {
      if (s == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Exact bit-pattern comparison (distinguishes -0.0 from 0.0, matches NaN payloads).
inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

/// A trainable tensor with its accumulated gradient.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }

  /// Adds `g` into the gradient; frozen parameters ignore it.
  void accumulate(const Tensor& g) {
    if (frozen) return;
    grad += g;
  }
};

namespace ops {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
  }
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

/// Gradients of matmul(a, b) given the upstream gradient of its output.
inline std::pair<Tensor, Tensor> matmul_backward(const Tensor& a, const Tensor& b,
                                                 const Tensor& grad_out) {
  return {matmul(grad_out, transpose(b)), matmul(transpose(a), grad_out)};
}

/// Divides each row by max(||row||, eps).
inline Tensor row_normalize(const Tensor& z, double eps = 1e-12) {
  require_matrix(z, "row_normalize");
  Tensor out = z;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = out.row(i);
    double sq = 0.0;
    for (double v : r) sq += v * v;
    const double norm = std::max(std::sqrt(sq), eps);
    for (double& v : r) v /= norm;
  }
  return out;
}

inline Tensor row_normalize_backward(const Tensor& z, const Tensor& grad_out, double eps = 1e-12) {
  Tensor::require_same_shape(z, grad_out, "row_normalize_backward");
  Tensor grad(z.shape());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto zr = z.row(i);
    auto gr = grad_out.row(i);
    auto out = grad.row(i);
    double sq = 0.0;
    for (double v : zr) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= eps) {
      // Clamped branch: y = z / eps is linear in z.
      for (std::size_t j = 0; j < zr.size(); ++j) out[j] = gr[j] / eps;
      continue;
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < zr.size(); ++j) dot += zr[j] * gr[j];
    for (std::size_t j = 0; j < zr.size(); ++j)
      out[j] = (gr[j] - zr[j] * dot / sq) / norm;
  }
  return grad;
}

/// Row-wise softmax, stabilized by subtracting each row's max.
inline Tensor softmax_rows(const Tensor& logits) {
  require_matrix(logits, "softmax_rows");
  Tensor out = logits;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : r) v /= sum;
  }
  return out;
}

/// Backward of softmax_rows given its output `probs`.
inline Tensor softmax_rows_backward(const Tensor& probs, const Tensor& grad_out) {
  Tensor::require_same_shape(probs, grad_out, "softmax_rows_backward");
  Tensor grad(probs.shape());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto p = probs.row(i);
    auto g = grad_out.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) dot += p[j] * g[j];
    auto out = grad.row(i);
    for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (g[j] - dot);
  }
  return grad;
}

inline void check_targets(const Tensor& logits, std::span<const std::size_t> targets) {
  require_matrix(logits, "softmax_cross_entropy_rows");
  if (targets.size() != logits.rows()) {
    throw DimensionError("softmax_cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(logits.rows()) + " rows");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.cols()) {
      throw IndexError("softmax_cross_entropy_rows: target " + std::to_string(targets[i]) +
                       " of row " + std::to_string(i) + " outside [0, " +
                       std::to_string(logits.cols()) + ")");
    }
  }
}

/// Mean over rows of -log softmax(row)[target].
inline double softmax_cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets) {
  check_targets(logits, targets);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double v : r) sum += std::exp(v - mx);
    total += std::log(sum) + mx - r[targets[i]];
  }
  return total / static_cast<double>(logits.rows());
}

inline Tensor softmax_cross_entropy_rows_backward(const Tensor& logits,
                                                  std::span<const std::size_t> targets,
                                                  double grad_loss = 1.0) {
  check_targets(logits, targets);
  Tensor grad = softmax_rows(logits);
  const double scale = grad_loss / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    grad(i, targets[i]) -= 1.0;
    for (double& v : grad.row(i)) v *= scale;
  }
  return grad;
}

struct TokenMax {
  Tensor value;                      // [d]
  std::vector<std::size_t> argmax;   // winning token per coordinate
};

/// Per-coordinate max over the token axis of a [T x d] sequence.
/// Ties resolve to the lowest token index.
inline TokenMax elementwise_max_over_tokens(const Tensor& seq) {
  if (seq.rank() != 2) {
    throw DimensionError("elementwise_max_over_tokens: expected [T x d], got " +
                         shape_string(seq.shape()));
  }
  const std::size_t d = seq.cols();
  TokenMax out{Tensor({d}), std::vector<std::size_t>(d, 0)};
  for (std::size_t j = 0; j < d; ++j) {
    double best = seq(0, j);
    std::size_t arg = 0;
    for (std::size_t t = 1; t < seq.rows(); ++t) {
      if (seq(t, j) > best) {
        best = seq(t, j);
        arg = t;
      }
    }
    out.value[j] = best;
    out.argmax[j] = arg;
  }
  return out;
}

inline Tensor elementwise_max_over_tokens_backward(const TokenMax& pooled, std::size_t tokens,
                                                   std::span<const double> grad_out) {
  const std::size_t d = pooled.argmax.size();
  Tensor grad({tokens, d});
  for (std::size_t j = 0; j < d; ++j) grad(pooled.argmax[j], j) = grad_out[j];
  return grad;
}

struct LayerNormCache {
  Tensor normalized;             // (x - mean) / std per row
  std::vector<double> inv_std;   // per row
};

/// Row-wise layer normalization with per-column gain and bias.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                              LayerNormCache* cache = nullptr) {
  require_matrix(x, "layer_norm_rows");
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm_rows: gain/bias width " + std::to_string(gain.size()) +
                         " vs input " + shape_string(x.shape()));
  }
  Tensor normalized(x.shape());
  std::vector<double> inv_std(x.rows());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normalized(i, j) = (r[j] - mean) * inv_std[i];
      out(i, j) = normalized(i, j) * gain[j] + bias[j];
    }
  }
  if (cache) *cache = LayerNormCache{std::move(normalized), std::move(inv_std)};
  return out;
}

struct LayerNormGrads {
  Tensor input;
  Tensor gain;
  Tensor bias;
};

inline LayerNormGrads layer_norm_rows_backward(const LayerNormCache& cache, const Tensor& gain,
                                               const Tensor& grad_out) {
  const Tensor& xhat = cache.normalized;
  const std::size_t n = xhat.rows(), d = xhat.cols();
  LayerNormGrads g{Tensor(xhat.shape()), Tensor({d}), Tensor({d})};
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      g.gain[j] += grad_out(i, j) * xhat(i, j);
      g.bias[j] += grad_out(i, j);
      dxhat[j] = grad_out(i, j) * gain[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat(i, j);
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g.input(i, j) = cache.inv_std[i] *
                      (dxhat[j] - inv_d * sum_dxhat - xhat(i, j) * inv_d * sum_dxhat_xhat);
    }
  }
  return g;
}

}  // namespace ops
}  // namespace spaner

#endif  // SPANER_TENSOR_HPP
