#ifndef SPANER_DATA_HPP
#define SPANER_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "spaner/binary_io.hpp"
#include "spaner/errors.hpp"
#include "spaner/model.hpp"
#include "spaner/rng.hpp"
#include "spaner/tensor.hpp"

namespace spaner {

struct ModalitySpec {
  std::string tag;
  std::size_t dim = 32;
  double noise = 0.05;  // sigma_m
};

/// Generative stand-in for frozen encoders: class centers in a latent space,
/// pushed through one fixed random tanh map per modality.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t latent_dim = 16;
  std::size_t instances_per_class = 20;
  std::vector<ModalitySpec> modalities{{"vision", 32, 0.05}, {"text", 32, 0.05}};
  // Per-instance latent offset, shared by every modality of the instance.
  // Zero keeps all same-class instances identical up to modality noise.
  double latent_jitter = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("data.classes must be >= 2");
    if (latent_dim < 2) throw ConfigError("data.latent_dim must be >= 2");
    if (instances_per_class < 1) throw ConfigError("data.instances_per_class must be >= 1");
    if (modalities.empty()) throw ConfigError("data.modalities must not be empty");
    if (!(latent_jitter >= 0.0)) throw ConfigError("data.latent_jitter must be >= 0");
    std::set<std::string> seen;
    for (const auto& m : modalities) {
      if (m.tag.empty()) throw ConfigError("data.modalities.tag must be non-empty");
      if (!seen.insert(m.tag).second) throw ConfigError("data.modalities: duplicate tag '" + m.tag + "'");
      if (m.dim < 2) throw ConfigError("data.modalities.dim must be >= 2 (modality '" + m.tag + "')");
      if (!(m.noise >= 0.0)) throw ConfigError("data.modalities.noise must be >= 0 (modality '" + m.tag + "')");
    }
  }

  const ModalitySpec& modality(const std::string& tag) const {
    for (const auto& m : modalities)
      if (m.tag == tag) return m;
    throw ConfigError("unknown modality '" + tag + "'");
  }
};

struct LabeledEmbeddings {
  std::string modality;
  Tensor vectors;  // [N x d]
  std::vector<std::uint32_t> class_ids;
  std::vector<std::uint32_t> instance_ids;
  std::vector<std::string> class_names;

  std::size_t size() const { return vectors.empty() ? 0 : vectors.rows(); }
  std::size_t dim() const { return vectors.empty() ? 0 : vectors.cols(); }
  std::size_t class_count() const { return class_names.size(); }

  friend bool operator==(const LabeledEmbeddings& a, const LabeledEmbeddings& b) {
    return a.modality == b.modality && bitwise_equal(a.vectors, b.vectors) &&
           a.class_ids == b.class_ids && a.instance_ids == b.instance_ids &&
           a.class_names == b.class_names;
  }
};

/// Modality tag -> rows describing the same instances in the same order.
using PairedEmbeddings = std::map<std::string, LabeledEmbeddings>;

struct KShotSplit {
  LabeledEmbeddings support;
  LabeledEmbeddings query;
};

namespace detail {

inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

enum : std::uint64_t {
  kCenterStream = 1,
  kJitterStream = 2,
  kMapStream = 0x4d4150,    // "MAP"
  kNoiseStream = 0x4e4f49,  // "NOI"
};

inline Tensor class_centers(const SyntheticSpec& spec) {
  Rng rng = Rng(spec.seed).split(kCenterStream);
  Tensor centers({spec.classes, spec.latent_dim});
  for (double& v : centers.data()) v = rng.normal();
  return centers;
}

inline Tensor modality_map(const SyntheticSpec& spec, const ModalitySpec& m) {
  Rng rng = Rng(spec.seed).split(kMapStream ^ tag_hash(m.tag));
  return glorot_uniform(spec.latent_dim, m.dim, rng);
}

inline Tensor tanh_map(const Tensor& latent, const Tensor& map) {
  Tensor out = ops::matmul(latent, map);
  for (double& v : out.data()) v = std::tanh(v);
  return out;
}

inline void round_to_float32(Tensor& t) {
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

inline std::vector<std::string> default_class_names(std::size_t classes) {
  const std::size_t width = std::to_string(classes - 1).size();
  std::vector<std::string> names;
  for (std::size_t c = 0; c < classes; ++c) {
    std::string id = std::to_string(c);
    names.push_back("class_" + std::string(width > id.size() ? width - id.size() : 0, '0') + id);
  }
  return names;
}

}  // namespace detail

/// Generates every modality listed in `spec`. Instance i belongs to class
/// i / instances_per_class; rows are ordered by instance id in every
/// modality. Values are rounded to float32 so they survive the SPNE format.
inline PairedEmbeddings gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.classes * spec.instances_per_class;
  const Tensor centers = detail::class_centers(spec);

  Tensor latent({n, spec.latent_dim});
  Rng jitter = Rng(spec.seed).split(detail::kJitterStream);
  std::vector<std::uint32_t> class_ids(n), instance_ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / spec.instances_per_class;
    class_ids[i] = static_cast<std::uint32_t>(c);
    instance_ids[i] = static_cast<std::uint32_t>(i);
    for (std::size_t j = 0; j < spec.latent_dim; ++j)
      latent(i, j) = centers(c, j) + spec.latent_jitter * jitter.normal();
  }

  PairedEmbeddings out;
  const auto names = detail::default_class_names(spec.classes);
  for (const auto& m : spec.modalities) {
    Tensor x = detail::tanh_map(latent, detail::modality_map(spec, m));
    Rng noise = Rng(spec.seed).split(detail::kNoiseStream ^ detail::tag_hash(m.tag));
    for (double& v : x.data()) v += m.noise * noise.normal();
    detail::round_to_float32(x);
    out[m.tag] = LabeledEmbeddings{m.tag, std::move(x), class_ids, instance_ids, names};
  }
  return out;
}

/// One noise-free row per class, produced by the map of `source_tag` (the
/// class-name analog of a text-encoder embedding). Instance id == class id.
inline LabeledEmbeddings semantic_modality(const SyntheticSpec& spec, const std::string& source_tag) {
  spec.validate();
  const ModalitySpec& m = spec.modality(source_tag);
  Tensor x = detail::tanh_map(detail::class_centers(spec), detail::modality_map(spec, m));
  detail::round_to_float32(x);
  std::vector<std::uint32_t> ids(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) ids[c] = static_cast<std::uint32_t>(c);
  return {m.tag, std::move(x), ids, ids, detail::default_class_names(spec.classes)};
}

inline LabeledEmbeddings subset(const LabeledEmbeddings& data, std::span<const std::size_t> rows) {
  LabeledEmbeddings out{data.modality, gather_rows(data.vectors, rows), {}, {}, data.class_names};
  for (std::size_t r : rows) {
    out.class_ids.push_back(data.class_ids[r]);
    out.instance_ids.push_back(data.instance_ids[r]);
  }
  return out;
}

/// Throws DataError unless every modality lists the same instances in the same order.
inline void check_paired(const PairedEmbeddings& data) {
  if (data.empty()) throw DataError("paired dataset has no modalities");
  const LabeledEmbeddings& ref = data.begin()->second;
  for (const auto& [tag, e] : data) {
    if (e.instance_ids != ref.instance_ids || e.class_ids != ref.class_ids) {
      throw DataError("modality '" + tag + "' is not paired with '" + ref.modality + "'");
    }
  }
}

/// Seeded k-per-class support sample; the rest becomes the query set.
inline KShotSplit kshot_split(const LabeledEmbeddings& data, std::size_t k, Rng& rng) {
  if (k == 0) throw ArgumentError("kshot_split: k must be >= 1");
  const std::size_t classes = data.class_count();
  std::vector<std::vector<std::size_t>> rows_by_class(classes);
  for (std::size_t r = 0; r < data.size(); ++r) rows_by_class.at(data.class_ids[r]).push_back(r);
  std::vector<bool> in_support(data.size(), false);
  for (std::size_t c = 0; c < classes; ++c) {
    auto& rows = rows_by_class[c];
    if (rows.size() <= k) {
      throw DataError("class '" + data.class_names[c] + "' has " + std::to_string(rows.size()) +
                      " instances, need more than k=" + std::to_string(k));
    }
    rng.shuffle(std::span<std::size_t>(rows));
    for (std::size_t i = 0; i < k; ++i) in_support[rows[i]] = true;
  }
  std::vector<std::size_t> support, query;
  for (std::size_t r = 0; r < data.size(); ++r) (in_support[r] ? support : query).push_back(r);
  return {subset(data, support), subset(data, query)};
}

/// Applies one split, drawn on the first modality, to every paired modality.
inline std::map<std::string, KShotSplit> kshot_split(const PairedEmbeddings& data, std::size_t k,
                                                     Rng& rng) {
  check_paired(data);
  const KShotSplit ref = kshot_split(data.begin()->second, k, rng);
  std::vector<std::size_t> support_rows, query_rows;
  const auto& ids = data.begin()->second.instance_ids;
  const std::set<std::uint32_t> support_ids(ref.support.instance_ids.begin(), ref.support.instance_ids.end());
  for (std::size_t r = 0; r < ids.size(); ++r) (support_ids.count(ids[r]) ? support_rows : query_rows).push_back(r);
  std::map<std::string, KShotSplit> out;
  for (const auto& [tag, e] : data) out[tag] = {subset(e, support_rows), subset(e, query_rows)};
  return out;
}

/// Rows of two paired modalities as a training dataset.
inline PairedDataset make_pairs(const LabeledEmbeddings& first, const LabeledEmbeddings& second) {
  if (first.instance_ids != second.instance_ids) {
    throw DataError("modalities '" + first.modality + "' and '" + second.modality + "' are not paired");
  }
  return {first.modality, first.vectors, second.modality, second.vectors};
}

// ---------------------------------------------------------------------------
// SPNE embedding file.

inline constexpr std::string_view kEmbeddingMagic = "SPNE";
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kModalityTagBytes = 8;

inline std::string encode_embeddings(const LabeledEmbeddings& data) {
  const std::size_t n = data.size();
  if (n == 0) throw DataError("cannot write an embedding file with N = 0");
  if (data.class_ids.size() != n || data.instance_ids.size() != n) {
    throw DataError("label count does not match N = " + std::to_string(n));
  }
  if (data.class_names.empty()) throw DataError("embedding file needs at least one class name");
  for (std::uint32_t c : data.class_ids) {
    if (c >= data.class_names.size()) throw DataError("class id " + std::to_string(c) + " has no class name");
  }
  if (data.modality.empty() || data.modality.size() > kModalityTagBytes ||
      data.modality.find('\0') != std::string::npos) {
    throw DataError("modality tag '" + data.modality + "' must be 1..8 bytes without NUL");
  }
  io::ByteWriter w;
  w.bytes(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u32(io::ByteWriter::checked_u32(n, "N"));
  w.u32(io::ByteWriter::checked_u32(data.dim(), "d"));
  w.u32(io::ByteWriter::checked_u32(data.class_names.size(), "C"));
  for (double v : data.vectors.data()) w.f32(static_cast<float>(v));
  for (std::uint32_t c : data.class_ids) w.u32(c);
  for (std::uint32_t i : data.instance_ids) w.u32(i);
  for (const auto& name : data.class_names) w.str(name);
  std::string tag = data.modality;
  tag.resize(kModalityTagBytes, '\0');
  w.bytes(tag);
  return w.take();
}

inline LabeledEmbeddings decode_embeddings(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kEmbeddingMagic) throw FormatError("bad magic, expected SPNE", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kEmbeddingVersion) {
    throw FormatError("unsupported SPNE version " + std::to_string(v), version_at);
  }
  const std::size_t header_at = r.offset();
  const std::uint32_t n = r.u32("N"), d = r.u32("d"), c = r.u32("C");
  if (n == 0 || d == 0 || c == 0) throw FormatError("N, d and C must be positive", header_at);
  if (static_cast<std::uint64_t>(n) * d * 4 > r.remaining()) {
    throw FormatError("truncated file: vector block needs " +
                          std::to_string(static_cast<std::uint64_t>(n) * d * 4) + " bytes",
                      r.offset());
  }
  LabeledEmbeddings out;
  out.vectors = Tensor({n, d});
  for (double& v : out.vectors.data()) v = static_cast<double>(r.f32("vectors"));
  out.class_ids.resize(n);
  for (auto& id : out.class_ids) {
    const std::size_t at = r.offset();
    id = r.u32("class ids");
    if (id >= c) {
      throw FormatError("class id " + std::to_string(id) + " outside [0, " + std::to_string(c) + ")", at);
    }
  }
  out.instance_ids.resize(n);
  for (auto& id : out.instance_ids) id = r.u32("instance ids");
  out.class_names.resize(c);
  for (auto& name : out.class_names) name = r.str("class name");
  const std::size_t tag_at = r.offset();
  std::string tag(r.bytes(kModalityTagBytes, "modality tag"));
  tag.erase(tag.find_last_not_of('\0') + 1);
  if (tag.empty() || tag.find('\0') != std::string::npos) {
    throw FormatError("malformed modality tag", tag_at);
  }
  out.modality = std::move(tag);
  r.expect_end();
  return out;
}

inline void write_embeddings(const LabeledEmbeddings& data, const std::filesystem::path& path) {
  io::write_file(path, encode_embeddings(data));
}

inline LabeledEmbeddings read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

}  // namespace spaner

#endif  // SPANER_DATA_HPP
