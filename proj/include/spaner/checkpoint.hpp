#ifndef SPANER_CHECKPOINT_HPP
#define SPANER_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "spaner/binary_io.hpp"
#include "spaner/errors.hpp"
#include "spaner/model.hpp"

namespace spaner {

// SPNR layout (little-endian):
//   "SPNR" | u32 version | u32 len + UTF-8 JSON config echo | u32 count |
//   count x { u32 len + name | u32 rank | rank x u32 dim | u8 frozen | f64 values }
inline constexpr std::string_view kCheckpointMagic = "SPNR";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredParameter {
  std::string name;
  Shape shape;
  bool frozen = false;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json config;  // {"model": {...}, "run": {...}}
  std::vector<StoredParameter> parameters;

  const StoredParameter* find(const std::string& name) const {
    for (const auto& p : parameters)
      if (p.name == name) return &p;
    return nullptr;
  }
};

inline nlohmann::json describe_model(const SpanerModel& model) {
  nlohmann::json modalities = nlohmann::json::array();
  for (const auto& b : model.branches) modalities.push_back({{"tag", b.tag}, {"input_dim", b.input_dim}});
  return {{"width", model.shape.width},
          {"prompt_tokens", model.shape.prompt_tokens},
          {"heads", model.shape.heads},
          {"proj_dim", model.shape.proj_dim},
          {"norm_eps", model.shape.norm_eps},
          {"lambda", model.objective.lambda},
          {"temperature", model.objective.loss.temperature},
          {"symmetric", model.objective.loss.symmetric},
          {"modalities", modalities}};
}

inline Checkpoint make_checkpoint(SpanerModel& model, const nlohmann::json& run_config = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = {{"model", describe_model(model)}, {"run", run_config}};
  for (const auto& [name, p] : model.parameters()) {
    ck.parameters.push_back({name, p->value.shape(), p->frozen, p->value.values()});
  }
  return ck;
}

/// Rebuilds a model from a checkpoint. Every parameter the description
/// implies must be present with the right shape, and nothing else.
inline SpanerModel restore_model(const Checkpoint& ck) {
  SpanerModel model;
  try {
    const auto& m = ck.config.at("model");
    model.shape = {m.at("width").get<std::size_t>(), m.at("prompt_tokens").get<std::size_t>(),
                   m.at("heads").get<std::size_t>(), m.at("proj_dim").get<std::size_t>(),
                   m.at("norm_eps").get<double>()};
    model.objective = {m.at("lambda").get<double>(),
                       {m.at("temperature").get<double>(), m.at("symmetric").get<bool>()}};
    if (model.shape.width == 0 || model.shape.prompt_tokens == 0 || model.shape.proj_dim == 0 ||
        model.shape.heads == 0 || model.shape.width % model.shape.heads != 0) {
      throw DataError("checkpoint model description has invalid dimensions");
    }
    model.prompt.tokens = Parameter(Tensor({model.shape.prompt_tokens, model.shape.width}));
    Rng placeholder(0);
    for (const auto& b : m.at("modalities")) {
      add_modality(model, b.at("tag").get<std::string>(), b.at("input_dim").get<std::size_t>(), placeholder);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config is malformed: ") + e.what());
  }
  auto params = model.parameters();
  if (params.size() != ck.parameters.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.parameters.size()) +
                    " parameters, model description implies " + std::to_string(params.size()));
  }
  for (auto& [name, p] : params) {
    const StoredParameter* s = ck.find(name);
    if (!s) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (s->shape != p->value.shape()) {
      throw DataError("parameter '" + name + "' has shape " + shape_string(s->shape) + ", expected " +
                      shape_string(p->value.shape()));
    }
    p->value = Tensor(s->shape, s->values);
    p->grad = Tensor(s->shape);
    p->frozen = s->frozen;
  }
  return model;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(ck.config.dump());
  w.u32(io::ByteWriter::checked_u32(ck.parameters.size(), "parameter count"));
  for (const auto& p : ck.parameters) {
    w.str(p.name);
    w.u32(io::ByteWriter::checked_u32(p.shape.size(), "rank"));
    for (std::size_t d : p.shape) w.u32(io::ByteWriter::checked_u32(d, "dimension"));
    w.u8(p.frozen ? 1 : 0);
    for (double v : p.values) w.f64(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kCheckpointMagic) throw FormatError("bad magic, expected SPNR", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError("unsupported SPNR version " + std::to_string(v), version_at);
  }
  Checkpoint ck;
  const std::size_t config_at = r.offset();
  const std::string config = r.str("config");
  try {
    ck.config = nlohmann::json::parse(config);
  } catch (const nlohmann::json::exception&) {
    throw FormatError("config block is not valid JSON", config_at);
  }
  const std::uint32_t count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredParameter p;
    p.name = r.str("parameter name");
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 3) throw FormatError("parameter rank " + std::to_string(rank) + " unsupported", rank_at);
    std::uint64_t elements = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::size_t dim_at = r.offset();
      const std::uint32_t dim = r.u32("dimension");
      if (dim == 0) throw FormatError("zero dimension", dim_at);
      p.shape.push_back(dim);
      elements *= dim;
    }
    const std::size_t flag_at = r.offset();
    const std::uint8_t frozen = r.u8("frozen flag");
    if (frozen > 1) throw FormatError("frozen flag must be 0 or 1", flag_at);
    p.frozen = frozen == 1;
    if (elements * 8 > r.remaining()) {
      throw FormatError("truncated file: parameter '" + p.name + "' needs " +
                            std::to_string(elements * 8) + " bytes",
                        r.offset());
    }
    p.values.resize(elements);
    for (double& v : p.values) v = r.f64("values");
    ck.parameters.push_back(std::move(p));
  }
  r.expect_end();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace spaner

#endif  // SPANER_CHECKPOINT_HPP
