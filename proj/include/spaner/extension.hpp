#ifndef SPANER_EXTENSION_HPP
#define SPANER_EXTENSION_HPP

#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "spaner/checkpoint.hpp"
#include "spaner/errors.hpp"
#include "spaner/model.hpp"

namespace spaner {

struct ExtensionConfig {
  std::string modality;       // new tag
  std::size_t input_dim = 0;  // width of the new encoder output
  std::string anchor;         // already-trained modality to align against
  TrainConfig train;
};

struct ExtensionResult {
  SpanerModel model;
  TrainHistory history;
  std::vector<std::string> frozen;  // every parameter that existed before the call
};

/// Adds a modality to a trained model. Everything already in the model is
/// frozen; a new aligner, projection head and (iff input_dim differs from the
/// prompt width) a dim adapter are trained against `anchor`.
/// `data.first_tag` must be the new modality and `data.second_tag` the anchor.
inline ExtensionResult extend(SpanerModel model, const ExtensionConfig& cfg, const PairedDataset& data,
                              Rng& rng, const StepObserver& observer = {}) {
  if (!model.has(cfg.anchor)) throw ConfigError("extension anchor '" + cfg.anchor + "' is not registered");
  if (model.has(cfg.modality)) throw ConfigError("modality '" + cfg.modality + "' is already registered");
  if (data.first_tag != cfg.modality || data.second_tag != cfg.anchor) {
    throw ConfigError("extension data must pair '" + cfg.modality + "' (first) with '" + cfg.anchor +
                      "' (second)");
  }
  cfg.train.validate();

  ExtensionResult out;
  for (auto& [name, p] : model.parameters()) {
    p->frozen = true;
    out.frozen.push_back(name);
  }
  add_modality(model, cfg.modality, cfg.input_dim, rng);
  out.history = fit(model, data, cfg.train, observer);
  out.model = std::move(model);
  return out;
}

struct FrozenReport {
  std::vector<std::string> changed;  // frozen parameters whose bytes differ

  bool ok() const { return changed.empty(); }
};

/// Byte-compares the named parameters of two checkpoints of one lineage.
inline FrozenReport assert_frozen_unchanged(const Checkpoint& before, const Checkpoint& after,
                                            const std::vector<std::string>& frozen_names) {
  // `after` may only append parameters.
  for (const auto& p : before.parameters) {
    if (!after.find(p.name)) throw LineageError("parameter '" + p.name + "' disappeared");
  }
  FrozenReport report;
  for (const auto& name : frozen_names) {
    const StoredParameter* a = before.find(name);
    const StoredParameter* b = after.find(name);
    if (!a || !b) throw LineageError("frozen parameter '" + name + "' missing from a checkpoint");
    const bool same = a->shape == b->shape && a->values.size() == b->values.size() &&
                      std::memcmp(a->values.data(), b->values.data(), a->values.size() * sizeof(double)) == 0;
    if (!same) report.changed.push_back(name);
  }
  return report;
}

}  // namespace spaner

#endif  // SPANER_EXTENSION_HPP
