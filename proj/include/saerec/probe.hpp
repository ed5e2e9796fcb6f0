#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/harvest.hpp"
#include "saerec/numerics/tape.hpp"
#include "saerec/recmodel.hpp"
#include "saerec/sae.hpp"
#include "saerec/steer.hpp"

namespace saerec::probe {

using numerics::Tensor;
using numerics::Var;

struct ProbeConfig {
  double l2_weight = 1e-4;
  std::size_t epochs = 50;
  double lr = 1e-2;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

struct LinearProbe {
  int attribute = 0;
  std::vector<float> weight;
  float bias = 0.0f;
  /// weight rescaled so that <x, direction> has unit variance over the
  /// training records.
  std::vector<float> direction;
  double final_loss = 0.0;
  std::size_t n_records = 0;
};

/// Mean logistic loss of x*w + b plus l2_weight * |w|^2. w is [hidden x 1].
template <typename T>
Var record_probe_loss(numerics::Tape<T>& tape, Var weight, Var bias, Var x, std::span<const T> labels, T l2_weight);

/// Adam on mini-batches; deterministic under config.seed. Throws
/// std::invalid_argument when the labels hold a single class.
LinearProbe train_probe(const harvest::ActivationSet& normalized_records, std::span<const std::uint8_t> labels,
                        int attribute, const ProbeConfig& config);

/// One probe per attribute that has both classes, in attribute order.
std::vector<LinearProbe> train_probes(const harvest::ActivationSet& normalized_records,
                                      const std::vector<std::vector<int>>& record_attrs, std::size_t n_attributes,
                                      const ProbeConfig& config, std::size_t threads = 1);

/// Logits x*w + b for every record.
std::vector<float> probe_scores(const LinearProbe& probe, const harvest::ActivationSet& normalized_records);

/// Share of records whose predicted class (logit > 0) matches the label.
double accuracy(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Adds alpha * direction to the normalized last-position activation.
rec::ActivationEdit<float> probe_edit(const LinearProbe& probe, double alpha, const harvest::NormStats& stats);

struct Comparison {
  int attribute = 0;
  std::size_t sae_feature = 0;
  steer::SweepResult sae;    // "sae_add"
  steer::SweepResult probe;  // "probe_add"
};

/// Additive unit-variance steering along the SAE feature's decoder column and
/// along the probe direction over one shared grid.
Comparison compare_steering(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae,
                            const harvest::NormStats& stats, std::size_t sae_feature, const LinearProbe& probe,
                            const harvest::ActivationSet& normalized_records, std::span<const steer::EvalCase> cases,
                            const data::ItemCatalog& catalog, const steer::SweepSpec& spec);

/// method,v,attribute,proportion,ndcg,coverage,diversity for the target
/// attribute, baseline rows first.
std::string comparison_csv(const std::vector<Comparison>& comparisons, const std::vector<std::string>& attribute_names);

std::string save_probes(const std::vector<LinearProbe>& probes, const ProbeConfig& config,
                        const std::filesystem::path& path);
std::vector<LinearProbe> load_probes(const std::filesystem::path& path);

}  // namespace saerec::probe
