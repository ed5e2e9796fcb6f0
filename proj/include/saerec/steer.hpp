#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "saerec/dataset.hpp"
#include "saerec/evalmetrics.hpp"
#include "saerec/harvest.hpp"
#include "saerec/recmodel.hpp"
#include "saerec/sae.hpp"

namespace saerec::steer {

using numerics::Tensor;

enum class Positions { last, all };

struct FeatureSetting {
  std::size_t feature = 0;
  double value = 0.0;
};

/// Features whose post-ReLU activation is overwritten with a value.
struct Intervention {
  std::vector<FeatureSetting> features;
  Positions positions = Positions::last;
  std::size_t tap_layer = 1;
};

/// Normalize, encode, overwrite the selected features at the selected
/// positions, decode, denormalize. Other positions get the plain
/// reconstruction; with no features this is reconstruction substitution.
rec::ActivationEdit<float> steered_edit(const sae::SaeModel<float>& sae, const harvest::NormStats& stats,
                                        const Intervention& intervention);

/// Adds alpha * direction (normalized space) to the selected positions,
/// leaving the rest of the activations untouched.
rec::ActivationEdit<float> direction_edit(std::vector<float> direction, double alpha, const harvest::NormStats& stats,
                                          Positions positions = Positions::last);

/// direction scaled so that <x, d> has unit variance over the records.
std::vector<float> unit_variance_direction(std::span<const float> direction, const harvest::ActivationSet& normalized_records);

/// Decoder column of a feature.
std::vector<float> decoder_direction(const sae::SaeModel<float>& sae, std::size_t feature);

/// Next-item evaluation case: history = all but the last item (the most
/// recent max_len of them), target = last item.
struct EvalCase {
  std::int64_t user = 0;
  std::vector<std::int64_t> history;
  std::int64_t target = 0;
};

/// Sequences with fewer than two items are skipped.
std::vector<EvalCase> make_eval_cases(const std::vector<data::UserSequence>& sequences, std::size_t max_len);
eval::GroundTruth ground_truth(std::span<const EvalCase> cases);

/// Top-k lists (seen items excluded) under an optional edit.
std::vector<eval::RecList> recommend_all(const rec::RecModel<float>& model, std::span<const EvalCase> cases,
                                         std::size_t k, const rec::ActivationEdit<float>& edit = {},
                                         std::size_t tap_layer = 1, std::size_t threads = 1);

struct SubstitutionResult {
  eval::EvalResult original;
  eval::EvalResult substituted;
};

/// Metrics of the original model and of the model with the tap layer
/// replaced by its SAE reconstruction.
SubstitutionResult reconstruction_substitution_eval(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae,
                                                    const harvest::NormStats& stats, std::span<const EvalCase> cases,
                                                    std::size_t k, std::size_t tap_layer = 1, std::size_t threads = 1);

/// Pooled share of list slots whose item carries each attribute (an item
/// with several attributes counts toward each).
std::vector<double> attribute_proportions(std::span<const eval::RecList> lists, const data::ItemCatalog& catalog);

struct SweepSpec {
  std::vector<double> grid;  // empty means -10..10 step 1
  std::size_t k = 10;
  std::size_t tap_layer = 1;
  std::size_t threads = 1;

  std::vector<double> values() const;
};

struct SweepPoint {
  double v = 0.0;
  std::vector<double> proportions;  // per attribute
  eval::EvalResult metrics;
};

struct SweepResult {
  std::string method;  // "sae_set" or "direction_add"; callers may relabel
  std::size_t feature = 0;
  int attribute = -1;
  SweepPoint baseline;  // unedited model
  std::vector<SweepPoint> points;
};

/// Set-to-v steering of one feature at the last position over the grid.
SweepResult sweep(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae, const harvest::NormStats& stats,
                  std::size_t feature, std::span<const EvalCase> cases, const data::ItemCatalog& catalog,
                  const SweepSpec& spec);

/// Additive steering along a normalized-space direction over the grid.
SweepResult direction_sweep(const rec::RecModel<float>& model, std::span<const float> direction,
                            const harvest::NormStats& stats, std::span<const EvalCase> cases,
                            const data::ItemCatalog& catalog, const SweepSpec& spec);

/// v,attribute,proportion rows (baseline rows use v = "baseline").
std::string proportions_csv(const SweepResult& r, const std::vector<std::string>& attribute_names);
/// v,ndcg,hitrate,coverage,diversity rows.
std::string quality_csv(const SweepResult& r);

/// Spearman rank correlation with midranks; 0 when either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace saerec::steer
