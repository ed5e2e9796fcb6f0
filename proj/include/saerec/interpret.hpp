#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/dataset.hpp"
#include "saerec/harvest.hpp"
#include "saerec/numerics/tensor.hpp"

namespace saerec::interpret {

using numerics::Tensor;
using Labels = std::vector<std::uint8_t>;

/// Pearson correlation between activations and 0/1 labels. Null when one
/// class is missing or the activations are constant.
template <typename T>
std::optional<double> point_biserial(std::span<const T> activations, std::span<const std::uint8_t> labels);

/// P(score+ > score-) + P(tie)/2 via midranks. Null when one class is missing.
template <typename T>
std::optional<double> roc_auc(std::span<const T> scores, std::span<const std::uint8_t> labels);

/// Fraction of positives with activation > 0. Null without positives.
template <typename T>
std::optional<double> sensitivity(std::span<const T> activations, std::span<const std::uint8_t> labels);

enum class Metric { correlation, roc_auc, sensitivity };
std::string metric_name(Metric m);

/// Metric value per (feature, attribute); null cells are degenerate.
struct FeatureAttributeMatrix {
  Metric metric = Metric::correlation;
  std::size_t n_features = 0;
  std::size_t n_attributes = 0;
  std::vector<std::optional<double>> values;  // feature-major

  std::optional<double> at(std::size_t feature, std::size_t attribute) const {
    return values[feature * n_attributes + attribute];
  }
};

struct MetricMatrices {
  FeatureAttributeMatrix correlation;
  FeatureAttributeMatrix roc_auc;
  FeatureAttributeMatrix sensitivity;
  /// Fraction of records whose item carries each attribute.
  std::vector<double> popularity;
  std::size_t n_records = 0;
};

/// Attribute ids of each record's input item.
std::vector<std::vector<int>> record_attributes(const harvest::ActivationSet& records, const data::ItemCatalog& catalog);

/// 0/1 label per record for one attribute.
Labels attribute_labels(const std::vector<std::vector<int>>& record_attrs, int attribute);

/// All three metrics for every column of `features` [records x features].
MetricMatrices build_matrices(const Tensor<float>& features, const std::vector<std::vector<int>>& record_attrs,
                              std::size_t n_attributes);

/// One metric only.
FeatureAttributeMatrix build_matrix(const Tensor<float>& features, const std::vector<std::vector<int>>& record_attrs,
                                    std::size_t n_attributes, Metric metric);

/// Normalized activations as features: one "feature" per hidden neuron.
MetricMatrices raw_neuron_matrices(const harvest::ActivationSet& normalized_records,
                                   const std::vector<std::vector<int>>& record_attrs, std::size_t n_attributes);

struct AttributeTop {
  int attribute = 0;
  std::string name;
  double popularity = 0.0;
  std::optional<std::size_t> feature;  // null when the correlation column is all null
  std::optional<double> correlation;
  std::optional<double> roc_auc;
  std::optional<double> sensitivity;
};

struct FeatureReport {
  std::vector<AttributeTop> attributes;  // in attribute id order
  std::optional<double> mean_correlation;
  std::optional<double> mean_roc_auc;
  std::optional<double> mean_sensitivity;
  /// Attributes left out of the means.
  std::vector<int> excluded;
};

/// Argmax correlation per attribute, ties to the lowest feature id.
FeatureReport top_features(const MetricMatrices& m, const std::vector<std::string>& attribute_names);

/// CSV sorted by correlation: attribute,popularity,top_feature_id,correlation,roc_auc,sensitivity
std::string report_csv(const FeatureReport& report);
nlohmann::json report_json(const FeatureReport& report);
/// feature x attribute grid with a header row of attribute names; empty cells are null.
std::string matrix_csv(const FeatureAttributeMatrix& m, const std::vector<std::string>& attribute_names,
                       std::span<const std::size_t> features = {});

struct Histogram {
  double low = 0.0;
  double bin_width = 0.0;
  std::vector<std::size_t> negative;  // records without the attribute
  std::vector<std::size_t> positive;  // records with the attribute
};

/// Positive activations only, 30 fixed-width bins over the observed positive
/// range (one bin when that range is a single value). Empty if never active.
Histogram activation_histogram(std::span<const float> activations, std::span<const std::uint8_t> labels,
                               std::size_t bins = 30);
nlohmann::json histogram_json(const Histogram& h);

/// Share of activation mass carried by labeled records among the k largest
/// positive activations (all positives if fewer). Ties to the lower record index.
std::optional<double> top_k_activation_share(std::span<const float> activations, std::span<const std::uint8_t> labels,
                                             std::size_t k = 100);

/// Column j of a row-major matrix.
std::vector<float> column(const Tensor<float>& m, std::size_t j);

/// Mean over attributes of the largest non-null value per attribute column.
std::optional<double> mean_top(const FeatureAttributeMatrix& m);
/// Largest non-null value of each attribute column.
std::vector<std::optional<double>> column_max(const FeatureAttributeMatrix& m);

}  // namespace saerec::interpret
