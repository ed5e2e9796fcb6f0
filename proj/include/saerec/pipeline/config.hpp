#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/dataset.hpp"
#include "saerec/probe.hpp"
#include "saerec/recmodel.hpp"
#include "saerec/sae.hpp"
#include "saerec/steer.hpp"

namespace saerec::data {
void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);
void to_json(nlohmann::json& j, const SplitSpec& s);
void from_json(const nlohmann::json& j, SplitSpec& s);
}  // namespace saerec::data

namespace saerec::rec {
void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);
}  // namespace saerec::rec

namespace saerec::pipeline {

struct DataSource {
  std::string kind = "synthetic";  // or "csv"
  data::SyntheticSpec synthetic;
  std::filesystem::path interactions_csv;
  std::filesystem::path items_csv;
};

/// Table of reconstruction metrics over L1 weights at the main dict size.
struct SaeTableSpec {
  std::vector<double> l1_weights{0.001, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0};
};

/// Mean correlation against the L1 weight (at the main dict size) and
/// against the dict size (at the main L1 weight), over SAE seeds.
struct SaeSweepSpec {
  std::vector<double> l1_weights{0.001, 0.1, 1.0};
  std::vector<std::size_t> dict_sizes{512, 2048};
  std::size_t repeats = 5;
};

struct SteerSpec {
  std::vector<double> grid;  // empty: -10..10 step 1
  std::size_t k = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "run";
  std::size_t jobs = 1;
  DataSource data;
  data::SplitSpec split;
  rec::RecModelConfig model;
  rec::TrainOptions train;
  std::size_t tap_layer = 1;
  sae::SaeConfig sae;
  SaeTableSpec sae_table;
  SaeSweepSpec sae_sweep;
  SteerSpec steer;
  probe::ProbeConfig probe;
  std::size_t demo_users = 20;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Stage seeds not given explicitly are derived from the global seed.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

/// Applies "a.b.c=value" overrides to a config document. The value is parsed
/// as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

std::uint64_t derive_seed(std::uint64_t global, const std::string& stage);

}  // namespace saerec::pipeline
