#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/pipeline/config.hpp"

namespace saerec::pipeline {

/// Stage names in execution order.
const std::vector<std::string>& stage_names();

struct StageRecord {
  std::string name;
  /// Hash of the stage parameters and of every upstream artifact checksum.
  std::string key;
  /// Relative artifact path -> SHA-256.
  std::map<std::string, std::string> artifacts;
};

/// Deterministic: no timings, no absolute paths, no job counts.
struct RunManifest {
  nlohmann::json config;
  std::vector<StageRecord> stages;

  const StageRecord* find(const std::string& name) const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

struct StageLog {
  std::string name;
  bool cached = false;
  double seconds = 0.0;
  /// Compute time when the artifacts were produced, carried over on cache hits.
  double build_seconds = 0.0;
};

struct RunResult {
  RunManifest manifest;
  std::vector<StageLog> log;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("[" + stage + "] " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Runs every stage up to and including `until` in dependency order. A stage
/// whose key and artifacts match the previous manifest in the output
/// directory is skipped. Writes manifest.json after each stage and
/// run_log.json (timings, cache hits) at the end.
RunResult run(const ExperimentConfig& config, const std::string& until = "bundle", bool verbose = false);

RunManifest read_manifest(const std::filesystem::path& output_dir);

/// One SAE training run of the L1 / dict-size grid.
struct GridPoint {
  double l1_weight = 0.0;
  std::size_t dict_size = 0;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  double rmse = 0.0;
  double explained_variance = 0.0;
  double l0 = 0.0;
  std::optional<double> mean_correlation;
  double ndcg = 0.0;
  double hitrate = 0.0;
  double coverage = 0.0;
};

nlohmann::json to_json(const GridPoint& p);
GridPoint grid_point_from_json(const nlohmann::json& j);

struct SweepRow {
  double value = 0.0;  // L1 weight or dict size
  double mean = 0.0;
  double std = 0.0;   // population std over repeats
  std::size_t n = 0;  // repeats with a defined mean correlation
  std::size_t expected = 0;
};

struct SweepReport {
  std::vector<SweepRow> by_l1;    // at the main dict size
  std::vector<SweepRow> by_dict;  // at the main L1 weight
  /// Grid values with fewer usable repeats than expected.
  std::vector<std::string> missing;
};

/// Mean and std of the mean top-feature correlation per grid value.
SweepReport sweep_report(const std::vector<GridPoint>& points, const SaeSweepSpec& spec, double main_l1,
                         std::size_t main_dict);
std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& value_name);

}  // namespace saerec::pipeline
