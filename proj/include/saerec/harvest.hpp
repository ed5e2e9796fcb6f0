#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "saerec/dataset.hpp"
#include "saerec/recmodel.hpp"

namespace saerec::harvest {

struct RecordMeta {
  std::int64_t user = 0;
  std::uint32_t position = 0;
  std::int64_t item = 0;  // input item at this position

  friend bool operator==(const RecordMeta&, const RecordMeta&) = default;
};

/// Per-position tap-layer activations, ordered by (user, position).
/// values holds count() rows of `hidden` floats.
struct ActivationSet {
  std::size_t hidden = 0;
  std::size_t tap_layer = 1;
  std::string model_checksum;
  std::vector<RecordMeta> meta;
  std::vector<float> values;

  std::size_t count() const { return meta.size(); }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * hidden, hidden}; }
  std::span<float> row(std::size_t i) { return {values.data() + i * hidden, hidden}; }
};

struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;
  /// Dimensions whose std was raised to the floor.
  std::vector<std::size_t> floored;

  static constexpr float kStdFloor = 1e-6f;
  friend bool operator==(const NormStats& a, const NormStats& b) { return a.mean == b.mean && a.std == b.std; }
};

/// Eval-mode activations of every position of every sequence (the last
/// max_len items of each). Parallel across sequences; output order does not
/// depend on `threads`.
ActivationSet harvest(const rec::RecModel<float>& model, const std::vector<data::UserSequence>& sequences,
                      std::size_t tap_layer, std::size_t threads = 1);

/// Per-dimension mean and std (population). Needs at least two records.
/// Zero-variance dimensions are floored and reported on stderr.
NormStats fit_norm(const ActivationSet& set);

void apply_norm(std::span<float> x, const NormStats& stats);
void invert_norm(std::span<float> x, const NormStats& stats);
std::vector<float> apply_norm(std::span<const float> x, const NormStats& stats);
std::vector<float> invert_norm(std::span<const float> x, const NormStats& stats);

/// Copy of `set` with every row normalized.
ActivationSet normalized(const ActivationSet& set, const NormStats& stats);

/// Binary dump: magic "ACTD" | u32 version | u32 hidden | u64 count |
/// u32 tap_layer | string model checksum | f32 mean[hidden] | f32 std[hidden] |
/// records (u64 user, u32 position, u64 item, f32 values[hidden]) |
/// 32-byte SHA-256 of the preceding bytes. Values are raw (unnormalized).
std::string save_dump(const std::filesystem::path& path, const ActivationSet& set, const NormStats& stats);

struct Dump {
  ActivationSet set;
  NormStats stats;
};
Dump load_dump(const std::filesystem::path& path);

}  // namespace saerec::harvest
