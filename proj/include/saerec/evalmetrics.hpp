#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace saerec::eval {

struct RecList {
  std::int64_t user = 0;
  std::vector<std::int64_t> items;  // best first
};

using GroundTruth = std::unordered_map<std::int64_t, std::int64_t>;

/// Mean over lists of 1/log2(rank + 1) for the ground-truth item within the
/// first k entries, 0 otherwise. Throws if a list's user has no ground truth.
double ndcg_at_k(std::span<const RecList> lists, const GroundTruth& truth, std::size_t k);
double hitrate_at_k(std::span<const RecList> lists, const GroundTruth& truth, std::size_t k);

/// Share of the catalog appearing in the first k entries of any list.
double coverage_at_k(std::span<const RecList> lists, std::size_t n_items, std::size_t k);

struct Diversity {
  std::optional<double> value;  // null with fewer than one usable pair
  std::size_t skipped_pairs = 0;
};

/// Mean over unordered list pairs of 1 - cosine between binary item
/// indicator vectors. Pairs involving an empty list are skipped.
Diversity inter_list_diversity(std::span<const RecList> lists);

struct EvalResult {
  double ndcg = 0.0;
  double hitrate = 0.0;
  double coverage = 0.0;
  double diversity = 0.0;
  std::size_t k = 10;
  std::size_t n_users = 0;
};

/// All four metrics; `truth` may be empty when only coverage and diversity
/// are needed, in which case ndcg and hitrate are 0.
EvalResult evaluate(std::span<const RecList> lists, const GroundTruth& truth, std::size_t n_items, std::size_t k);

nlohmann::json to_json(const EvalResult& r);
std::string csv_header();
std::string csv_row(const EvalResult& r);

}  // namespace saerec::eval
