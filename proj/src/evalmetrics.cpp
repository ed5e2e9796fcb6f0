#include "saerec/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace saerec::eval {

namespace {

std::int64_t truth_for(const GroundTruth& truth, std::int64_t user) {
  auto it = truth.find(user);
  if (it == truth.end()) throw std::invalid_argument(fmt::format("no ground truth for user {}", user));
  return it->second;
}

/// 1-based rank of the item within the first k entries, or 0.
std::size_t rank_of(const RecList& list, std::int64_t item, std::size_t k) {
  const std::size_t n = std::min(k, list.items.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (list.items[i] == item) return i + 1;
  }
  return 0;
}

}  // namespace

double ndcg_at_k(std::span<const RecList> lists, const GroundTruth& truth, std::size_t k) {
  if (lists.empty()) return 0.0;
  double total = 0.0;
  for (const RecList& l : lists) {
    const std::size_t r = rank_of(l, truth_for(truth, l.user), k);
    if (r > 0) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  }
  return total / static_cast<double>(lists.size());
}

double hitrate_at_k(std::span<const RecList> lists, const GroundTruth& truth, std::size_t k) {
  if (lists.empty()) return 0.0;
  std::size_t hits = 0;
  for (const RecList& l : lists) hits += rank_of(l, truth_for(truth, l.user), k) > 0;
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double coverage_at_k(std::span<const RecList> lists, std::size_t n_items, std::size_t k) {
  if (n_items == 0) throw std::invalid_argument("coverage_at_k: empty catalog");
  std::vector<bool> seen(n_items, false);
  std::size_t unique = 0;
  for (const RecList& l : lists) {
    const std::size_t n = std::min(k, l.items.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto item = l.items[i];
      if (item < 0 || static_cast<std::size_t>(item) >= n_items) {
        throw std::out_of_range(fmt::format("coverage_at_k: item {} outside the catalog", item));
      }
      if (!seen[static_cast<std::size_t>(item)]) {
        seen[static_cast<std::size_t>(item)] = true;
        ++unique;
      }
    }
  }
  return static_cast<double>(unique) / static_cast<double>(n_items);
}

Diversity inter_list_diversity(std::span<const RecList> lists) {
  std::vector<std::vector<std::int64_t>> sorted;
  sorted.reserve(lists.size());
  for (const RecList& l : lists) {
    auto s = l.items;
    std::sort(s.begin(), s.end());
    if (std::adjacent_find(s.begin(), s.end()) != s.end()) {
      throw std::invalid_argument(fmt::format("recommendation list of user {} has duplicates", l.user));
    }
    sorted.push_back(std::move(s));
  }
  Diversity d;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      const auto& a = sorted[i];
      const auto& b = sorted[j];
      if (a.empty() || b.empty()) {
        ++d.skipped_pairs;
        continue;
      }
      std::size_t common = 0;
      for (std::size_t x = 0, y = 0; x < a.size() && y < b.size();) {
        if (a[x] == b[y]) {
          ++common, ++x, ++y;
        } else if (a[x] < b[y]) {
          ++x;
        } else {
          ++y;
        }
      }
      const double cosine = static_cast<double>(common) / std::sqrt(static_cast<double>(a.size() * b.size()));
      total += 1.0 - cosine;
      ++pairs;
    }
  }
  if (pairs > 0) d.value = total / static_cast<double>(pairs);
  return d;
}

EvalResult evaluate(std::span<const RecList> lists, const GroundTruth& truth, std::size_t n_items, std::size_t k) {
  EvalResult r;
  r.k = k;
  r.n_users = lists.size();
  if (!truth.empty()) {
    r.ndcg = ndcg_at_k(lists, truth, k);
    r.hitrate = hitrate_at_k(lists, truth, k);
  }
  r.coverage = coverage_at_k(lists, n_items, k);
  r.diversity = inter_list_diversity(lists).value.value_or(0.0);
  return r;
}

nlohmann::json to_json(const EvalResult& r) {
  return {{"ndcg", r.ndcg},         {"hitrate", r.hitrate}, {"coverage", r.coverage},
          {"diversity", r.diversity}, {"k", r.k},             {"n_users", r.n_users}};
}

std::string csv_header() { return "k,n_users,ndcg,hitrate,coverage,diversity\n"; }

std::string csv_row(const EvalResult& r) {
  return fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", r.k, r.n_users, r.ndcg, r.hitrate, r.coverage, r.diversity);
}

}  // namespace saerec::eval
