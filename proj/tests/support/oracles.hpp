#pragma once

// Brute-force reference implementations used by the metric tests.

#include <cmath>
#include <cstdint>
#include <vector>

namespace saerec::testing {

/// Textbook Pearson correlation of x against 0/1 labels.
inline double pearson(const std::vector<double>& x, const std::vector<std::uint8_t>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// O(N^2) Mann-Whitney: wins plus half ties over all positive/negative pairs.
inline double pairwise_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0;
  double pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i]) ++pos; else ++neg;
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      if (s[i] > s[j]) wins += 1;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / (pos * neg);
}

}  // namespace saerec::testing

namespace saerec::testing {

/// Textbook DCG over the full list with one relevant item, divided by the ideal DCG.
inline double ndcg_oracle(const std::vector<std::int64_t>& list, std::int64_t relevant, std::size_t k) {
  double dcg = 0.0;
  for (std::size_t i = 0; i < list.size() && i < k; ++i) {
    const double rel = list[i] == relevant ? 1.0 : 0.0;
    dcg += (std::pow(2.0, rel) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  const double idcg = 1.0 / std::log2(2.0);
  return dcg / idcg;
}

/// Cosine distance between dense binary indicator vectors, averaged over all pairs.
inline double diversity_oracle(const std::vector<std::vector<std::int64_t>>& lists, std::size_t n_items) {
  std::vector<std::vector<double>> dense(lists.size(), std::vector<double>(n_items, 0.0));
  for (std::size_t u = 0; u < lists.size(); ++u)
    for (auto item : lists[u]) dense[u][static_cast<std::size_t>(item)] = 1.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < lists.size(); ++i)
    for (std::size_t j = i + 1; j < lists.size(); ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t t = 0; t < n_items; ++t) {
        dot += dense[i][t] * dense[j][t];
        ni += dense[i][t] * dense[i][t];
        nj += dense[j][t] * dense[j][t];
      }
      total += 1.0 - dot / std::sqrt(ni * nj);
      ++pairs;
    }
  return total / static_cast<double>(pairs);
}

}  // namespace saerec::testing
