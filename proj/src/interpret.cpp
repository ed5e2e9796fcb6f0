#include "saerec/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace saerec::interpret {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw std::invalid_argument(fmt::format("{}: {} values but {} labels", op, a, b));
}

/// Midranks (1-based) of values. Exact zeros are handled as one block
/// without sorting, which is most of a ReLU feature column.
template <typename T>
std::vector<double> midranks(std::span<const T> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> neg, pos;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (values[i] < T{0}) {
      neg.push_back(i);
    } else if (values[i] > T{0}) {
      pos.push_back(i);
    } else {
      ++zeros;
    }
  }
  auto by_value = [&](std::size_t a, std::size_t b) { return values[a] < values[b]; };
  std::sort(neg.begin(), neg.end(), by_value);
  std::sort(pos.begin(), pos.end(), by_value);
  std::vector<double> rank(n);
  auto assign = [&](const std::vector<std::size_t>& order, std::size_t base) {
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
      const double mid = static_cast<double>(base + i + 1 + base + j + 1) / 2.0;
      for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
      i = j + 1;
    }
  };
  assign(neg, 0);
  if (zeros > 0) {
    const double mid = static_cast<double>(neg.size() + 1 + neg.size() + zeros) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (values[i] == T{0}) rank[i] = mid;
    }
  }
  assign(pos, neg.size() + zeros);
  return rank;
}

std::optional<double> auc_from_rank_sum(double rank_sum, std::size_t n1, std::size_t n) {
  const std::size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) return std::nullopt;
  const double u = rank_sum - static_cast<double>(n1) * static_cast<double>(n1 + 1) / 2.0;
  return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

std::optional<double> correlation_from_sums(double centered_positive_sum, double centered_sq_sum, std::size_t n1,
                                            std::size_t n) {
  if (n1 == 0 || n1 == n || !(centered_sq_sum > 0.0)) return std::nullopt;
  const double p = static_cast<double>(n1) / static_cast<double>(n);
  const double r = centered_positive_sum / std::sqrt(centered_sq_sum * static_cast<double>(n1) * (1.0 - p));
  return std::clamp(r, -1.0, 1.0);
}

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string(); }

nlohmann::json json_cell(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

template <typename T>
std::optional<double> point_biserial(std::span<const T> x, std::span<const std::uint8_t> labels) {
  require_same_length(x.size(), labels.size(), "point_biserial");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mean = 0.0;
  for (T v : x) mean += static_cast<double>(v);
  mean /= static_cast<double>(n);
  double sq = 0.0, pos = 0.0;
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    sq += d * d;
    if (labels[i]) {
      pos += d;
      ++n1;
    }
  }
  return correlation_from_sums(pos, sq, n1, n);
}

template <typename T>
std::optional<double> roc_auc(std::span<const T> scores, std::span<const std::uint8_t> labels) {
  require_same_length(scores.size(), labels.size(), "roc_auc");
  auto rank = midranks(scores);
  double sum = 0.0;
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) {
      sum += rank[i];
      ++n1;
    }
  }
  return auc_from_rank_sum(sum, n1, scores.size());
}

template <typename T>
std::optional<double> sensitivity(std::span<const T> x, std::span<const std::uint8_t> labels) {
  require_same_length(x.size(), labels.size(), "sensitivity");
  std::size_t positives = 0, active = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!labels[i]) continue;
    ++positives;
    active += x[i] > T{0};
  }
  if (positives == 0) return std::nullopt;
  return static_cast<double>(active) / static_cast<double>(positives);
}

template std::optional<double> point_biserial(std::span<const float>, std::span<const std::uint8_t>);
template std::optional<double> point_biserial(std::span<const double>, std::span<const std::uint8_t>);
template std::optional<double> roc_auc(std::span<const float>, std::span<const std::uint8_t>);
template std::optional<double> roc_auc(std::span<const double>, std::span<const std::uint8_t>);
template std::optional<double> sensitivity(std::span<const float>, std::span<const std::uint8_t>);
template std::optional<double> sensitivity(std::span<const double>, std::span<const std::uint8_t>);

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::correlation:
      return "correlation";
    case Metric::roc_auc:
      return "roc_auc";
    case Metric::sensitivity:
      return "sensitivity";
  }
  return "unknown";
}

std::vector<std::vector<int>> record_attributes(const harvest::ActivationSet& records, const data::ItemCatalog& catalog) {
  std::vector<std::vector<int>> out(records.count());
  for (std::size_t i = 0; i < records.count(); ++i) {
    const auto item = records.meta[i].item;
    if (item < 0 || static_cast<std::size_t>(item) >= catalog.n_items()) {
      throw std::out_of_range(fmt::format("record {} refers to item {} outside the catalog", i, item));
    }
    out[i] = catalog.attributes[static_cast<std::size_t>(item)];
  }
  return out;
}

Labels attribute_labels(const std::vector<std::vector<int>>& record_attrs, int attribute) {
  Labels labels(record_attrs.size(), 0);
  for (std::size_t i = 0; i < record_attrs.size(); ++i) {
    labels[i] = std::find(record_attrs[i].begin(), record_attrs[i].end(), attribute) != record_attrs[i].end();
  }
  return labels;
}

std::vector<float> column(const Tensor<float>& m, std::size_t j) {
  std::vector<float> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = m(i, j);
  return out;
}

MetricMatrices build_matrices(const Tensor<float>& features, const std::vector<std::vector<int>>& record_attrs,
                              std::size_t n_attributes) {
  const std::size_t n = features.rows();
  const std::size_t m = features.cols();
  if (record_attrs.size() != n) {
    throw std::invalid_argument(fmt::format("build_matrices: {} records but {} attribute lists", n, record_attrs.size()));
  }
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> n1(n_attributes, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!record_attrs[i].empty()) labeled.push_back(i);
    for (int a : record_attrs[i]) {
      if (a < 0 || static_cast<std::size_t>(a) >= n_attributes) throw std::out_of_range("build_matrices: bad attribute id");
      ++n1[static_cast<std::size_t>(a)];
    }
  }

  MetricMatrices out;
  out.n_records = n;
  for (auto* mat : {&out.correlation, &out.roc_auc, &out.sensitivity}) {
    mat->n_features = m;
    mat->n_attributes = n_attributes;
    mat->values.assign(m * n_attributes, std::nullopt);
  }
  out.correlation.metric = Metric::correlation;
  out.roc_auc.metric = Metric::roc_auc;
  out.sensitivity.metric = Metric::sensitivity;
  out.popularity.resize(n_attributes);
  for (std::size_t a = 0; a < n_attributes; ++a) out.popularity[a] = static_cast<double>(n1[a]) / static_cast<double>(n);

  // columns are copied out in blocks so the row-major matrix is read sequentially
  constexpr std::size_t kBlock = 64;
  std::vector<float> block;
  std::vector<double> centered(n_attributes), rank_sum(n_attributes);
  std::vector<std::size_t> active(n_attributes);
  for (std::size_t f0 = 0; f0 < m; f0 += kBlock) {
    const std::size_t width = std::min(kBlock, m - f0);
    block.assign(width * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
      const float* row = features.data() + i * m + f0;
      for (std::size_t k = 0; k < width; ++k) block[k * n + i] = row[k];
    }
    for (std::size_t k = 0; k < width; ++k) {
      const std::size_t f = f0 + k;
      std::span<const float> col(block.data() + k * n, n);
      double mean = 0.0;
      for (float v : col) mean += v;
      mean /= static_cast<double>(n);
      double sq = 0.0;
      for (float v : col) sq += (v - mean) * (v - mean);
      auto rank = midranks(col);
      std::fill(centered.begin(), centered.end(), 0.0);
      std::fill(rank_sum.begin(), rank_sum.end(), 0.0);
      std::fill(active.begin(), active.end(), 0);
      for (std::size_t i : labeled) {
        const double d = col[i] - mean;
        for (int a : record_attrs[i]) {
          centered[static_cast<std::size_t>(a)] += d;
          rank_sum[static_cast<std::size_t>(a)] += rank[i];
          active[static_cast<std::size_t>(a)] += col[i] > 0.0f;
        }
      }
      for (std::size_t a = 0; a < n_attributes; ++a) {
        const std::size_t idx = f * n_attributes + a;
        out.correlation.values[idx] = correlation_from_sums(centered[a], sq, n1[a], n);
        out.roc_auc.values[idx] = auc_from_rank_sum(rank_sum[a], n1[a], n);
        if (n1[a] > 0) out.sensitivity.values[idx] = static_cast<double>(active[a]) / static_cast<double>(n1[a]);
      }
    }
  }
  return out;
}

FeatureAttributeMatrix build_matrix(const Tensor<float>& features, const std::vector<std::vector<int>>& record_attrs,
                                    std::size_t n_attributes, Metric metric) {
  auto all = build_matrices(features, record_attrs, n_attributes);
  switch (metric) {
    case Metric::correlation:
      return all.correlation;
    case Metric::roc_auc:
      return all.roc_auc;
    case Metric::sensitivity:
      return all.sensitivity;
  }
  return all.correlation;
}

MetricMatrices raw_neuron_matrices(const harvest::ActivationSet& records, const std::vector<std::vector<int>>& record_attrs,
                                   std::size_t n_attributes) {
  Tensor<float> x({records.count(), records.hidden}, records.values);
  return build_matrices(x, record_attrs, n_attributes);
}

std::vector<std::optional<double>> column_max(const FeatureAttributeMatrix& m) {
  std::vector<std::optional<double>> out(m.n_attributes);
  for (std::size_t a = 0; a < m.n_attributes; ++a) {
    for (std::size_t f = 0; f < m.n_features; ++f) {
      auto v = m.at(f, a);
      if (v && (!out[a] || *v > *out[a])) out[a] = v;
    }
  }
  return out;
}

std::optional<double> mean_top(const FeatureAttributeMatrix& m) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& v : column_max(m)) {
    if (v) {
      sum += *v;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

FeatureReport top_features(const MetricMatrices& m, const std::vector<std::string>& names) {
  const auto& corr = m.correlation;
  FeatureReport report;
  double sc = 0.0, sr = 0.0, ss = 0.0;
  std::size_t nc = 0, nr = 0, ns = 0;
  for (std::size_t a = 0; a < corr.n_attributes; ++a) {
    AttributeTop top;
    top.attribute = static_cast<int>(a);
    top.name = a < names.size() ? names[a] : fmt::format("attribute {}", a);
    top.popularity = a < m.popularity.size() ? m.popularity[a] : 0.0;
    for (std::size_t f = 0; f < corr.n_features; ++f) {
      auto v = corr.at(f, a);
      if (v && (!top.correlation || *v > *top.correlation)) {
        top.correlation = v;
        top.feature = f;
      }
    }
    if (top.feature) {
      top.roc_auc = m.roc_auc.at(*top.feature, a);
      top.sensitivity = m.sensitivity.at(*top.feature, a);
      sc += *top.correlation;
      ++nc;
      if (top.roc_auc) sr += *top.roc_auc, ++nr;
      if (top.sensitivity) ss += *top.sensitivity, ++ns;
    } else {
      report.excluded.push_back(top.attribute);
    }
    report.attributes.push_back(std::move(top));
  }
  if (nc) report.mean_correlation = sc / static_cast<double>(nc);
  if (nr) report.mean_roc_auc = sr / static_cast<double>(nr);
  if (ns) report.mean_sensitivity = ss / static_cast<double>(ns);
  return report;
}

std::string report_csv(const FeatureReport& report) {
  std::vector<const AttributeTop*> rows;
  for (const auto& t : report.attributes) rows.push_back(&t);
  std::stable_sort(rows.begin(), rows.end(), [](const AttributeTop* a, const AttributeTop* b) {
    const double ca = a->correlation.value_or(-2.0), cb = b->correlation.value_or(-2.0);
    return ca > cb;
  });
  std::string out = "attribute,popularity,top_feature_id,correlation,roc_auc,sensitivity\n";
  for (const AttributeTop* t : rows) {
    out += fmt::format("{},{:.6f},{},{},{},{}\n", csv_field(t->name), t->popularity,
                       t->feature ? std::to_string(*t->feature) : std::string(), cell(t->correlation), cell(t->roc_auc),
                       cell(t->sensitivity));
  }
  out += fmt::format("mean,,,{},{},{}\n", cell(report.mean_correlation), cell(report.mean_roc_auc),
                     cell(report.mean_sensitivity));
  return out;
}

nlohmann::json report_json(const FeatureReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : report.attributes) {
    rows.push_back({{"attribute", t.attribute},
                    {"name", t.name},
                    {"popularity", t.popularity},
                    {"feature", t.feature ? nlohmann::json(*t.feature) : nlohmann::json(nullptr)},
                    {"correlation", json_cell(t.correlation)},
                    {"roc_auc", json_cell(t.roc_auc)},
                    {"sensitivity", json_cell(t.sensitivity)}});
  }
  return {{"attributes", rows},
          {"mean_correlation", json_cell(report.mean_correlation)},
          {"mean_roc_auc", json_cell(report.mean_roc_auc)},
          {"mean_sensitivity", json_cell(report.mean_sensitivity)},
          {"excluded", report.excluded}};
}

std::string matrix_csv(const FeatureAttributeMatrix& m, const std::vector<std::string>& names,
                       std::span<const std::size_t> features) {
  std::vector<std::size_t> rows(features.begin(), features.end());
  if (rows.empty()) {
    rows.resize(m.n_features);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  std::string out = "feature";
  for (std::size_t a = 0; a < m.n_attributes; ++a) out += "," + csv_field(a < names.size() ? names[a] : std::to_string(a));
  out += "\n";
  for (std::size_t f : rows) {
    out += std::to_string(f);
    for (std::size_t a = 0; a < m.n_attributes; ++a) out += "," + cell(m.at(f, a));
    out += "\n";
  }
  return out;
}

Histogram activation_histogram(std::span<const float> x, std::span<const std::uint8_t> labels, std::size_t bins) {
  require_same_length(x.size(), labels.size(), "activation_histogram");
  if (bins == 0) throw std::invalid_argument("activation_histogram: bins must be positive");
  Histogram h;
  float lo = 0.0f, hi = 0.0f;
  bool any = false;
  for (float v : x) {
    if (!(v > 0.0f)) continue;
    lo = any ? std::min(lo, v) : v;
    hi = any ? std::max(hi, v) : v;
    any = true;
  }
  if (!any) return h;
  if (hi == lo) bins = 1;
  h.low = lo;
  h.bin_width = (static_cast<double>(hi) - lo) / static_cast<double>(bins);
  h.negative.assign(bins, 0);
  h.positive.assign(bins, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0f)) continue;
    std::size_t b = 0;
    if (h.bin_width > 0.0) {
      b = std::min(bins - 1, static_cast<std::size_t>((x[i] - h.low) / h.bin_width));
    }
    (labels[i] ? h.positive : h.negative)[b] += 1;
  }
  return h;
}

nlohmann::json histogram_json(const Histogram& h) {
  return {{"low", h.low}, {"bin_width", h.bin_width}, {"negative", h.negative}, {"positive", h.positive}};
}

std::optional<double> top_k_activation_share(std::span<const float> x, std::span<const std::uint8_t> labels,
                                             std::size_t k) {
  require_same_length(x.size(), labels.size(), "top_k_activation_share");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0f) idx.push_back(i);
  }
  if (idx.empty()) return std::nullopt;
  const std::size_t take = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    [&](std::size_t a, std::size_t b) { return x[a] != x[b] ? x[a] > x[b] : a < b; });
  double total = 0.0, labeled = 0.0;
  for (std::size_t i = 0; i < take; ++i) {
    total += x[idx[i]];
    if (labels[idx[i]]) labeled += x[idx[i]];
  }
  return labeled / total;
}

}  // namespace saerec::interpret
