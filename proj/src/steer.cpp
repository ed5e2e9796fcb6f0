#include "saerec/steer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "saerec/util/parallel.hpp"

namespace saerec::steer {

namespace {

struct RowGroup {
  std::size_t begin = 0, end = 0;
  bool selected = false;
};

std::vector<RowGroup> row_groups(std::size_t rows, Positions positions) {
  if (positions == Positions::all) return {{0, rows, true}};
  std::vector<RowGroup> g;
  if (rows > 1) g.push_back({0, rows - 1, false});
  g.push_back({rows - 1, rows, true});
  return g;
}

Tensor<float> normalized_rows(const Tensor<float>& x, std::size_t begin, std::size_t end,
                              const harvest::NormStats& stats) {
  const std::size_t h = x.cols();
  Tensor<float> out({end - begin, h});
  for (std::size_t r = begin; r < end; ++r) {
    auto src = x.row(r);
    auto dst = out.row(r - begin);
    std::copy(src.begin(), src.end(), dst.begin());
    harvest::apply_norm(dst, stats);
  }
  return out;
}

void write_denormalized(const Tensor<float>& rows, std::size_t begin, const harvest::NormStats& stats,
                        Tensor<float>& out) {
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto dst = out.row(begin + r);
    auto src = rows.row(r);
    std::copy(src.begin(), src.end(), dst.begin());
    harvest::invert_norm(dst, stats);
  }
}

void apply_settings(Tensor<float>& codes, std::span<const FeatureSetting> settings) {
  for (std::size_t r = 0; r < codes.rows(); ++r) {
    for (const FeatureSetting& s : settings) codes(r, s.feature) = static_cast<float>(s.value);
  }
}

void check_dims(const sae::SaeModel<float>& sae, const harvest::NormStats& stats) {
  if (stats.mean.size() != sae.input_dim()) {
    throw numerics::ShapeError(fmt::format("norm stats have {} dims but the SAE expects {}", stats.mean.size(),
                                           sae.input_dim()));
  }
}

void add_direction(std::span<float> row, std::span<const float> direction, float alpha, const harvest::NormStats& stats) {
  // a step of alpha * direction in normalized space
  for (std::size_t d = 0; d < row.size(); ++d) row[d] += alpha * direction[d] * stats.std[d];
}

std::vector<eval::RecList> lists_from(std::span<const EvalCase> cases, std::size_t threads,
                                      const rec::RecModel<float>& model, std::size_t k,
                                      const std::function<Tensor<float>(std::size_t)>& logits_for) {
  std::vector<eval::RecList> lists(cases.size());
  util::parallel_for(cases.size(), threads, [&](std::size_t i) {
    Tensor<float> logits = logits_for(i);
    lists[i].user = cases[i].user;
    for (const auto& s : rec::top_k(logits.row(0), k, cases[i].history)) lists[i].items.push_back(s.item);
  });
  (void)model;
  return lists;
}

/// Tap activations of each case, plus the pieces of their SAE reconstruction
/// that do not depend on the last-position override.
class Cache {
 public:
  Cache(const rec::RecModel<float>& model, std::span<const EvalCase> cases, std::size_t tap_layer, std::size_t threads)
      : model_(model), cases_(cases), tap_(tap_layer), threads_(threads), taps_(cases.size()) {
    util::parallel_for(cases.size(), threads, [&](std::size_t i) {
      taps_[i] = rec::forward(model, cases[i].history, tap_layer).hidden;
    });
  }

  void prepare_sae(const sae::SaeModel<float>& sae, const harvest::NormStats& stats) {
    check_dims(sae, stats);
    sae_ = &sae;
    stats_ = &stats;
    prefix_.assign(cases_.size(), Tensor<float>{});
    last_codes_.assign(cases_.size(), Tensor<float>{});
    util::parallel_for(cases_.size(), threads_, [&](std::size_t i) {
      const Tensor<float>& x = taps_[i];
      Tensor<float> base = x;
      for (const RowGroup& g : row_groups(x.rows(), Positions::last)) {
        Tensor<float> codes = sae.encode_batch(normalized_rows(x, g.begin, g.end, stats));
        if (g.selected) {
          last_codes_[i] = codes;
        } else {
          write_denormalized(sae.decode_batch(codes), g.begin, stats, base);
        }
      }
      prefix_[i] = std::move(base);
    });
  }

  std::vector<eval::RecList> original(std::size_t k) const {
    return lists_from(cases_, threads_, model_, k, [&](std::size_t i) {
      return rec::forward_from_tap(model_, taps_[i], tap_, true);
    });
  }

  std::vector<eval::RecList> with_settings(std::size_t k, std::span<const FeatureSetting> settings) const {
    return lists_from(cases_, threads_, model_, k, [&](std::size_t i) {
      Tensor<float> x = prefix_[i];
      Tensor<float> codes = last_codes_[i];
      apply_settings(codes, settings);
      write_denormalized(sae_->decode_batch(codes), x.rows() - 1, *stats_, x);
      return rec::forward_from_tap(model_, x, tap_, true);
    });
  }

  std::vector<eval::RecList> with_direction(std::size_t k, std::span<const float> direction, float alpha,
                                            const harvest::NormStats& stats) const {
    return lists_from(cases_, threads_, model_, k, [&](std::size_t i) {
      Tensor<float> x = taps_[i];
      add_direction(x.row(x.rows() - 1), direction, alpha, stats);
      return rec::forward_from_tap(model_, x, tap_, true);
    });
  }

 private:
  const rec::RecModel<float>& model_;
  std::span<const EvalCase> cases_;
  std::size_t tap_;
  std::size_t threads_;
  std::vector<Tensor<float>> taps_;
  const sae::SaeModel<float>* sae_ = nullptr;
  const harvest::NormStats* stats_ = nullptr;
  std::vector<Tensor<float>> prefix_;
  std::vector<Tensor<float>> last_codes_;
};

SweepPoint make_point(double v, std::span<const eval::RecList> lists, const eval::GroundTruth& truth,
                      const data::ItemCatalog& catalog, std::size_t k) {
  return SweepPoint{v, attribute_proportions(lists, catalog), eval::evaluate(lists, truth, catalog.n_items(), k)};
}

std::string format_v(double v) { return fmt::format("{:g}", v); }

}  // namespace

rec::ActivationEdit<float> steered_edit(const sae::SaeModel<float>& sae, const harvest::NormStats& stats,
                                        const Intervention& intervention) {
  check_dims(sae, stats);
  for (const FeatureSetting& s : intervention.features) {
    if (s.feature >= sae.dict_size()) {
      throw std::out_of_range(fmt::format("feature {} outside dictionary of size {}", s.feature, sae.dict_size()));
    }
  }
  return [&sae, &stats, settings = intervention.features, positions = intervention.positions](const Tensor<float>& x) {
    if (x.cols() != sae.input_dim()) {
      throw numerics::ShapeError(fmt::format("activation width {} does not match SAE input {}", x.cols(), sae.input_dim()));
    }
    Tensor<float> out = x;
    for (const RowGroup& g : row_groups(x.rows(), positions)) {
      Tensor<float> codes = sae.encode_batch(normalized_rows(x, g.begin, g.end, stats));
      if (g.selected) apply_settings(codes, settings);
      write_denormalized(sae.decode_batch(codes), g.begin, stats, out);
    }
    return out;
  };
}

rec::ActivationEdit<float> direction_edit(std::vector<float> direction, double alpha, const harvest::NormStats& stats,
                                          Positions positions) {
  if (direction.size() != stats.mean.size()) throw numerics::ShapeError("direction_edit: dimension mismatch");
  return [&stats, dir = std::move(direction), a = static_cast<float>(alpha), positions](const Tensor<float>& x) {
    if (x.cols() != dir.size()) throw numerics::ShapeError("direction_edit: activation width mismatch");
    Tensor<float> out = x;
    const std::size_t first = positions == Positions::all ? 0 : x.rows() - 1;
    for (std::size_t r = first; r < x.rows(); ++r) add_direction(out.row(r), dir, a, stats);
    return out;
  };
}

std::vector<float> unit_variance_direction(std::span<const float> direction, const harvest::ActivationSet& records) {
  if (direction.size() != records.hidden) throw numerics::ShapeError("unit_variance_direction: dimension mismatch");
  if (records.count() < 2) throw std::invalid_argument("unit_variance_direction: need at least two records");
  std::vector<double> proj(records.count());
  double mean = 0.0;
  for (std::size_t i = 0; i < records.count(); ++i) {
    auto x = records.row(i);
    double p = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) p += static_cast<double>(x[d]) * direction[d];
    proj[i] = p;
    mean += p;
  }
  mean /= static_cast<double>(proj.size());
  double var = 0.0;
  for (double p : proj) var += (p - mean) * (p - mean);
  var /= static_cast<double>(proj.size());
  if (!(var > 0.0)) throw std::invalid_argument("unit_variance_direction: projection has zero variance");
  const double scale = 1.0 / std::sqrt(var);
  std::vector<float> out(direction.size());
  for (std::size_t d = 0; d < out.size(); ++d) out[d] = static_cast<float>(direction[d] * scale);
  return out;
}

std::vector<float> decoder_direction(const sae::SaeModel<float>& sae, std::size_t feature) {
  if (feature >= sae.dict_size()) throw std::out_of_range(fmt::format("feature {} outside dictionary", feature));
  std::vector<float> d(sae.input_dim());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = sae.decoder(i, feature);
  return d;
}

std::vector<EvalCase> make_eval_cases(const std::vector<data::UserSequence>& sequences, std::size_t max_len) {
  std::vector<EvalCase> cases;
  for (const auto& s : sequences) {
    if (s.items.size() < 2) continue;
    EvalCase c;
    c.user = s.user;
    c.target = s.items.back();
    const std::size_t n = s.items.size() - 1;
    const std::size_t from = n > max_len ? n - max_len : 0;
    c.history.assign(s.items.begin() + static_cast<std::ptrdiff_t>(from), s.items.begin() + static_cast<std::ptrdiff_t>(n));
    cases.push_back(std::move(c));
  }
  return cases;
}

eval::GroundTruth ground_truth(std::span<const EvalCase> cases) {
  eval::GroundTruth t;
  for (const auto& c : cases) t[c.user] = c.target;
  return t;
}

std::vector<eval::RecList> recommend_all(const rec::RecModel<float>& model, std::span<const EvalCase> cases,
                                         std::size_t k, const rec::ActivationEdit<float>& edit, std::size_t tap_layer,
                                         std::size_t threads) {
  std::vector<eval::RecList> lists(cases.size());
  util::parallel_for(cases.size(), threads, [&](std::size_t i) {
    lists[i].user = cases[i].user;
    for (const auto& s : rec::recommend(model, cases[i].history, k, true, edit, tap_layer)) {
      lists[i].items.push_back(s.item);
    }
  });
  return lists;
}

SubstitutionResult reconstruction_substitution_eval(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae,
                                                    const harvest::NormStats& stats, std::span<const EvalCase> cases,
                                                    std::size_t k, std::size_t tap_layer, std::size_t threads) {
  if (cases.empty()) throw std::invalid_argument("reconstruction_substitution_eval: no test cases");
  Cache cache(model, cases, tap_layer, threads);
  cache.prepare_sae(sae, stats);
  const auto truth = ground_truth(cases);
  const std::size_t n_items = model.config.n_items;
  return SubstitutionResult{eval::evaluate(cache.original(k), truth, n_items, k),
                            eval::evaluate(cache.with_settings(k, {}), truth, n_items, k)};
}

std::vector<double> attribute_proportions(std::span<const eval::RecList> lists, const data::ItemCatalog& catalog) {
  std::vector<double> counts(catalog.n_attributes(), 0.0);
  std::size_t slots = 0;
  for (const auto& l : lists) {
    for (auto item : l.items) {
      ++slots;
      for (int a : catalog.attributes.at(static_cast<std::size_t>(item))) counts[static_cast<std::size_t>(a)] += 1.0;
    }
  }
  if (slots > 0) {
    for (double& c : counts) c /= static_cast<double>(slots);
  }
  return counts;
}

std::vector<double> SweepSpec::values() const {
  if (!grid.empty()) return grid;
  std::vector<double> v;
  for (int i = -10; i <= 10; ++i) v.push_back(i);
  return v;
}

SweepResult sweep(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae, const harvest::NormStats& stats,
                  std::size_t feature, std::span<const EvalCase> cases, const data::ItemCatalog& catalog,
                  const SweepSpec& spec) {
  if (feature >= sae.dict_size()) throw std::out_of_range(fmt::format("feature {} outside dictionary", feature));
  Cache cache(model, cases, spec.tap_layer, spec.threads);
  cache.prepare_sae(sae, stats);
  const auto truth = ground_truth(cases);
  SweepResult r;
  r.method = "sae_set";
  r.feature = feature;
  r.baseline = make_point(0.0, cache.original(spec.k), truth, catalog, spec.k);
  for (double v : spec.values()) {
    const FeatureSetting s{feature, v};
    r.points.push_back(make_point(v, cache.with_settings(spec.k, std::span(&s, 1)), truth, catalog, spec.k));
  }
  return r;
}

SweepResult direction_sweep(const rec::RecModel<float>& model, std::span<const float> direction,
                            const harvest::NormStats& stats, std::span<const EvalCase> cases,
                            const data::ItemCatalog& catalog, const SweepSpec& spec) {
  if (direction.size() != model.config.hidden) throw numerics::ShapeError("direction_sweep: dimension mismatch");
  Cache cache(model, cases, spec.tap_layer, spec.threads);
  const auto truth = ground_truth(cases);
  SweepResult r;
  r.method = "direction_add";
  r.baseline = make_point(0.0, cache.original(spec.k), truth, catalog, spec.k);
  for (double v : spec.values()) {
    r.points.push_back(
        make_point(v, cache.with_direction(spec.k, direction, static_cast<float>(v), stats), truth, catalog, spec.k));
  }
  return r;
}

std::string proportions_csv(const SweepResult& r, const std::vector<std::string>& names) {
  std::string out = "v,attribute,proportion\n";
  auto rows = [&](const std::string& v, const SweepPoint& p) {
    for (std::size_t a = 0; a < p.proportions.size(); ++a) {
      out += fmt::format("{},{},{:.6f}\n", v, a < names.size() ? names[a] : std::to_string(a), p.proportions[a]);
    }
  };
  rows("baseline", r.baseline);
  for (const auto& p : r.points) rows(format_v(p.v), p);
  return out;
}

std::string quality_csv(const SweepResult& r) {
  std::string out = "v,ndcg,hitrate,coverage,diversity\n";
  auto row = [&](const std::string& v, const eval::EvalResult& m) {
    out += fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f}\n", v, m.ndcg, m.hitrate, m.coverage, m.diversity);
  };
  row("baseline", r.baseline.metrics);
  for (const auto& p : r.points) row(format_v(p.v), p.metrics);
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  auto ranks = [](std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace saerec::steer
