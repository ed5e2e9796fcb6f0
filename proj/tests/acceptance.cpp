// Acceptance criteria A1-A9. Prints one PASS/FAIL line per criterion and
// exits nonzero when any fails. The default-config pipeline runs into the
// directory given as the first argument and is reused when cached.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "saerec/evalmetrics.hpp"
#include "saerec/interpret.hpp"
#include "saerec/numerics/ops.hpp"
#include "saerec/pipeline/run.hpp"
#include "saerec/probe.hpp"
#include "saerec/recmodel.hpp"
#include "saerec/sae.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/random.hpp"

using namespace saerec;
using namespace saerec::numerics;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "ok: " : "FAILED: ") + what);
  }
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(data::split_csv_line(line));
  }
  return rows;
}

// ---------------------------------------------------------------- A1

Outcome gradients() {
  Outcome o;
  std::mt19937_64 rng(11);
  auto a = testing::random_tensor({4, 5}, rng), b = testing::random_tensor({5, 3}, rng),
       c = testing::random_tensor({4, 5}, rng), bias = testing::random_tensor({5}, rng),
       gain = testing::random_tensor({5}, rng), w = testing::random_tensor({4, 5}, rng),
       w3 = testing::random_tensor({4, 3}, rng);
  auto project = [&](Tape<double>& t, Var v) { return sum(t, mul(t, v, t.constant(w))); };
  auto check = [&](const std::string& name, const std::vector<Tensor<double>>& params, const testing::LossBuilder& f,
                   double tol = 1e-4) {
    const auto r = testing::check_gradients(params, f);
    o.require(r.max_relative_error < tol, fmt::format("{} max rel err {:.2e}", name, r.max_relative_error));
  };

  check("matmul", {a, b}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, matmul(t, p[0], p[1]), t.constant(w3)));
  });
  check("transpose/add/sub/mul/scale", {a, c}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return project(t, scale(t, mul(t, sub(t, transpose(t, transpose(t, p[0])), p[1]), add(t, p[0], p[1])), 0.7));
  });
  check("add_bias/relu/gelu", {a, bias}, [&](Tape<double>& t, const std::vector<Var>& p) {
    auto z = add_bias(t, p[0], p[1]);
    return add(t, project(t, relu(t, z)), project(t, gelu(t, z)));
  });
  check("softmax_rows/layer_norm", {a, gain, bias}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return project(t, softmax_rows(t, layer_norm(t, p[0], p[1], p[2])));
  });
  check("cross_entropy", {a}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return cross_entropy(t, p[0], std::vector<int>{-1, 1, 4, 2});
  });
  std::vector<double> labels{1, 0, 0, 1};
  auto col = testing::random_tensor({4, 1}, rng, 2.0);
  check("logistic_loss", {col}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return logistic_loss(t, p[0], std::span<const double>(labels));
  });
  check("l1_norm/l2_norm_sq", {a}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return add(t, l1_norm(t, p[0]), scale(t, l2_norm_sq(t, p[0]), 0.3));
  });
  auto w4 = testing::random_tensor({3, 4}, rng);
  check("embedding_lookup/slice", {a}, [&](Tape<double>& t, const std::vector<Var>& p) {
    auto rows = embedding_lookup(t, p[0], std::vector<std::size_t>{0, 3, 0, 1});
    return sum(t, mul(t, slice(t, rows, 1, 4, 1, 5), t.constant(w4)));
  });
  auto qkv = testing::random_tensor({7, 12}, rng), w7 = testing::random_tensor({7, 4}, rng);
  check("causal_attention", {qkv}, [&](Tape<double>& t, const std::vector<Var>& p) {
    return sum(t, mul(t, causal_attention(t, p[0], std::vector<Segment>{{0, 3}, {3, 4}}, 2), t.constant(w7)));
  });
  check("dropout (fixed mask)", {a}, [&](Tape<double>& t, const std::vector<Var>& p) {
    std::mt19937_64 mask(3);
    return project(t, dropout(t, p[0], 0.3, mask));
  });

  // SAE loss, pre-activations kept off the ReLU kink
  {
    std::mt19937_64 r2(3);
    std::vector<Tensor<double>> params{testing::random_tensor<double>({7, 5}, r2, 0.7),
                                       testing::random_tensor<double>({7}, r2, 0.3),
                                       testing::random_tensor<double>({5, 7}, r2, 0.7),
                                       testing::random_tensor<double>({5}, r2, 0.3)};
    auto x = testing::random_tensor<double>({4, 5}, r2);
    auto pre = matmul_transposed(x, params[0]);
    bool clear = true;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 7; ++j) clear = clear && std::abs(pre(i, j) + params[1][j]) > 1e-3;
    o.require(clear, "SAE check point away from the ReLU kink");
    check("SAE loss", params, [&](Tape<double>& t, const std::vector<Var>& v) {
      return sae::record_sae_loss(t, sae::SaeVars{v[0], v[1], v[2], v[3]}, t.constant(x), 0.3);
    });
  }
  // probe loss
  {
    std::mt19937_64 r3(5);
    std::vector<Tensor<double>> params{testing::random_tensor<double>({6, 1}, r3, 0.5),
                                       testing::random_tensor<double>({1}, r3, 0.5)};
    auto x = testing::random_tensor<double>({9, 6}, r3);
    std::vector<double> y{1, 0, 0, 1, 1, 0, 1, 0, 0};
    check("probe loss", params, [&](Tape<double>& t, const std::vector<Var>& v) {
      return probe::record_probe_loss<double>(t, v[0], v[1], t.constant(x), y, 0.01);
    });
  }
  // full recommender, 2 layers
  {
    rec::RecModelConfig cfg;
    cfg.n_items = 6;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.hidden = 8;
    cfg.max_len = 6;
    cfg.mlp_expansion = 2;
    cfg.dropout = 0.0;
    cfg.seed = 4;
    auto model = rec::RecModel<double>::init(cfg);
    std::mt19937_64 r4(8);
    std::normal_distribution<double> jitter(0.0, 0.3);
    std::vector<Tensor<double>> flat;
    model.params.for_each([&](const std::string&, const Tensor<double>& t) {
      Tensor<double> p = t;
      for (double& v : p.values()) v += jitter(r4);
      flat.push_back(p);
    });
    std::vector<std::vector<std::int64_t>> seqs{{0, 3, 5, 1}, {2, 2, 4, 0, 1, 5, 3}, {4, 1}};
    auto batch = rec::pack_training_batch(seqs, cfg.max_len);
    check(
        "recommender loss, 2 layers", flat,
        [&](Tape<double>& tape, const std::vector<Var>& vars) {
          auto slots = rec::RecModel<double>::slots_from_list<Var>(cfg.n_layers, vars);
          return rec::record_loss(tape, cfg, slots, batch, nullptr);
        },
        1e-3);
  }
  return o;
}

// ---------------------------------------------------------------- A2

Outcome oracles() {
  Outcome o;
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> coarse(-3, 3);
  std::bernoulli_distribution coin(0.4);
  std::size_t auc_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng() % 60;
    std::vector<double> s(n);
    interpret::Labels y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse(rng) * 0.25;
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    auc_bad += *interpret::roc_auc<double>(s, y) != testing::pairwise_auc(s, y);
  }
  o.require(auc_bad == 0, fmt::format("roc_auc equals the pairwise oracle on 200 tied instances ({} mismatches)", auc_bad));

  double worst_pb = 0.0;
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(200);
    interpret::Labels y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      x[i] = g(rng);
      y[i] = coin(rng);
    }
    worst_pb = std::max(worst_pb, std::abs(*interpret::point_biserial<double>(x, y) - testing::pearson(x, y)));
  }
  o.require(worst_pb < 1e-12, fmt::format("point_biserial vs Pearson max diff {:.1e}", worst_pb));

  std::size_t metric_bad = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n_items = 40, users = 2 + rng() % 99, k = 10;
    std::vector<eval::RecList> lists;
    std::vector<std::vector<std::int64_t>> raw;
    eval::GroundTruth truth;
    std::vector<std::int64_t> pool(n_items);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t u = 0; u < users; ++u) {
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<std::int64_t> items(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
      lists.push_back({static_cast<std::int64_t>(u), items});
      raw.push_back(items);
      truth[static_cast<std::int64_t>(u)] = static_cast<std::int64_t>(rng() % n_items);
    }
    double ndcg = 0.0, hits = 0.0;
    std::set<std::int64_t> seen;
    for (const auto& l : lists) {
      ndcg += testing::ndcg_oracle(l.items, truth[l.user], k);
      hits += std::find(l.items.begin(), l.items.end(), truth[l.user]) != l.items.end();
      seen.insert(l.items.begin(), l.items.end());
    }
    const auto r = eval::evaluate(lists, truth, n_items, k);
    metric_bad += r.ndcg != ndcg / double(users);
    metric_bad += r.hitrate != hits / double(users);
    metric_bad += r.coverage != double(seen.size()) / double(n_items);
    metric_bad += r.diversity != testing::diversity_oracle(raw, n_items);
  }
  o.require(metric_bad == 0, fmt::format("NDCG/HitRate/Coverage/diversity equal brute force ({} mismatches)", metric_bad));
  return o;
}

// ---------------------------------------------------------------- A3-A8

double num(const std::string& s) { return std::stod(s); }

Outcome table_trend(const fs::path& dir) {
  Outcome o;
  const auto rows = read_csv(dir / "sae_grid/table.csv");
  double orig_ndcg = -1.0;
  std::map<double, std::vector<std::string>> by_l1;
  for (const auto& r : rows) {
    if (r[0] == "original") orig_ndcg = num(r[4]);
    else by_l1[num(r[0])] = r;
  }
  const std::vector<double> grid{0.001, 0.05, 0.1, 0.2, 0.3, 0.5};
  bool all = true;
  for (double l : grid) all = all && by_l1.count(l);
  o.require(all && orig_ndcg >= 0.0, "table has every L1 weight and the original model");
  if (!all) return o;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const auto &p = by_l1[grid[i - 1]], &q = by_l1[grid[i]];
    o.require(num(q[3]) <= num(p[3]), fmt::format("L0 {:g}: {} -> {:g}: {}", grid[i - 1], p[3], grid[i], q[3]));
    o.require(num(q[1]) >= num(p[1]), fmt::format("RMSE {:g}: {} -> {:g}: {}", grid[i - 1], p[1], grid[i], q[1]));
  }
  const auto& first = by_l1[0.001];
  o.require(num(first[2]) > 0.99, "explained variance at 0.001 = " + first[2]);
  const double rel = std::abs(num(first[4]) / orig_ndcg - 1.0);
  o.require(rel <= 0.01, fmt::format("substituted NDCG {} vs original {:.6f} (rel {:.4f})", first[4], orig_ndcg, rel));
  return o;
}

Outcome interpretability(const fs::path& dir) {
  Outcome o;
  const json s = read_json(dir / "interpret/summary.json");
  const double sae = s.at("sae_mean_correlation").get<double>(), raw = s.at("raw_mean_correlation").get<double>();
  o.require(s.at("attributes").size() == 12, fmt::format("{} attributes", s.at("attributes").size()));
  o.require(sae > raw, fmt::format("SAE mean {:.3f} > raw neuron mean {:.3f}", sae, raw));
  const double wins = s.at("win_fraction").get<double>();
  o.require(wins >= 0.7, fmt::format("SAE wins {} of {} attributes", s.at("wins").get<int>(), s.at("compared").get<int>()));
  o.require(sae >= 0.3, fmt::format("SAE mean {:.3f} >= 0.3", sae));
  return o;
}

Outcome sweep_shape(const fs::path& dir) {
  Outcome o;
  std::map<double, std::pair<double, std::size_t>> l1, dict;
  for (const auto& r : read_csv(dir / "sae_grid/sweep_l1.csv")) l1[num(r[0])] = {num(r[1]), std::stoul(r[3])};
  for (const auto& r : read_csv(dir / "sae_grid/sweep_dict.csv")) dict[num(r[0])] = {num(r[1]), std::stoul(r[3])};
  const bool present = l1.count(0.001) && l1.count(0.1) && l1.count(1.0) && dict.count(512) && dict.count(2048);
  o.require(present, "sweep has L1 {0.001, 0.1, 1} and dict {512, 2048}");
  if (!present) return o;
  for (auto* m : {&l1, &dict}) {
    for (const auto& [v, p] : *m) o.require(p.second == 5, fmt::format("value {:g}: {} seeds", v, p.second));
  }
  o.require(l1[0.001].first < l1[0.1].first,
            fmt::format("mean corr at 0.001 {:.4f} < at 0.1 {:.4f}", l1[0.001].first, l1[0.1].first));
  o.require(l1[1.0].first < l1[0.1].first, fmt::format("mean corr at 1 {:.4f} < at 0.1 {:.4f}", l1[1.0].first, l1[0.1].first));
  const double gap = std::abs(dict[512].first - dict[2048].first);
  o.require(gap < 0.05, fmt::format("dict 512 vs 2048 differ by {:.4f}", gap));
  return o;
}

void monotone(Outcome& o, const json& curve, const std::string& label) {
  const double rho = curve.at("spearman").is_null() ? -2.0 : curve.at("spearman").get<double>();
  o.require(rho >= 0.9, fmt::format("{} spearman {:.3f}", label, rho));
}

Outcome steering(const fs::path& dir) {
  Outcome o;
  const json s = read_json(dir / "steer/summary.json");
  o.require(s.at("attributes").size() == 12, fmt::format("{} steered attributes", s.at("attributes").size()));
  for (const auto& a : s.at("attributes")) {
    const auto name = a.at("name").get<std::string>();
    monotone(o, a, name);
    o.require(a.at("v_min").get<double>() == -10.0 && a.at("v_max").get<double>() == 10.0, name + " grid spans [-10, 10]");
    const double lo = a.at("at_v_min").get<double>(), hi = a.at("at_v_max").get<double>(),
                 base = a.at("baseline").get<double>();
    o.require(lo < 0.05, fmt::format("{} p(-10) = {:.4f}", name, lo));
    o.require(hi >= 3.0 * base, fmt::format("{} p(+10) = {:.4f}, baseline {:.4f} ({:.2f}x)", name, hi, base, hi / base));
  }
  return o;
}

Outcome safety(const fs::path& dir) {
  Outcome o;
  const json s = read_json(dir / "steer/summary.json");
  for (const auto& a : s.at("attributes")) {
    const auto name = a.at("name").get<std::string>();
    const double n = a.at("ndcg_window_deviation").get<double>(), c = a.at("coverage_window_deviation").get<double>();
    o.require(n <= 0.15, fmt::format("{} NDCG deviation {:.3f}", name, n));
    o.require(c <= 0.15, fmt::format("{} coverage deviation {:.3f}", name, c));
  }
  return o;
}

Outcome probe_parity(const fs::path& dir) {
  Outcome o;
  const double p = read_json(dir / "probe/summary.json").at("mean_correlation").get<double>();
  const double s = read_json(dir / "interpret/summary.json").at("sae_mean_correlation").get<double>();
  o.require(p > s, fmt::format("probe mean {:.3f} > SAE mean {:.3f}", p, s));
  const json c = read_json(dir / "compare/summary.json");
  o.require(c.at("attributes").size() == 12, fmt::format("{} compared attributes", c.at("attributes").size()));
  for (const auto& a : c.at("attributes")) {
    const auto name = a.at("name").get<std::string>();
    monotone(o, a.at("sae_add"), name + " sae_add");
    monotone(o, a.at("probe_add"), name + " probe_add");
  }
  return o;
}

// ---------------------------------------------------------------- A9

Outcome determinism(const fs::path& dir, const fs::path& scratch) {
  Outcome o;
  auto cfg = pipeline::config_from_json(json::parse(R"({
    "seed": 9,
    "data": {"synthetic": {"n_users": 150, "n_items": 40, "n_attributes": 4, "min_length": 8, "max_length": 16}},
    "model": {"n_layers": 2, "n_heads": 2, "hidden": 16, "max_len": 16},
    "train": {"epochs": 3, "batch_size": 16},
    "sae": {"dict_size": 32, "epochs": 3},
    "sae_table": {"l1_weights": [0.01, 0.1]},
    "sae_sweep": {"l1_weights": [0.01], "dict_sizes": [16], "repeats": 2},
    "steer": {"grid": [-2, 0, 2], "k": 5},
    "probe": {"epochs": 2},
    "demo_users": 3
  })"));
  std::vector<std::string> manifests;
  for (const char* name : {"a", "b"}) {
    const auto out = scratch / name;
    fs::remove_all(out);
    cfg.output_dir = out;
    cfg.jobs = manifests.empty() ? 1 : 2;
    pipeline::run(cfg);
    manifests.push_back(slurp(out / "manifest.json"));
  }
  o.require(!manifests[0].empty() && manifests[0] == manifests[1], "two fresh runs give byte-identical manifests");
  fs::remove_all(scratch);

  const auto model = rec::load_model(dir / "model/model.bin");
  const auto log = data::load_csv(dir / "data/interactions.csv", dir / "data/items.csv").log;
  const auto seqs = data::sequences(log, model.config.max_len);
  double worst = 0.0;
  for (std::size_t s = 0; s < seqs.size() && s < 5; ++s) {
    const auto& seq = seqs[s].items;
    const auto full = rec::forward(model, seq, 1).logits;
    for (std::size_t len = 1; len < seq.size(); len += 3) {
      const auto part = rec::forward(model, std::span(seq).first(len), 1).logits;
      for (std::size_t r = 0; r < len; ++r)
        for (std::size_t c = 0; c < part.cols(); ++c)
          worst = std::max(worst, static_cast<double>(std::abs(part(r, c) - full(r, c))));
    }
  }
  o.require(worst < 1e-5, fmt::format("prefix logits max diff {:.2e}", worst));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_run");
  const bool verbose = argc > 2 && std::string(argv[2]) == "--verbose";
  bool all_pass = true;
  std::map<std::string, double> build;

  auto report = [&](const std::string& id, const std::string& title, double limit_s, double build_s,
                    const std::function<Outcome()>& fn) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    const double check_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double total = check_s + build_s;
    if (limit_s > 0.0) o.require(total < limit_s, fmt::format("runtime {:.1f}s < {:.0f}s", total, limit_s));
    all_pass = all_pass && o.pass;
    std::cout << fmt::format("{} {} {} (runtime {:.1f}s)\n", o.pass ? "PASS" : "FAIL", id, title, total);
    for (const auto& n : o.notes) {
      if (verbose || n.rfind("FAILED", 0) == 0) std::cout << "    " << n << "\n";
    }
    std::cout.flush();
  };

  report("A1", "gradient integrity", 120, 0, gradients);
  report("A2", "metric oracles", 60, 0, oracles);

  try {
    auto cfg = pipeline::config_from_json(json::object());
    cfg.output_dir = dir;
    const auto result = pipeline::run(cfg, "bundle", verbose);
    for (const auto& l : result.log) build[l.name] = l.build_seconds;
  } catch (const std::exception& e) {
    std::cout << "pipeline failed: " << e.what() << "\n";
  }
  auto stages = [&](std::initializer_list<const char*> names) {
    double s = 0.0;
    for (const char* n : names) s += build[n];
    return s;
  };

  report("A3", "reconstruction table trend", 1200, stages({"sae", "sae_grid"}), [&] { return table_trend(dir); });
  report("A4", "interpretability recovery", 600, stages({"sae", "interpret"}), [&] { return interpretability(dir); });
  report("A5", "L1 / dictionary sweep shape", 1800, stages({"sae_grid"}), [&] { return sweep_shape(dir); });
  report("A6", "steering monotonicity", 600, stages({"steer"}), [&] { return steering(dir); });
  report("A7", "steering safety window", 0, stages({"steer"}), [&] { return safety(dir); });
  report("A8", "probe parity", 0, stages({"probe", "compare"}), [&] { return probe_parity(dir); });
  report("A9", "determinism and causality", 0, 0, [&] { return determinism(dir, dir.parent_path() / "acceptance_det"); });
  return all_pass ? 0 : 1;
}
