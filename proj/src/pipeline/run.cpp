#include "saerec/pipeline/run.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "saerec/evalmetrics.hpp"
#include "saerec/harvest.hpp"
#include "saerec/interpret.hpp"
#include "saerec/io/checksum.hpp"
#include "saerec/pipeline/report.hpp"
#include "saerec/probe.hpp"
#include "saerec/sae.hpp"
#include "saerec/steer.hpp"
#include "saerec/util/parallel.hpp"

namespace saerec::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"data",      "split", "model", "harvest", "sae",    "sae_grid",
                                              "interpret", "steer", "probe", "compare", "report", "bundle"};
  return names;
}

const StageRecord* RunManifest::find(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

json RunManifest::to_json() const {
  json stages_json = json::array();
  for (const auto& s : stages) stages_json.push_back({{"name", s.name}, {"key", s.key}, {"artifacts", s.artifacts}});
  return json{{"config", config}, {"stages", stages_json}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.config = j.value("config", json::object());
  for (const auto& s : j.value("stages", json::array())) {
    m.stages.push_back({s.at("name").get<std::string>(), s.at("key").get<std::string>(),
                        s.at("artifacts").get<std::map<std::string, std::string>>()});
  }
  return m;
}

RunManifest read_manifest(const fs::path& output_dir) {
  std::ifstream in(output_dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest in " + output_dir.string());
  return RunManifest::from_json(json::parse(in));
}

json to_json(const GridPoint& p) {
  return json{{"l1_weight", p.l1_weight},
              {"dict_size", p.dict_size},
              {"repeat", p.repeat},
              {"seed", p.seed},
              {"rmse", p.rmse},
              {"explained_variance", p.explained_variance},
              {"l0", p.l0},
              {"mean_correlation", p.mean_correlation ? json(*p.mean_correlation) : json(nullptr)},
              {"ndcg", p.ndcg},
              {"hitrate", p.hitrate},
              {"coverage", p.coverage}};
}

GridPoint grid_point_from_json(const json& j) {
  GridPoint p;
  p.l1_weight = j.at("l1_weight").get<double>();
  p.dict_size = j.at("dict_size").get<std::size_t>();
  p.repeat = j.at("repeat").get<std::size_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.rmse = j.at("rmse").get<double>();
  p.explained_variance = j.at("explained_variance").get<double>();
  p.l0 = j.at("l0").get<double>();
  if (!j.at("mean_correlation").is_null()) p.mean_correlation = j.at("mean_correlation").get<double>();
  p.ndcg = j.at("ndcg").get<double>();
  p.hitrate = j.at("hitrate").get<double>();
  p.coverage = j.at("coverage").get<double>();
  return p;
}

SweepReport sweep_report(const std::vector<GridPoint>& points, const SaeSweepSpec& spec, double main_l1,
                         std::size_t main_dict) {
  SweepReport r;
  auto row = [&](double value, const std::function<bool(const GridPoint&)>& match, const std::string& label) {
    SweepRow out;
    out.value = value;
    out.expected = spec.repeats;
    std::vector<double> vals;
    for (const auto& p : points) {
      if (p.repeat < spec.repeats && match(p) && p.mean_correlation) vals.push_back(*p.mean_correlation);
    }
    out.n = vals.size();
    if (!vals.empty()) {
      out.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - out.mean) * (v - out.mean);
      out.std = std::sqrt(var / static_cast<double>(vals.size()));
    }
    if (out.n < out.expected) r.missing.push_back(fmt::format("{} ({} of {} repeats)", label, out.n, out.expected));
    return out;
  };
  for (double l1 : spec.l1_weights) {
    r.by_l1.push_back(row(
        l1, [&](const GridPoint& p) { return p.l1_weight == l1 && p.dict_size == main_dict; },
        fmt::format("l1_weight {:g}", l1)));
  }
  for (std::size_t d : spec.dict_sizes) {
    r.by_dict.push_back(row(
        static_cast<double>(d), [&](const GridPoint& p) { return p.l1_weight == main_l1 && p.dict_size == d; },
        fmt::format("dict_size {}", d)));
  }
  return r;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, const std::string& value_name) {
  std::string out = value_name + ",mean_correlation,std,repeats\n";
  for (const auto& r : rows) out += fmt::format("{:g},{:.6f},{:.6f},{}\n", r.value, r.mean, r.std, r.n);
  return out;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Shape of one steering curve for the target attribute.
json curve_summary(const steer::SweepResult& r, int attribute) {
  const auto a = static_cast<std::size_t>(attribute);
  std::vector<double> v, p;
  double ndcg_dev = 0.0, cov_dev = 0.0;
  const auto& base = r.baseline.metrics;
  auto rel = [](double x, double x0) { return x0 > 0.0 ? std::abs(x / x0 - 1.0) : (x == 0.0 ? 0.0 : 1.0); };
  for (const auto& pt : r.points) {
    v.push_back(pt.v);
    p.push_back(pt.proportions.at(a));
    if (std::abs(pt.v) <= 2.0) {
      ndcg_dev = std::max(ndcg_dev, rel(pt.metrics.ndcg, base.ndcg));
      cov_dev = std::max(cov_dev, rel(pt.metrics.coverage, base.coverage));
    }
  }
  json out{{"baseline", r.baseline.proportions.at(a)},
           {"v_min", v.empty() ? 0.0 : v.front()},
           {"v_max", v.empty() ? 0.0 : v.back()},
           {"at_v_min", p.empty() ? 0.0 : p.front()},
           {"at_v_max", p.empty() ? 0.0 : p.back()},
           {"ndcg_window_deviation", ndcg_dev},
           {"coverage_window_deviation", cov_dev}};
  out["spearman"] = v.size() >= 2 ? json(steer::spearman(v, p)) : json(nullptr);
  return out;
}

std::vector<double> quantiles(std::vector<float> values, std::initializer_list<double> qs) {
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  for (double q : qs) {
    if (values.empty()) {
      out.push_back(0.0);
      continue;
    }
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    out.push_back(values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]));
  }
  return out;
}

struct SplitUsers {
  std::vector<std::int64_t> model, sae, test;
};

class Runner {
 public:
  Runner(ExperimentConfig config, bool verbose) : cfg_(std::move(config)), dir_(cfg_.output_dir), verbose_(verbose) {}

  RunResult run(const std::string& until) {
    const auto& names = stage_names();
    const auto last = std::find(names.begin(), names.end(), until);
    if (last == names.end()) throw std::invalid_argument("unknown stage " + until);
    try {
      cfg_.validate();
    } catch (const std::exception& e) {
      throw StageError("config", e.what());
    }
    fs::create_directories(dir_);
    if (fs::exists(dir_ / "manifest.json")) {
      try {
        previous_ = read_manifest(dir_);
      } catch (const std::exception&) {
        previous_.reset();
      }
    }
    if (fs::exists(dir_ / "run_log.json")) {
      try {
        for (const auto& l : read_json(dir_ / "run_log.json")) {
          const double fresh = l.value("cached", true) ? 0.0 : l.value("seconds", 0.0);
          previous_build_[l.at("stage").get<std::string>()] = l.value("build_seconds", fresh);
        }
      } catch (const std::exception&) {
        previous_build_.clear();
      }
    }
    json snapshot = config_to_json(cfg_);
    snapshot.erase("output_dir");
    snapshot.erase("jobs");
    result_.manifest.config = snapshot;

    using Fn = std::vector<std::string> (Runner::*)();
    const std::vector<std::pair<Fn, std::vector<std::string>>> plan{
        {&Runner::stage_data, {}},
        {&Runner::stage_split, {"data"}},
        {&Runner::stage_model, {"data", "split"}},
        {&Runner::stage_harvest, {"data", "split", "model"}},
        {&Runner::stage_sae, {"data", "split", "model", "harvest"}},
        {&Runner::stage_sae_grid, {"data", "split", "model", "harvest", "sae"}},
        {&Runner::stage_interpret, {"data", "harvest", "sae"}},
        {&Runner::stage_steer, {"data", "split", "model", "sae", "interpret"}},
        {&Runner::stage_probe, {"data", "harvest"}},
        {&Runner::stage_compare, {"data", "split", "model", "harvest", "sae", "interpret", "probe"}},
        {&Runner::stage_report, {"sae", "sae_grid", "interpret", "steer", "probe", "compare"}},
        {&Runner::stage_bundle, {"data", "split", "model", "harvest", "sae", "interpret"}},
    };
    const auto n = static_cast<std::size_t>(last - names.begin()) + 1;
    for (std::size_t i = 0; i < n; ++i) execute(names[i], plan[i].second, plan[i].first);

    json log = json::array();
    for (const auto& l : result_.log) log.push_back({{"stage", l.name}, {"cached", l.cached}, {"seconds", l.seconds}, {"build_seconds", l.build_seconds}});
    write_json(dir_ / "run_log.json", log);
    return result_;
  }

 private:
  using Fn = std::vector<std::string> (Runner::*)();

  json stage_params(const std::string& name) const {
    const json c = result_.manifest.config;
    if (name == "data") return c.at("data");
    if (name == "split") return c.at("split");
    if (name == "model") return {{"model", c.at("model")}, {"train", c.at("train")}};
    if (name == "harvest") return {{"tap_layer", cfg_.tap_layer}};
    if (name == "sae") return c.at("sae");
    if (name == "sae_grid") return {{"sae", c.at("sae")}, {"table", c.at("sae_table")}, {"sweep", c.at("sae_sweep")}};
    if (name == "steer" || name == "compare") return {{"steer", c.at("steer")}, {"tap_layer", cfg_.tap_layer}};
    if (name == "probe") return c.at("probe");
    if (name == "bundle") return {{"demo_users", cfg_.demo_users}, {"tap_layer", cfg_.tap_layer}};
    return json::object();
  }

  std::string stage_key(const std::string& name, const std::vector<std::string>& upstream) const {
    std::string text = name + "\n" + stage_params(name).dump() + "\n";
    for (const auto& u : upstream) {
      const StageRecord* rec = result_.manifest.find(u);
      text += u + ":" + (rec ? rec->key : std::string("missing")) + "\n";
      if (rec) {
        for (const auto& [path, sha] : rec->artifacts) text += path + "=" + sha + "\n";
      }
    }
    return io::sha256_hex(text);
  }

  bool cache_valid(const StageRecord& rec) const {
    for (const auto& [path, sha] : rec.artifacts) {
      if (!fs::exists(dir_ / path) || io::sha256_file(dir_ / path) != sha) return false;
    }
    return true;
  }

  void execute(const std::string& name, const std::vector<std::string>& upstream, Fn fn) {
    const auto start = std::chrono::steady_clock::now();
    const std::string key = stage_key(name, upstream);
    if (previous_) {
      const StageRecord* old = previous_->find(name);
      if (old && old->key == key && cache_valid(*old)) {
        result_.manifest.stages.push_back(*old);
        const auto built = previous_build_.find(name);
        result_.log.push_back({name, true, seconds_since(start), built == previous_build_.end() ? 0.0 : built->second});
        if (verbose_) std::fprintf(stderr, "[%s] cached\n", name.c_str());
        write_json(dir_ / "manifest.json", result_.manifest.to_json());
        return;
      }
    }
    StageRecord rec{name, key, {}};
    try {
      fs::remove_all(dir_ / name);
      for (const auto& rel : (this->*fn)()) rec.artifacts[rel] = io::sha256_file(dir_ / rel);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    result_.manifest.stages.push_back(rec);
    const double secs = seconds_since(start);
    result_.log.push_back({name, false, secs, secs + reused_seconds_});
    reused_seconds_ = 0.0;
    if (verbose_) std::fprintf(stderr, "[%s] done in %.1fs\n", name.c_str(), secs);
    write_json(dir_ / "manifest.json", result_.manifest.to_json());
  }

  // -- loaders ---------------------------------------------------------------

  const data::LoadedData& dataset() {
    if (!data_) data_ = data::load_csv(dir_ / "data/interactions.csv", dir_ / "data/items.csv");
    return *data_;
  }

  const SplitUsers& users() {
    if (!users_) {
      const json j = read_json(dir_ / "split/split.json");
      users_ = SplitUsers{j.at("model_users").get<std::vector<std::int64_t>>(),
                          j.at("sae_users").get<std::vector<std::int64_t>>(),
                          j.at("test_users").get<std::vector<std::int64_t>>()};
    }
    return *users_;
  }

  std::vector<data::UserSequence> sequences_of(const std::vector<std::int64_t>& who, std::size_t max_len) {
    return data::sequences(data::restrict_to_users(dataset().log, who), max_len);
  }

  const rec::RecModel<float>& model() {
    if (!model_) model_ = rec::load_model(dir_ / "model/model.bin");
    return *model_;
  }

  const std::vector<steer::EvalCase>& cases() {
    if (!cases_) {
      const std::size_t max_len = model().config.max_len;
      cases_ = steer::make_eval_cases(sequences_of(users().test, max_len + 1), max_len);
    }
    return *cases_;
  }

  const harvest::Dump& sae_dump() {
    if (!sae_dump_) sae_dump_ = harvest::load_dump(dir_ / "harvest/sae_records.actd");
    return *sae_dump_;
  }

  const harvest::ActivationSet& sae_records() {
    if (!sae_records_) sae_records_ = harvest::normalized(sae_dump().set, sae_dump().stats);
    return *sae_records_;
  }

  const harvest::ActivationSet& test_records() {
    if (!test_records_) {
      auto dump = harvest::load_dump(dir_ / "harvest/test_records.actd");
      test_records_ = harvest::normalized(dump.set, sae_dump().stats);
    }
    return *test_records_;
  }

  const std::vector<std::vector<int>>& test_attrs() {
    if (!test_attrs_) test_attrs_ = interpret::record_attributes(test_records(), dataset().catalog);
    return *test_attrs_;
  }

  const sae::LoadedSae& main_sae() {
    if (!sae_) sae_ = sae::load_sae(dir_ / "sae/sae.bin");
    return *sae_;
  }

  const std::vector<probe::LinearProbe>& probes() {
    if (!probes_) probes_ = probe::load_probes(dir_ / "probe/probes.bin");
    return *probes_;
  }

  /// Attribute id -> top SAE feature from the interpretability report.
  std::vector<std::pair<int, std::size_t>> top_features() {
    std::vector<std::pair<int, std::size_t>> out;
    const json report = read_json(dir_ / "interpret/report.json");
    for (const auto& a : report.at("attributes")) {
      if (!a.at("feature").is_null()) out.emplace_back(a.at("attribute").get<int>(), a.at("feature").get<std::size_t>());
    }
    return out;
  }

  steer::SweepSpec sweep_spec() const {
    steer::SweepSpec s;
    s.grid = cfg_.steer.grid;
    s.k = cfg_.steer.k;
    s.tap_layer = cfg_.tap_layer;
    s.threads = cfg_.jobs;
    return s;
  }

  // -- stages ----------------------------------------------------------------

  std::vector<std::string> stage_data() {
    data::LoadedData d;
    if (cfg_.data.kind == "synthetic") {
      auto synth = data::generate_synthetic(cfg_.data.synthetic);
      d.log = std::move(synth.log);
      d.catalog = std::move(synth.catalog);
    } else {
      d = data::load_csv(cfg_.data.interactions_csv, cfg_.data.items_csv);
    }
    data::save_csv(d.log, d.catalog, dir_ / "data/interactions.csv", dir_ / "data/items.csv");
    data_.reset();
    return {"data/interactions.csv", "data/items.csv"};
  }

  std::vector<std::string> stage_split() {
    auto s = data::split(dataset().log, cfg_.split);
    write_json(dir_ / "split/split.json",
               {{"model_users", s.model_users}, {"sae_users", s.sae_users}, {"test_users", s.test_users}});
    users_.reset();
    return {"split/split.json"};
  }

  std::vector<std::string> stage_model() {
    rec::RecModelConfig mc = cfg_.model;
    mc.n_items = dataset().catalog.n_items();
    auto m = rec::RecModel<float>::init(mc);
    rec::TrainOptions opts = cfg_.train;
    opts.verbose = verbose_;
    auto report = rec::train(m, sequences_of(users().model, mc.max_len + 1), opts);
    rec::save_model(m, dir_ / "model/model.bin", {{"train", cfg_.train}});
    write_json(dir_ / "model/train_log.json", {{"epoch_loss", report.epoch_loss}, {"steps", report.steps}});
    model_.reset();
    return {"model/model.bin", "model/train_log.json"};
  }

  std::vector<std::string> stage_harvest() {
    const std::size_t max_len = model().config.max_len;
    auto sae_set = harvest::harvest(model(), sequences_of(users().sae, max_len), cfg_.tap_layer, cfg_.jobs);
    auto test_set = harvest::harvest(model(), sequences_of(users().test, max_len), cfg_.tap_layer, cfg_.jobs);
    const std::string model_sha = io::sha256_file(dir_ / "model/model.bin");
    sae_set.model_checksum = test_set.model_checksum = model_sha;
    const auto stats = harvest::fit_norm(sae_set);
    fs::create_directories(dir_ / "harvest");
    harvest::save_dump(dir_ / "harvest/sae_records.actd", sae_set, stats);
    harvest::save_dump(dir_ / "harvest/test_records.actd", test_set, stats);
    sae_dump_.reset();
    sae_records_.reset();
    test_records_.reset();
    test_attrs_.reset();
    return {"harvest/sae_records.actd", "harvest/test_records.actd"};
  }

  /// Trains (or reuses) an SAE and measures it on the test records.
  GridPoint evaluate_sae(const sae::SaeModel<float>& s, const harvest::NormStats& stats) {
    GridPoint p;
    p.l1_weight = s.config.l1_weight;
    p.dict_size = s.config.dict_size;
    p.seed = s.config.seed;
    const auto m = sae::reconstruction_metrics(s, test_records());
    p.rmse = m.rmse;
    p.explained_variance = m.explained_variance;
    p.l0 = m.l0;
    const auto mats = interpret::build_matrices(sae::encode_all(s, test_records()), test_attrs(),
                                                dataset().catalog.n_attributes());
    p.mean_correlation = interpret::mean_top(mats.correlation);
    const auto sub = steer::reconstruction_substitution_eval(model(), s, stats, cases(), cfg_.steer.k, cfg_.tap_layer);
    p.ndcg = sub.substituted.ndcg;
    p.hitrate = sub.substituted.hitrate;
    p.coverage = sub.substituted.coverage;
    return p;
  }

  sae::SaeConfig sae_config(double l1, std::size_t dict, std::uint64_t seed) const {
    sae::SaeConfig c = cfg_.sae;
    c.input_dim = model_ ? model_->config.hidden : cfg_.model.hidden;
    c.l1_weight = l1;
    c.dict_size = dict;
    c.seed = seed;
    return c;
  }

  std::vector<std::string> stage_sae() {
    auto s = sae::SaeModel<float>::init(sae_config(cfg_.sae.l1_weight, cfg_.sae.dict_size, cfg_.sae.seed));
    auto report = sae::train_sae(s, sae_records(), verbose_);
    const std::string dump_sha = io::sha256_file(dir_ / "harvest/sae_records.actd");
    sae::save_sae(s, dir_ / "sae/sae.bin", dump_sha, sae_dump().stats);
    sae_.reset();

    const auto train_m = sae::reconstruction_metrics(s, sae_records());
    const auto test_m = sae::reconstruction_metrics(s, test_records());
    const auto sub = steer::reconstruction_substitution_eval(model(), s, sae_dump().stats, cases(), cfg_.steer.k,
                                                             cfg_.tap_layer, cfg_.jobs);
    auto metrics = [](const sae::ReconstructionMetrics& m) {
      return json{{"rmse", m.rmse}, {"explained_variance", m.explained_variance}, {"l0", m.l0}};
    };
    write_json(dir_ / "sae/metrics.json", {{"train", metrics(train_m)},
                                           {"test", metrics(test_m)},
                                           {"epoch_loss", report.epoch_loss},
                                           {"decoder_norm_error", s.decoder_norm_error()},
                                           {"original", eval::to_json(sub.original)},
                                           {"substituted", eval::to_json(sub.substituted)}});
    return {"sae/sae.bin", "sae/metrics.json"};
  }

  std::vector<std::string> stage_sae_grid() {
    struct Spec {
      double l1;
      std::size_t dict;
      std::size_t repeat;
    };
    std::vector<Spec> specs;
    auto add = [&](double l1, std::size_t dict, std::size_t repeat) {
      for (const auto& s : specs) {
        if (s.l1 == l1 && s.dict == dict && s.repeat == repeat) return;
      }
      specs.push_back({l1, dict, repeat});
    };
    for (double l1 : cfg_.sae_table.l1_weights) add(l1, cfg_.sae.dict_size, 0);
    for (std::size_t r = 0; r < cfg_.sae_sweep.repeats; ++r) {
      for (double l1 : cfg_.sae_sweep.l1_weights) add(l1, cfg_.sae.dict_size, r);
      for (std::size_t d : cfg_.sae_sweep.dict_sizes) add(cfg_.sae.l1_weight, d, r);
    }
    if (specs.empty()) {
      write_json(dir_ / "sae_grid/points.json", json::array());
      return {"sae_grid/points.json"};
    }

    // warm the shared loaders before fanning out
    (void)model();
    (void)cases();
    (void)test_attrs();
    (void)sae_records();
    const auto& stats = sae_dump().stats;
    const std::string upstream = stage_key("sae_grid_point", {"data", "split", "model", "harvest"});
    const fs::path cache = dir_ / "cache/sae_points";
    fs::create_directories(cache);

    std::vector<GridPoint> points(specs.size());
    std::vector<double> reused(specs.size(), 0.0);
    util::parallel_for(specs.size(), cfg_.jobs, [&](std::size_t i) {
      const Spec& sp = specs[i];
      const std::uint64_t seed =
          sp.repeat == 0 ? cfg_.sae.seed : derive_seed(cfg_.sae.seed, fmt::format("repeat {}", sp.repeat));
      const sae::SaeConfig sc = sae_config(sp.l1, sp.dict, seed);
      const std::string key = io::sha256_hex(upstream + json(sc).dump() + json(cfg_.steer.k).dump());
      const fs::path file = cache / (key.substr(0, 24) + ".json");
      if (fs::exists(file)) {
        const json cached = read_json(file);
        points[i] = grid_point_from_json(cached);
        reused[i] = cached.value("seconds", 0.0);
      } else {
        const auto start = std::chrono::steady_clock::now();
        const bool is_main = sp.l1 == cfg_.sae.l1_weight && sp.dict == cfg_.sae.dict_size && seed == cfg_.sae.seed;
        sae::SaeModel<float> s;
        if (is_main) {
          s = main_sae_copy();
        } else {
          s = sae::SaeModel<float>::init(sc);
          sae::train_sae(s, sae_records());
        }
        points[i] = evaluate_sae(s, stats);
        points[i].repeat = sp.repeat;
        json record = to_json(points[i]);
        record["seconds"] = seconds_since(start);
        write_json(file, record);
      }
      points[i].repeat = sp.repeat;
      if (verbose_) {
        std::fprintf(stderr, "[sae_grid] l1 %g dict %zu repeat %zu\n", sp.l1, sp.dict, sp.repeat);
      }
    });

    for (double r : reused) reused_seconds_ += r;
    json all = json::array();
    for (const auto& p : points) all.push_back(to_json(p));
    write_json(dir_ / "sae_grid/points.json", all);
    std::vector<std::string> out{"sae_grid/points.json"};

    if (!cfg_.sae_table.l1_weights.empty()) {
      const json m = read_json(dir_ / "sae/metrics.json");
      const auto& orig = m.at("original");
      std::string table = "l1_weight,rmse,explained_variance,l0,ndcg,hitrate,coverage\n";
      table += fmt::format("original,,,,{:.6f},{:.6f},{:.6f}\n", orig.at("ndcg").get<double>(),
                           orig.at("hitrate").get<double>(), orig.at("coverage").get<double>());
      for (double l1 : cfg_.sae_table.l1_weights) {
        for (const auto& p : points) {
          if (p.l1_weight == l1 && p.dict_size == cfg_.sae.dict_size && p.repeat == 0) {
            table += fmt::format("{:g},{:.6f},{:.6f},{:.3f},{:.6f},{:.6f},{:.6f}\n", l1, p.rmse, p.explained_variance,
                                 p.l0, p.ndcg, p.hitrate, p.coverage);
            break;
          }
        }
      }
      write_text(dir_ / "sae_grid/table.csv", table);
      out.push_back("sae_grid/table.csv");
    }
    if (!cfg_.sae_sweep.l1_weights.empty() || !cfg_.sae_sweep.dict_sizes.empty()) {
      const auto rep = sweep_report(points, cfg_.sae_sweep, cfg_.sae.l1_weight, cfg_.sae.dict_size);
      write_text(dir_ / "sae_grid/sweep_l1.csv", sweep_csv(rep.by_l1, "l1_weight"));
      write_text(dir_ / "sae_grid/sweep_dict.csv", sweep_csv(rep.by_dict, "dict_size"));
      write_json(dir_ / "sae_grid/sweep_missing.json", rep.missing);
      for (const auto& m : rep.missing) std::fprintf(stderr, "[sae_grid] missing grid point: %s\n", m.c_str());
      out.insert(out.end(), {"sae_grid/sweep_l1.csv", "sae_grid/sweep_dict.csv", "sae_grid/sweep_missing.json"});
    }
    return out;
  }

  sae::SaeModel<float> main_sae_copy() {
    std::lock_guard lock(sae_mutex_);
    return main_sae().model;
  }

  std::vector<std::string> stage_interpret() {
    const auto& catalog = dataset().catalog;
    const auto& s = main_sae().model;
    const auto features = sae::encode_all(s, test_records());
    const auto mats = interpret::build_matrices(features, test_attrs(), catalog.n_attributes());
    const auto raw = interpret::raw_neuron_matrices(test_records(), test_attrs(), catalog.n_attributes());
    const auto report = interpret::top_features(mats, catalog.attribute_names);
    const auto raw_report = interpret::top_features(raw, catalog.attribute_names);

    write_text(dir_ / "interpret/report.csv", interpret::report_csv(report));
    write_json(dir_ / "interpret/report.json", interpret::report_json(report));
    write_text(dir_ / "interpret/raw_neurons.csv", interpret::report_csv(raw_report));

    std::vector<std::size_t> tops;
    json attrs = json::array();
    json hist = json::object();
    std::size_t wins = 0, compared = 0;
    for (const auto& a : report.attributes) {
      const auto& r = raw_report.attributes[static_cast<std::size_t>(a.attribute)];
      json entry{{"attribute", a.attribute},
                 {"name", a.name},
                 {"feature", a.feature ? json(*a.feature) : json(nullptr)},
                 {"correlation", optional_json(a.correlation)},
                 {"raw_neuron", r.feature ? json(*r.feature) : json(nullptr)},
                 {"raw_correlation", optional_json(r.correlation)}};
      if (a.correlation && r.correlation) {
        ++compared;
        wins += *a.correlation > *r.correlation;
      }
      if (a.feature) {
        tops.push_back(*a.feature);
        const auto col = interpret::column(features, *a.feature);
        const auto labels = interpret::attribute_labels(test_attrs(), a.attribute);
        entry["top100_share"] = optional_json(interpret::top_k_activation_share(col, labels, 100));
        hist[a.name] = interpret::histogram_json(interpret::activation_histogram(col, labels));
      }
      attrs.push_back(entry);
    }
    std::sort(tops.begin(), tops.end());
    tops.erase(std::unique(tops.begin(), tops.end()), tops.end());
    write_text(dir_ / "interpret/top_features_correlation.csv",
               interpret::matrix_csv(mats.correlation, catalog.attribute_names, tops));
    write_json(dir_ / "interpret/histograms.json", hist);
    write_json(dir_ / "interpret/summary.json",
               {{"records", mats.n_records},
                {"sae_mean_correlation", optional_json(report.mean_correlation)},
                {"sae_mean_roc_auc", optional_json(report.mean_roc_auc)},
                {"sae_mean_sensitivity", optional_json(report.mean_sensitivity)},
                {"raw_mean_correlation", optional_json(raw_report.mean_correlation)},
                {"wins", wins},
                {"compared", compared},
                {"win_fraction", compared ? static_cast<double>(wins) / static_cast<double>(compared) : 0.0},
                {"attributes", attrs}});
    return {"interpret/report.csv",
            "interpret/report.json",
            "interpret/raw_neurons.csv",
            "interpret/top_features_correlation.csv",
            "interpret/histograms.json",
            "interpret/summary.json"};
  }

  std::vector<std::string> stage_steer() {
    const auto& catalog = dataset().catalog;
    const auto& loaded = main_sae();
    std::vector<std::string> out;
    json summary = json::array();
    for (const auto& [attribute, feature] : top_features()) {
      auto r = steer::sweep(model(), loaded.model, loaded.stats, feature, cases(), catalog, sweep_spec());
      r.attribute = attribute;
      const std::string stem = fmt::format("steer/attribute_{:02}", attribute);
      write_text(dir_ / (stem + "_proportions.csv"), steer::proportions_csv(r, catalog.attribute_names));
      write_text(dir_ / (stem + "_quality.csv"), steer::quality_csv(r));
      out.push_back(stem + "_proportions.csv");
      out.push_back(stem + "_quality.csv");
      json s = curve_summary(r, attribute);
      s["attribute"] = attribute;
      s["name"] = catalog.attribute_names[static_cast<std::size_t>(attribute)];
      s["feature"] = feature;
      summary.push_back(s);
    }
    write_json(dir_ / "steer/summary.json",
               {{"method", "sae_set"}, {"positions", "last"}, {"exclude_seen", true}, {"attributes", summary}});
    out.push_back("steer/summary.json");
    return out;
  }

  std::vector<std::string> stage_probe() {
    const auto& catalog = dataset().catalog;
    const auto train_attrs = interpret::record_attributes(sae_records(), catalog);
    auto trained = probe::train_probes(sae_records(), train_attrs, catalog.n_attributes(), cfg_.probe, cfg_.jobs);
    probe::save_probes(trained, cfg_.probe, dir_ / "probe/probes.bin");
    probes_.reset();

    numerics::Tensor<float> scores({test_records().count(), trained.size()});
    json entries = json::array();
    for (std::size_t j = 0; j < trained.size(); ++j) {
      const auto& p = trained[j];
      const auto s = probe::probe_scores(p, test_records());
      for (std::size_t i = 0; i < s.size(); ++i) scores(i, j) = s[i];
      const auto labels = interpret::attribute_labels(test_attrs(), p.attribute);
      const auto train_labels = interpret::attribute_labels(train_attrs, p.attribute);
      entries.push_back({{"attribute", p.attribute},
                         {"name", catalog.attribute_names[static_cast<std::size_t>(p.attribute)]},
                         {"final_loss", p.final_loss},
                         {"train_accuracy", probe::accuracy(probe::probe_scores(p, sae_records()), train_labels)},
                         {"test_correlation", optional_json(interpret::point_biserial<float>(s, labels))},
                         {"test_roc_auc", optional_json(interpret::roc_auc<float>(s, labels))}});
    }
    const auto mats = interpret::build_matrices(scores, test_attrs(), catalog.n_attributes());
    const auto report = interpret::top_features(mats, catalog.attribute_names);
    write_text(dir_ / "probe/report.csv", interpret::report_csv(report));
    write_json(dir_ / "probe/summary.json",
               {{"mean_correlation", optional_json(report.mean_correlation)},
                {"mean_roc_auc", optional_json(report.mean_roc_auc)},
                {"probes", entries}});
    return {"probe/probes.bin", "probe/report.csv", "probe/summary.json"};
  }

  std::vector<std::string> stage_compare() {
    const auto& catalog = dataset().catalog;
    const auto& loaded = main_sae();
    std::vector<probe::Comparison> comparisons;
    json summary = json::array();
    const auto tops = top_features();
    for (const auto& p : probes()) {
      const auto it = std::find_if(tops.begin(), tops.end(), [&](const auto& t) { return t.first == p.attribute; });
      if (it == tops.end()) continue;
      auto c = probe::compare_steering(model(), loaded.model, loaded.stats, it->second, p, sae_records(), cases(),
                                       catalog, sweep_spec());
      summary.push_back({{"attribute", p.attribute},
                         {"name", catalog.attribute_names[static_cast<std::size_t>(p.attribute)]},
                         {"sae_feature", it->second},
                         {"sae_add", curve_summary(c.sae, p.attribute)},
                         {"probe_add", curve_summary(c.probe, p.attribute)}});
      comparisons.push_back(std::move(c));
    }
    write_text(dir_ / "compare/comparison.csv", probe::comparison_csv(comparisons, catalog.attribute_names));
    write_json(dir_ / "compare/summary.json", {{"protocol", "additive unit-variance"}, {"attributes", summary}});
    return {"compare/comparison.csv", "compare/summary.json"};
  }

  std::vector<std::string> stage_report() { return render_report(dir_); }

  std::vector<std::string> stage_bundle() {
    const auto& catalog = dataset().catalog;
    const auto& loaded = main_sae();
    fs::create_directories(dir_ / "bundle");
    for (const auto& [from, to] : std::vector<std::pair<std::string, std::string>>{
             {"model/model.bin", "bundle/model.bin"}, {"sae/sae.bin", "bundle/sae.bin"}, {"data/items.csv", "bundle/items.csv"}}) {
      fs::copy_file(dir_ / from, dir_ / to, fs::copy_options::overwrite_existing);
    }
    const json summary = read_json(dir_ / "interpret/summary.json");
    const json report = read_json(dir_ / "interpret/report.json");
    const auto codes = sae::encode_all(loaded.model, sae_records());
    json features = json::array();
    for (const auto& a : report.at("attributes")) {
      if (a.at("feature").is_null()) continue;
      const auto f = a.at("feature").get<std::size_t>();
      const auto q = quantiles(interpret::column(codes, f), {0.5, 0.9, 0.99});
      features.push_back({{"feature_id", f},
                          {"attribute_id", a.at("attribute")},
                          {"attribute", a.at("name")},
                          {"correlation", a.at("correlation")},
                          {"roc_auc", a.at("roc_auc")},
                          {"sensitivity", a.at("sensitivity")},
                          {"quantiles", {{"p50", q[0]}, {"p90", q[1]}, {"p99", q[2]}}}});
    }
    std::stable_sort(features.begin(), features.end(), [](const json& a, const json& b) {
      const double x = a.at("correlation").is_null() ? -2.0 : a.at("correlation").get<double>();
      const double y = b.at("correlation").is_null() ? -2.0 : b.at("correlation").get<double>();
      return x > y;
    });
    write_json(dir_ / "bundle/features.json", features);

    json demo = json::array();
    const auto& log = dataset().log;
    for (std::size_t i = 0; i < cases().size() && i < cfg_.demo_users; ++i) {
      const auto& c = cases()[i];
      std::vector<std::int64_t> history;
      for (auto item : c.history) history.push_back(catalog.original_item_ids[static_cast<std::size_t>(item)]);
      demo.push_back({{"user_id", log.original_user_ids[static_cast<std::size_t>(c.user)]}, {"history", history}});
    }
    write_json(dir_ / "bundle/users.json", demo);
    (void)summary;

    json files = json::object();
    for (const char* name : {"model.bin", "sae.bin", "items.csv", "features.json", "users.json"}) {
      files[name] = io::sha256_file(dir_ / "bundle" / name);
    }
    json stages = json::object();
    for (const auto& s : result_.manifest.stages) stages[s.name] = s.key;
    write_json(dir_ / "bundle/bundle.json", {{"tap_layer", cfg_.tap_layer}, {"files", files}, {"stages", stages}});
    return {"bundle/model.bin",     "bundle/sae.bin",    "bundle/items.csv",
            "bundle/features.json", "bundle/users.json", "bundle/bundle.json"};
  }

  ExperimentConfig cfg_;
  fs::path dir_;
  bool verbose_;
  std::optional<RunManifest> previous_;
  std::map<std::string, double> previous_build_;
  // compute time of sub-results a stage took from cache/
  double reused_seconds_ = 0.0;
  RunResult result_;

  std::optional<data::LoadedData> data_;
  std::optional<SplitUsers> users_;
  std::optional<rec::RecModel<float>> model_;
  std::optional<std::vector<steer::EvalCase>> cases_;
  std::optional<harvest::Dump> sae_dump_;
  std::optional<harvest::ActivationSet> sae_records_;
  std::optional<harvest::ActivationSet> test_records_;
  std::optional<std::vector<std::vector<int>>> test_attrs_;
  std::optional<sae::LoadedSae> sae_;
  std::optional<std::vector<probe::LinearProbe>> probes_;
  std::mutex sae_mutex_;
};

}  // namespace

RunResult run(const ExperimentConfig& config, const std::string& until, bool verbose) {
  Runner runner(config, verbose);
  return runner.run(until);
}

}  // namespace saerec::pipeline
