#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "saerec/io/checksum.hpp"
#include "saerec/pipeline/report.hpp"
#include "saerec/pipeline/run.hpp"

using namespace saerec;
using namespace saerec::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_config_json() {
  return json::parse(R"({
    "seed": 7,
    "data": {"synthetic": {"n_users": 160, "n_items": 40, "n_attributes": 4, "min_length": 8, "max_length": 14}},
    "split": {"test_user_fraction": 0.2, "sae_user_fraction": 0.4},
    "model": {"n_layers": 2, "n_heads": 2, "hidden": 16, "max_len": 16},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.003},
    "sae": {"dict_size": 32, "epochs": 2, "l1_weight": 0.05},
    "sae_table": {"l1_weights": [0.01, 0.05]},
    "sae_sweep": {"l1_weights": [0.01], "dict_sizes": [16], "repeats": 2},
    "steer": {"grid": [-2, 0, 2], "k": 5},
    "probe": {"epochs": 2},
    "demo_users": 4
  })");
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("saerec_pipeline_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny(const fs::path& dir) {
  auto c = config_from_json(tiny_config_json());
  c.output_dir = dir;
  return c;
}

bool cached(const RunResult& r, const std::string& stage) {
  for (const auto& l : r.log) {
    if (l.name == stage) return l.cached;
  }
  FAIL("stage not run: " << stage);
  return false;
}

}  // namespace

TEST_CASE("full run, rerun from cache, and partial invalidation") {
  const auto dir = fresh_dir("cache");
  auto cfg = tiny(dir);
  auto first = run(cfg);
  REQUIRE(first.log.size() == stage_names().size());
  for (const auto& l : first.log) CHECK_FALSE(l.cached);
  for (const char* f : {"bundle/model.bin", "bundle/sae.bin", "bundle/features.json", "bundle/users.json",
                        "report/report.md", "sae_grid/table.csv", "compare/comparison.csv", "steer/summary.json"}) {
    CHECK(fs::exists(dir / f));
  }
  const std::string manifest = slurp(dir / "manifest.json");

  auto second = run(cfg);
  for (const auto& l : second.log) CHECK(l.cached);
  CHECK(slurp(dir / "manifest.json") == manifest);

  // a changed SAE setting leaves everything upstream of the SAE alone
  cfg.sae.l1_weight = 0.01;
  auto third = run(cfg);
  for (const char* s : {"data", "split", "model", "harvest", "probe"}) CHECK(cached(third, s));
  for (const char* s : {"sae", "sae_grid", "interpret", "steer", "compare", "report", "bundle"}) {
    CHECK_FALSE(cached(third, s));
  }

  // a tampered artifact is detected and rebuilt
  { std::ofstream(dir / "split/split.json", std::ios::app) << " "; }
  auto fourth = run(cfg);
  CHECK(cached(fourth, "data"));
  CHECK_FALSE(cached(fourth, "split"));
  CHECK(slurp(dir / "manifest.json") == slurp(dir / "manifest.json"));
  fs::remove_all(dir);
}

TEST_CASE("the manifest does not depend on the directory or job count") {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  auto ca = tiny(a), cb = tiny(b);
  cb.jobs = 2;
  run(ca, "sae_grid");
  run(cb, "sae_grid");
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "sae_grid/points.json") == slurp(b / "sae_grid/points.json"));
  CHECK(read_manifest(a).stages.back().name == "sae_grid");
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("stage errors are tagged") {
  const auto dir = fresh_dir("errors");
  auto cfg = tiny(dir);
  cfg.tap_layer = 5;
  try {
    run(cfg, "model");
    FAIL("expected an error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "config");
    CHECK(std::string(e.what()).find("tap_layer") != std::string::npos);
  }
  cfg = tiny(dir);
  cfg.data.kind = "csv";
  cfg.data.interactions_csv = dir / "nope.csv";
  CHECK_THROWS_AS(run(cfg, "data"), StageError);
  CHECK_THROWS_AS(run(tiny(dir), "nonsense"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("config round trip, seed derivation and overrides") {
  auto c = config_from_json(tiny_config_json());
  CHECK(c.model.seed == derive_seed(7, "model"));
  CHECK(c.sae.seed == derive_seed(7, "sae"));
  CHECK(c.sae.seed != c.model.seed);
  CHECK(derive_seed(7, "sae") == derive_seed(7, "sae"));

  const json j = config_to_json(c);
  CHECK(config_to_json(config_from_json(j)) == j);
  CHECK_FALSE(j.at("model").contains("n_items"));

  json doc = tiny_config_json();
  apply_override(doc, "sae.l1_weight=0.3");
  apply_override(doc, "data.kind=csv");
  apply_override(doc, "steer.grid=[1,2]");
  apply_override(doc, "new.nested.key=true");
  CHECK(doc["sae"]["l1_weight"] == 0.3);
  CHECK(doc["sae"]["dict_size"] == 32);
  CHECK(doc["data"]["kind"] == "csv");
  CHECK(doc["steer"]["grid"] == json::array({1, 2}));
  CHECK(doc["new"]["nested"]["key"] == true);
  CHECK_THROWS_AS(apply_override(doc, "no_equals"), std::invalid_argument);

  json bad = tiny_config_json();
  bad["jobs"] = 0;
  CHECK_THROWS_AS(config_from_json(bad).validate(), std::invalid_argument);
}

TEST_CASE("sweep report statistics and missing points") {
  SaeSweepSpec spec;
  spec.l1_weights = {0.1, 1.0};
  spec.dict_sizes = {8};
  spec.repeats = 2;
  auto point = [](double l1, std::size_t dict, std::size_t repeat, std::optional<double> corr) {
    GridPoint p;
    p.l1_weight = l1;
    p.dict_size = dict;
    p.repeat = repeat;
    p.mean_correlation = corr;
    return p;
  };
  std::vector<GridPoint> pts{point(0.1, 16, 0, 0.4), point(0.1, 16, 1, 0.6), point(1.0, 16, 0, 0.2),
                             point(1.0, 16, 1, std::nullopt), point(0.1, 8, 0, 0.3)};
  auto r = sweep_report(pts, spec, 0.1, 16);
  REQUIRE(r.by_l1.size() == 2);
  CHECK(r.by_l1[0].mean == doctest::Approx(0.5));
  CHECK(r.by_l1[0].std == doctest::Approx(0.1));
  CHECK(r.by_l1[0].n == 2);
  CHECK(r.by_l1[1].n == 1);
  CHECK(r.by_l1[1].std == 0.0);
  REQUIRE(r.by_dict.size() == 1);
  CHECK(r.by_dict[0].mean == doctest::Approx(0.3));
  CHECK(r.missing.size() == 2);

  spec.repeats = 1;
  auto single = sweep_report(pts, spec, 0.1, 16);
  CHECK(single.by_l1[0].std == 0.0);
  CHECK(single.by_l1[0].mean == doctest::Approx(0.4));
  CHECK(sweep_csv(single.by_l1, "l1_weight").rfind("l1_weight,mean_correlation,std,repeats\n0.1,0.400000,0.000000,1\n", 0) ==
        0);

  auto rt = grid_point_from_json(to_json(pts[3]));
  CHECK_FALSE(rt.mean_correlation.has_value());
  CHECK(rt.l1_weight == 1.0);
}

TEST_CASE("svg charts are well formed") {
  auto svg = svg_line_chart("a <b>", "x", "y", {{"s1", {0, 1, 2}, {1, 3, 2}}, {"flat", {0, 1}, {5, 5}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("a &lt;b&gt;") != std::string::npos);
  CHECK(svg.find("nan") == std::string::npos);
  std::size_t lines = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(svg_line_chart("empty", "x", "y", {}).find("</svg>") != std::string::npos);
}
