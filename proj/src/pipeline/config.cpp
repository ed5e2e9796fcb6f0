#include "saerec/pipeline/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "saerec/io/checksum.hpp"

namespace saerec::data {

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"n_users", s.n_users},
                     {"n_items", s.n_items},
                     {"n_attributes", s.n_attributes},
                     {"min_attributes_per_item", s.min_attributes_per_item},
                     {"max_attributes_per_item", s.max_attributes_per_item},
                     {"preference_concentration", s.preference_concentration},
                     {"min_length", s.min_length},
                     {"max_length", s.max_length},
                     {"persistence", s.persistence},
                     {"noise_rate", s.noise_rate},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  SyntheticSpec d = s;
  s.n_users = j.value("n_users", d.n_users);
  s.n_items = j.value("n_items", d.n_items);
  s.n_attributes = j.value("n_attributes", d.n_attributes);
  s.min_attributes_per_item = j.value("min_attributes_per_item", d.min_attributes_per_item);
  s.max_attributes_per_item = j.value("max_attributes_per_item", d.max_attributes_per_item);
  s.preference_concentration = j.value("preference_concentration", d.preference_concentration);
  s.min_length = j.value("min_length", d.min_length);
  s.max_length = j.value("max_length", d.max_length);
  s.persistence = j.value("persistence", d.persistence);
  s.noise_rate = j.value("noise_rate", d.noise_rate);
  s.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const SplitSpec& s) {
  j = nlohmann::json{
      {"test_user_fraction", s.test_user_fraction}, {"sae_user_fraction", s.sae_user_fraction}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SplitSpec& s) {
  SplitSpec d = s;
  s.test_user_fraction = j.value("test_user_fraction", d.test_user_fraction);
  s.sae_user_fraction = j.value("sae_user_fraction", d.sae_user_fraction);
  s.seed = j.value("seed", d.seed);
}

}  // namespace saerec::data

namespace saerec::rec {

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"lr", o.lr}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  TrainOptions d = o;
  o.epochs = j.value("epochs", d.epochs);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.lr = j.value("lr", d.lr);
  o.seed = j.value("seed", d.seed);
}

}  // namespace saerec::rec

namespace saerec::pipeline {

namespace {

using nlohmann::json;

// Reads `key` into `out` when present; otherwise leaves the derived default.
template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("config: " + what);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t global, const std::string& stage) {
  const std::string digest = io::sha256_hex(fmt::format("{}:{}", global, stage));
  return std::stoull(digest.substr(0, 12), nullptr, 16);
}

void ExperimentConfig::validate() const {
  require(jobs >= 1, "jobs must be >= 1");
  require(data.kind == "synthetic" || data.kind == "csv", "data.kind must be synthetic or csv");
  if (data.kind == "csv") {
    require(std::filesystem::exists(data.interactions_csv), "data.interactions_csv does not exist");
    require(std::filesystem::exists(data.items_csv), "data.items_csv does not exist");
  } else {
    data.synthetic.validate();
  }
  split.validate();
  rec::RecModelConfig m = model;
  m.n_items = 1;
  m.validate();
  require(tap_layer >= 1 && tap_layer <= model.n_layers, "tap_layer must be in [1, model.n_layers]");
  require(train.epochs >= 1 && train.batch_size >= 1 && train.lr > 0.0, "train options must be positive");
  sae::SaeConfig s = sae;
  s.input_dim = 1;
  s.validate();
  require(sae_sweep.repeats >= 1, "sae_sweep.repeats must be >= 1");
  for (double l : sae_table.l1_weights) require(l >= 0.0, "sae_table.l1_weights must be >= 0");
  for (double l : sae_sweep.l1_weights) require(l >= 0.0, "sae_sweep.l1_weights must be >= 0");
  for (auto d : sae_sweep.dict_sizes) require(d >= 1, "sae_sweep.dict_sizes must be positive");
  require(steer.k >= 1, "steer.k must be >= 1");
  probe.validate();
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  read(j, "seed", c.seed);
  c.data.synthetic.seed = derive_seed(c.seed, "data");
  c.split.seed = derive_seed(c.seed, "split");
  c.model.seed = derive_seed(c.seed, "model");
  c.train.seed = derive_seed(c.seed, "train");
  c.sae.seed = derive_seed(c.seed, "sae");
  c.probe.seed = derive_seed(c.seed, "probe");

  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  read(j, "jobs", c.jobs);
  read(j, "tap_layer", c.tap_layer);
  read(j, "demo_users", c.demo_users);
  if (j.contains("data")) {
    const json& d = j.at("data");
    read(d, "kind", c.data.kind);
    if (d.contains("synthetic")) data::from_json(d.at("synthetic"), c.data.synthetic);
    if (d.contains("interactions_csv")) c.data.interactions_csv = d.at("interactions_csv").get<std::string>();
    if (d.contains("items_csv")) c.data.items_csv = d.at("items_csv").get<std::string>();
  }
  if (j.contains("split")) data::from_json(j.at("split"), c.split);
  if (j.contains("model")) {
    json m = j.at("model");
    if (!m.contains("seed")) m["seed"] = c.model.seed;
    c.model = m.get<rec::RecModelConfig>();
  }
  if (j.contains("train")) rec::from_json(j.at("train"), c.train);
  if (j.contains("sae")) {
    json s = j.at("sae");
    if (!s.contains("seed")) s["seed"] = c.sae.seed;
    c.sae = s.get<sae::SaeConfig>();
  }
  if (j.contains("sae_table")) read(j.at("sae_table"), "l1_weights", c.sae_table.l1_weights);
  if (j.contains("sae_sweep")) {
    const json& s = j.at("sae_sweep");
    read(s, "l1_weights", c.sae_sweep.l1_weights);
    read(s, "dict_sizes", c.sae_sweep.dict_sizes);
    read(s, "repeats", c.sae_sweep.repeats);
  }
  if (j.contains("steer")) {
    read(j.at("steer"), "grid", c.steer.grid);
    read(j.at("steer"), "k", c.steer.k);
  }
  if (j.contains("probe")) probe::from_json(j.at("probe"), c.probe);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json model = c.model;
  model.erase("n_items");
  json sae = c.sae;
  sae.erase("input_dim");
  json data{{"kind", c.data.kind}};
  if (c.data.kind == "csv") {
    data["interactions_csv"] = c.data.interactions_csv.string();
    data["items_csv"] = c.data.items_csv.string();
  } else {
    data["synthetic"] = c.data.synthetic;
  }
  return json{{"seed", c.seed},
              {"output_dir", c.output_dir.string()},
              {"jobs", c.jobs},
              {"data", data},
              {"split", c.split},
              {"model", model},
              {"train", c.train},
              {"tap_layer", c.tap_layer},
              {"sae", sae},
              {"sae_table", {{"l1_weights", c.sae_table.l1_weights}}},
              {"sae_sweep",
               {{"l1_weights", c.sae_sweep.l1_weights},
                {"dict_sizes", c.sae_sweep.dict_sizes},
                {"repeats", c.sae_sweep.repeats}}},
              {"steer", {{"grid", c.steer.grid}, {"k", c.steer.k}}},
              {"probe", c.probe},
              {"demo_users", c.demo_users}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return config_from_json(json::parse(in));
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::stringstream parts(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(parts, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object()) (*node)[keys[i]] = json::object();
    node = &(*node)[keys[i]];
  }
  (*node)[keys.back()] = value;
}

}  // namespace saerec::pipeline
