#include "saerec/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "saerec/interpret.hpp"
#include "saerec/numerics/adam.hpp"
#include "saerec/numerics/container.hpp"
#include "saerec/numerics/ops.hpp"
#include "saerec/util/parallel.hpp"

namespace saerec::probe {

namespace ops = saerec::numerics;

void ProbeConfig::validate() const {
  if (!(l2_weight >= 0.0)) throw std::invalid_argument("probe config: l2_weight must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("probe config: lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("probe config: batch_size must be positive");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"l2_weight", c.l2_weight},
                     {"epochs", c.epochs},
                     {"lr", c.lr},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.l2_weight = j.value("l2_weight", d.l2_weight);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
}

template <typename T>
Var record_probe_loss(numerics::Tape<T>& tape, Var weight, Var bias, Var x, std::span<const T> labels, T l2_weight) {
  Var logits = ops::add_bias(tape, ops::matmul(tape, x, weight), bias);
  Var data = ops::logistic_loss(tape, logits, labels);
  return ops::add(tape, data, ops::scale(tape, ops::l2_norm_sq(tape, weight), l2_weight));
}

LinearProbe train_probe(const harvest::ActivationSet& records, std::span<const std::uint8_t> labels, int attribute,
                        const ProbeConfig& config) {
  config.validate();
  if (labels.size() != records.count()) throw std::invalid_argument("train_probe: one label per record required");
  const auto positives = std::count_if(labels.begin(), labels.end(), [](std::uint8_t y) { return y != 0; });
  if (positives == 0 || static_cast<std::size_t>(positives) == labels.size()) {
    throw std::invalid_argument(fmt::format("train_probe: attribute {} has a single class", attribute));
  }
  const std::size_t n = records.hidden;
  Tensor<float> weight({n, 1});
  Tensor<float> bias({1});
  std::vector<Tensor<float>*> params{&weight, &bias};
  auto state = numerics::make_adam_state<float>(std::span<const Tensor<float>* const>(params.data(), params.size()),
                                                numerics::AdamOptions{.lr = config.lr});
  std::mt19937_64 rng(config.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(attribute + 1)));
  std::vector<std::size_t> order(records.count());
  std::iota(order.begin(), order.end(), 0);

  double epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t rows = std::min(config.batch_size, order.size() - start);
      Tensor<float> x({rows, n});
      std::vector<float> y(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        auto src = records.row(order[start + r]);
        std::copy(src.begin(), src.end(), x.row(r).begin());
        y[r] = labels[order[start + r]] ? 1.0f : 0.0f;
      }
      numerics::Tape<float> tape;
      Var w = tape.parameter_view(weight);
      Var b = tape.parameter_view(bias);
      Var loss = record_probe_loss<float>(tape, w, b, tape.constant(std::move(x)), y,
                                          static_cast<float>(config.l2_weight));
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) throw std::runtime_error(fmt::format("probe {} diverged at epoch {}", attribute, epoch));
      tape.backward(loss);
      std::vector<const Tensor<float>*> grads{&tape.grad_slot(w), &tape.grad_slot(b)};
      numerics::adam_step<float>(params, grads, state);
      total += value * static_cast<double>(rows);
    }
    epoch_loss = total / static_cast<double>(order.size());
  }

  LinearProbe p;
  p.attribute = attribute;
  p.weight.assign(weight.values().begin(), weight.values().end());
  p.bias = bias.values()[0];
  p.final_loss = epoch_loss;
  p.n_records = records.count();
  p.direction = steer::unit_variance_direction(p.weight, records);
  return p;
}

std::vector<LinearProbe> train_probes(const harvest::ActivationSet& records,
                                      const std::vector<std::vector<int>>& record_attrs, std::size_t n_attributes,
                                      const ProbeConfig& config, std::size_t threads) {
  std::vector<std::optional<LinearProbe>> slots(n_attributes);
  util::parallel_for(n_attributes, threads, [&](std::size_t a) {
    const auto labels = interpret::attribute_labels(record_attrs, static_cast<int>(a));
    const auto pos = std::count(labels.begin(), labels.end(), std::uint8_t{1});
    if (pos == 0 || static_cast<std::size_t>(pos) == labels.size()) return;
    slots[a] = train_probe(records, labels, static_cast<int>(a), config);
  });
  std::vector<LinearProbe> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

std::vector<float> probe_scores(const LinearProbe& probe, const harvest::ActivationSet& records) {
  if (probe.weight.size() != records.hidden) throw numerics::ShapeError("probe_scores: width mismatch");
  std::vector<float> out(records.count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto x = records.row(i);
    double z = probe.bias;
    for (std::size_t d = 0; d < x.size(); ++d) z += static_cast<double>(x[d]) * probe.weight[d];
    out[i] = static_cast<float>(z);
  }
  return out;
}

double accuracy(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hit += (scores[i] > 0.0f) == (labels[i] != 0);
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

rec::ActivationEdit<float> probe_edit(const LinearProbe& probe, double alpha, const harvest::NormStats& stats) {
  if (std::all_of(probe.direction.begin(), probe.direction.end(), [](float v) { return v == 0.0f; })) {
    throw std::invalid_argument(fmt::format("probe {} has a zero steering direction", probe.attribute));
  }
  return steer::direction_edit(probe.direction, alpha, stats);
}

Comparison compare_steering(const rec::RecModel<float>& model, const sae::SaeModel<float>& sae,
                            const harvest::NormStats& stats, std::size_t sae_feature, const LinearProbe& probe,
                            const harvest::ActivationSet& records, std::span<const steer::EvalCase> cases,
                            const data::ItemCatalog& catalog, const steer::SweepSpec& spec) {
  Comparison c;
  c.attribute = probe.attribute;
  c.sae_feature = sae_feature;
  const auto sae_dir = steer::unit_variance_direction(steer::decoder_direction(sae, sae_feature), records);
  c.sae = steer::direction_sweep(model, sae_dir, stats, cases, catalog, spec);
  c.sae.method = "sae_add";
  c.sae.feature = sae_feature;
  c.sae.attribute = probe.attribute;
  c.probe = steer::direction_sweep(model, probe.direction, stats, cases, catalog, spec);
  c.probe.method = "probe_add";
  c.probe.attribute = probe.attribute;
  return c;
}

std::string comparison_csv(const std::vector<Comparison>& comparisons, const std::vector<std::string>& names) {
  std::string out = "method,v,attribute,proportion,ndcg,coverage,diversity\n";
  auto row = [&](const std::string& method, const std::string& v, int attribute, const steer::SweepPoint& p) {
    const auto a = static_cast<std::size_t>(attribute);
    const std::string name = a < names.size() ? names[a] : std::to_string(attribute);
    out += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f}\n", method, v, name, p.proportions.at(a), p.metrics.ndcg,
                       p.metrics.coverage, p.metrics.diversity);
  };
  for (const auto& c : comparisons) {
    for (const auto* r : {&c.sae, &c.probe}) {
      row(r->method, "baseline", c.attribute, r->baseline);
      for (const auto& p : r->points) row(r->method, fmt::format("{:g}", p.v), c.attribute, p);
    }
  }
  return out;
}

std::string save_probes(const std::vector<LinearProbe>& probes, const ProbeConfig& config,
                        const std::filesystem::path& path) {
  numerics::TensorContainer c;
  c.header["kind"] = "probes";
  c.header["config"] = config;
  auto meta = nlohmann::json::array();
  for (const auto& p : probes) {
    meta.push_back({{"attribute", p.attribute}, {"final_loss", p.final_loss}, {"n_records", p.n_records}});
    const std::string key = std::to_string(p.attribute);
    c.put("weight_" + key, Tensor<float>::vector(p.weight));
    c.put("bias_" + key, Tensor<float>::vector({p.bias}));
    c.put("direction_" + key, Tensor<float>::vector(p.direction));
  }
  c.header["probes"] = meta;
  return c.save(path);
}

std::vector<LinearProbe> load_probes(const std::filesystem::path& path) {
  auto c = numerics::TensorContainer::load(path);
  if (c.header.value("kind", "") != "probes") throw std::runtime_error(path.string() + " is not a probe checkpoint");
  std::vector<LinearProbe> out;
  for (const auto& m : c.header.at("probes")) {
    LinearProbe p;
    p.attribute = m.at("attribute").get<int>();
    p.final_loss = m.at("final_loss").get<double>();
    p.n_records = m.at("n_records").get<std::size_t>();
    const std::string key = std::to_string(p.attribute);
    auto w = c.get<float>("weight_" + key);
    auto d = c.get<float>("direction_" + key);
    p.weight.assign(w.values().begin(), w.values().end());
    p.direction.assign(d.values().begin(), d.values().end());
    p.bias = c.get<float>("bias_" + key).values()[0];
    out.push_back(std::move(p));
  }
  return out;
}

template Var record_probe_loss(numerics::Tape<float>&, Var, Var, Var, std::span<const float>, float);
template Var record_probe_loss(numerics::Tape<double>&, Var, Var, Var, std::span<const double>, double);

}  // namespace saerec::probe
