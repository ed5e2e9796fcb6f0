#include "saerec/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "saerec/numerics/adam.hpp"
#include "saerec/numerics/container.hpp"
#include "saerec/numerics/ops.hpp"

namespace saerec::sae {

namespace ops = saerec::numerics;

void SaeConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("sae config: input_dim must be positive");
  if (dict_size == 0) throw std::invalid_argument("sae config: dict_size must be positive");
  if (!(l1_weight >= 0.0)) throw std::invalid_argument("sae config: l1_weight must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("sae config: lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("sae config: batch_size must be positive");
}

void to_json(nlohmann::json& j, const SaeConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim}, {"dict_size", c.dict_size}, {"l1_weight", c.l1_weight},
                     {"lr", c.lr},               {"epochs", c.epochs},       {"batch_size", c.batch_size},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SaeConfig& c) {
  SaeConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.dict_size = j.value("dict_size", d.dict_size);
  c.l1_weight = j.value("l1_weight", d.l1_weight);
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
}

template <typename T>
SaeModel<T> SaeModel<T>::init(const SaeConfig& config) {
  config.validate();
  const std::size_t n = config.input_dim;
  const std::size_t m = config.dict_size;
  SaeModel<T> s;
  s.config = config;
  s.decoder = Tensor<T>({n, m});
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (T& v : s.decoder.values()) v = static_cast<T>(g(rng));
  s.normalize_decoder();
  s.encoder = ops::transposed(s.decoder);
  s.encoder_bias = Tensor<T>({m});
  s.decoder_bias = Tensor<T>({n});
  return s;
}

template <typename T>
std::vector<T> SaeModel<T>::encode(std::span<const T> x) const {
  if (x.size() != input_dim()) {
    throw numerics::ShapeError("sae encode: expected " + std::to_string(input_dim()) + " inputs, got " +
                               std::to_string(x.size()));
  }
  std::vector<T> h(dict_size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    T acc = encoder_bias[j];
    auto w = encoder.row(j);
    for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
    h[j] = std::max(acc, T{0});
  }
  return h;
}

template <typename T>
std::vector<T> SaeModel<T>::decode(std::span<const T> h) const {
  if (h.size() != dict_size()) {
    throw numerics::ShapeError("sae decode: expected " + std::to_string(dict_size()) + " codes, got " +
                               std::to_string(h.size()));
  }
  std::vector<T> x(input_dim());
  for (std::size_t i = 0; i < x.size(); ++i) {
    T acc = decoder_bias[i];
    auto w = decoder.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) acc += w[j] * h[j];
    x[i] = acc;
  }
  return x;
}

template <typename T>
Tensor<T> SaeModel<T>::encode_batch(const Tensor<T>& x) const {
  if (x.cols() != input_dim()) throw numerics::ShapeError("sae encode_batch: input width mismatch");
  Tensor<T> h = ops::matmul_transposed(x, encoder);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    auto row = h.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(row[j] + encoder_bias[j], T{0});
  }
  return h;
}

template <typename T>
Tensor<T> SaeModel<T>::decode_batch(const Tensor<T>& h) const {
  if (h.cols() != dict_size()) throw numerics::ShapeError("sae decode_batch: code width mismatch");
  Tensor<T> x = ops::matmul_transposed(h, decoder);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] += decoder_bias[i];
  }
  return x;
}

template <typename T>
void SaeModel<T>::normalize_decoder() {
  const std::size_t n = decoder.rows(), m = decoder.cols();
  std::vector<double> norm(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = decoder.row(i);
    for (std::size_t j = 0; j < m; ++j) norm[j] += static_cast<double>(row[j]) * row[j];
  }
  for (double& v : norm) v = v > 0.0 ? 1.0 / std::sqrt(v) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = decoder.row(i);
    for (std::size_t j = 0; j < m; ++j) row[j] = static_cast<T>(row[j] * norm[j]);
  }
}

template <typename T>
double SaeModel<T>::decoder_norm_error() const {
  const std::size_t n = decoder.rows(), m = decoder.cols();
  double worst = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(decoder(i, j)) * decoder(i, j);
    worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
  }
  return worst;
}

template <typename T>
Var record_sae_loss(Tape<T>& tape, const SaeVars& v, Var x, T l1_weight) {
  const T batch = static_cast<T>(tape.value(x).rows());
  Var h = ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, x, ops::transpose(tape, v.encoder)), v.encoder_bias));
  Var x_hat = ops::add_bias(tape, ops::matmul(tape, h, ops::transpose(tape, v.decoder)), v.decoder_bias);
  Var recon = ops::l2_norm_sq(tape, ops::sub(tape, x, x_hat));
  Var sparsity = ops::l1_norm(tape, h);
  return ops::scale(tape, ops::add(tape, recon, ops::scale(tape, sparsity, l1_weight)), T{1} / batch);
}

template <typename T>
void project_decoder_gradient(const Tensor<T>& decoder, Tensor<T>& grad) {
  numerics::require_same_shape(decoder, grad, "project_decoder_gradient");
  const std::size_t n = decoder.rows(), m = decoder.cols();
  std::vector<T> dot(m, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    auto d = decoder.row(i);
    auto g = grad.row(i);
    for (std::size_t j = 0; j < m; ++j) dot[j] += d[j] * g[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto d = decoder.row(i);
    auto g = grad.row(i);
    for (std::size_t j = 0; j < m; ++j) g[j] -= dot[j] * d[j];
  }
}

SaeTrainReport train_sae(SaeModel<float>& model, const harvest::ActivationSet& records, bool verbose) {
  const SaeConfig& cfg = model.config;
  if (records.count() == 0) throw std::invalid_argument("train_sae: no records");
  if (records.hidden != model.input_dim()) throw numerics::ShapeError("train_sae: record width mismatch");
  const std::size_t n = records.hidden;

  std::vector<Tensor<float>*> params{&model.encoder, &model.encoder_bias, &model.decoder, &model.decoder_bias};
  auto state = numerics::make_adam_state<float>(std::span<const Tensor<float>* const>(params.data(), params.size()),
                                                numerics::AdamOptions{.lr = cfg.lr});
  std::mt19937_64 rng(cfg.seed ^ 0x5ae5ae5aeULL);
  std::vector<std::size_t> order(records.count());
  std::iota(order.begin(), order.end(), 0);

  SaeTrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t rows = std::min(cfg.batch_size, order.size() - start);
      Tensor<float> x({rows, n});
      for (std::size_t r = 0; r < rows; ++r) {
        auto src = records.row(order[start + r]);
        std::copy(src.begin(), src.end(), x.row(r).begin());
      }
      Tape<float> tape;
      SaeVars v{tape.parameter_view(model.encoder), tape.parameter_view(model.encoder_bias),
                tape.parameter_view(model.decoder), tape.parameter_view(model.decoder_bias)};
      Var loss = record_sae_loss(tape, v, tape.constant(std::move(x)), static_cast<float>(cfg.l1_weight));
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "sae training diverged: loss " << value << " at epoch " << epoch << ", step " << report.steps;
        throw SaeDivergenceError(msg.str());
      }
      tape.backward(loss);
      project_decoder_gradient(model.decoder, tape.grad_slot(v.decoder));
      std::vector<const Tensor<float>*> grads{&tape.grad_slot(v.encoder), &tape.grad_slot(v.encoder_bias),
                                              &tape.grad_slot(v.decoder), &tape.grad_slot(v.decoder_bias)};
      numerics::adam_step<float>(params, grads, state);
      model.normalize_decoder();
      ++report.steps;
      total += value * static_cast<double>(rows);
    }
    report.epoch_loss.push_back(total / static_cast<double>(order.size()));
    if (verbose) std::fprintf(stderr, "[train-sae] epoch %zu loss %.5f\n", epoch + 1, report.epoch_loss.back());
  }
  return report;
}

ReconstructionMetrics reconstruction_metrics(std::span<const float> x, std::span<const float> x_hat,
                                             std::span<const float> codes, std::size_t dict_size) {
  if (x.size() != x_hat.size() || x.empty()) throw std::invalid_argument("reconstruction_metrics: size mismatch");
  double sum_x = 0.0, sum_r = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sum_x += x[i];
    sum_r += x[i] - x_hat[i];
  }
  const double count = static_cast<double>(x.size());
  const double mean_x = sum_x / count, mean_r = sum_r / count;
  double var_x = 0.0, var_r = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = static_cast<double>(x[i]) - x_hat[i];
    sq += r * r;
    var_r += (r - mean_r) * (r - mean_r);
    var_x += (x[i] - mean_x) * (x[i] - mean_x);
  }
  ReconstructionMetrics m;
  m.rmse = std::sqrt(sq / count);
  m.explained_variance = var_x > 0.0 ? 1.0 - var_r / var_x : (var_r == 0.0 ? 1.0 : 0.0);
  if (dict_size > 0 && !codes.empty()) {
    std::size_t active = 0;
    for (float h : codes) active += h > 0.0f;
    m.l0 = static_cast<double>(active) / static_cast<double>(codes.size() / dict_size);
  }
  return m;
}

Tensor<float> encode_all(const SaeModel<float>& model, const harvest::ActivationSet& records) {
  if (records.count() == 0) throw std::invalid_argument("encode_all: no records");
  Tensor<float> x({records.count(), records.hidden}, records.values);
  return model.encode_batch(x);
}

ReconstructionMetrics reconstruction_metrics(const SaeModel<float>& model, const harvest::ActivationSet& records) {
  if (records.count() == 0) throw std::invalid_argument("reconstruction_metrics: no records");
  Tensor<float> h = encode_all(model, records);
  Tensor<float> x_hat = model.decode_batch(h);
  return reconstruction_metrics(records.values, x_hat.values(), h.values(), model.dict_size());
}

std::string save_sae(const SaeModel<float>& model, const std::filesystem::path& path, const std::string& dump_checksum,
                     const harvest::NormStats& stats) {
  numerics::TensorContainer c;
  c.header["kind"] = "sae";
  c.header["config"] = model.config;
  c.header["dump_checksum"] = dump_checksum;
  c.put("encoder", model.encoder);
  c.put("encoder_bias", model.encoder_bias);
  c.put("decoder", model.decoder);
  c.put("decoder_bias", model.decoder_bias);
  c.put("norm_mean", Tensor<float>::vector(stats.mean));
  c.put("norm_std", Tensor<float>::vector(stats.std));
  return c.save(path);
}

LoadedSae load_sae(const std::filesystem::path& path) {
  auto c = numerics::TensorContainer::load(path);
  if (c.header.value("kind", "") != "sae") throw std::runtime_error(path.string() + " is not an SAE checkpoint");
  LoadedSae out;
  out.model.config = c.header.at("config").get<SaeConfig>();
  out.model.encoder = c.get<float>("encoder");
  out.model.encoder_bias = c.get<float>("encoder_bias");
  out.model.decoder = c.get<float>("decoder");
  out.model.decoder_bias = c.get<float>("decoder_bias");
  auto mean = c.get<float>("norm_mean");
  auto sd = c.get<float>("norm_std");
  out.stats.mean.assign(mean.values().begin(), mean.values().end());
  out.stats.std.assign(sd.values().begin(), sd.values().end());
  out.dump_checksum = c.header.value("dump_checksum", "");
  return out;
}

template struct SaeModel<float>;
template struct SaeModel<double>;
template Var record_sae_loss(Tape<float>&, const SaeVars&, Var, float);
template Var record_sae_loss(Tape<double>&, const SaeVars&, Var, double);
template void project_decoder_gradient(const Tensor<float>&, Tensor<float>&);
template void project_decoder_gradient(const Tensor<double>&, Tensor<double>&);

}  // namespace saerec::sae
