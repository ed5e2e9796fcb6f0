#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/harvest.hpp"
#include "saerec/numerics/tape.hpp"
#include "saerec/numerics/tensor.hpp"

namespace saerec::sae {

using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct SaeConfig {
  std::size_t input_dim = 0;
  std::size_t dict_size = 2048;
  double l1_weight = 0.1;
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SaeConfig& c);
void from_json(const nlohmann::json& j, SaeConfig& c);

/// h = relu(W x + b), x_hat = W' h + b'. Inputs are normalized activations.
template <typename T>
struct SaeModel {
  SaeConfig config;
  Tensor<T> encoder;       // W  [dict x input]
  Tensor<T> encoder_bias;  // b  [dict]
  Tensor<T> decoder;       // W' [input x dict], unit-norm columns
  Tensor<T> decoder_bias;  // b' [input]

  /// Random unit-norm decoder columns, encoder = decoder transposed, zero biases.
  static SaeModel init(const SaeConfig& config);

  std::size_t input_dim() const { return decoder.rows(); }
  std::size_t dict_size() const { return encoder.rows(); }

  std::vector<T> encode(std::span<const T> x) const;
  std::vector<T> decode(std::span<const T> h) const;
  /// Row-wise over a [batch x input] / [batch x dict] matrix.
  Tensor<T> encode_batch(const Tensor<T>& x) const;
  Tensor<T> decode_batch(const Tensor<T>& h) const;

  void normalize_decoder();
  /// Largest | ||column|| - 1 | over decoder columns.
  double decoder_norm_error() const;

  template <typename U>
  SaeModel<U> cast() const {
    return SaeModel<U>{config, encoder.template cast<U>(), encoder_bias.template cast<U>(), decoder.template cast<U>(),
                       decoder_bias.template cast<U>()};
  }
};

struct SaeVars {
  Var encoder, encoder_bias, decoder, decoder_bias;
};

/// Mean over the batch of ||x - x_hat||^2 + l1_weight * ||h||_1.
template <typename T>
Var record_sae_loss(Tape<T>& tape, const SaeVars& vars, Var x, T l1_weight);

/// Removes from each decoder-column gradient its component along the column.
template <typename T>
void project_decoder_gradient(const Tensor<T>& decoder, Tensor<T>& grad);

struct SaeTrainReport {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

class SaeDivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam over shuffled minibatches of normalized records. After every step the
/// decoder columns are renormalized to unit length.
SaeTrainReport train_sae(SaeModel<float>& model, const harvest::ActivationSet& normalized_records,
                         bool verbose = false);

struct ReconstructionMetrics {
  double rmse = 0.0;
  double explained_variance = 0.0;
  double l0 = 0.0;
};

ReconstructionMetrics reconstruction_metrics(const SaeModel<float>& model, const harvest::ActivationSet& normalized_records);

/// Metrics from given inputs, reconstructions and codes (all row-major, equal row counts).
ReconstructionMetrics reconstruction_metrics(std::span<const float> x, std::span<const float> x_hat,
                                             std::span<const float> codes, std::size_t dict_size);

/// Feature activations [records x dict] of normalized records.
Tensor<float> encode_all(const SaeModel<float>& model, const harvest::ActivationSet& normalized_records);

/// Checkpoint with the config, the dump checksum and the norm stats in the header.
std::string save_sae(const SaeModel<float>& model, const std::filesystem::path& path, const std::string& dump_checksum,
                     const harvest::NormStats& stats);

struct LoadedSae {
  SaeModel<float> model;
  harvest::NormStats stats;
  std::string dump_checksum;
};
LoadedSae load_sae(const std::filesystem::path& path);

}  // namespace saerec::sae
