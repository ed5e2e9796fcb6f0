#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "saerec/dataset.hpp"
#include "saerec/numerics/ops.hpp"
#include "saerec/numerics/tape.hpp"
#include "saerec/numerics/tensor.hpp"

namespace saerec::rec {

using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

struct RecModelConfig {
  std::size_t n_items = 0;
  std::size_t n_layers = 3;
  std::size_t n_heads = 2;
  std::size_t hidden = 64;
  std::size_t max_len = 50;
  std::size_t mlp_expansion = 4;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const RecModelConfig& c);
void from_json(const nlohmann::json& j, RecModelConfig& c);

/// Parameters of one pre-norm transformer block. X is a tensor type or a
/// tape handle, so the same layout serves storage and recording.
template <typename X>
struct BlockSlots {
  X ln1_gain, ln1_bias;
  X qkv_weight, qkv_bias;
  X proj_weight, proj_bias;
  X ln2_gain, ln2_bias;
  X fc1_weight, fc1_bias;
  X fc2_weight, fc2_bias;

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + "ln1_gain", self.ln1_gain);
    fn(prefix + "ln1_bias", self.ln1_bias);
    fn(prefix + "qkv_weight", self.qkv_weight);
    fn(prefix + "qkv_bias", self.qkv_bias);
    fn(prefix + "proj_weight", self.proj_weight);
    fn(prefix + "proj_bias", self.proj_bias);
    fn(prefix + "ln2_gain", self.ln2_gain);
    fn(prefix + "ln2_bias", self.ln2_bias);
    fn(prefix + "fc1_weight", self.fc1_weight);
    fn(prefix + "fc1_bias", self.fc1_bias);
    fn(prefix + "fc2_weight", self.fc2_weight);
    fn(prefix + "fc2_bias", self.fc2_bias);
  }
};

template <typename X>
struct ModelSlots {
  X item_embedding;      // [(n_items + 1) x hidden], row 0 is padding
  X position_embedding;  // [max_len x hidden]
  std::vector<BlockSlots<X>> blocks;
  X final_gain, final_bias;
  X output_weight;  // [hidden x n_items]
  X output_bias;    // [n_items]

  /// Calls fn(name, slot) for every parameter in a fixed order.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(std::string("item_embedding"), self.item_embedding);
    fn(std::string("position_embedding"), self.position_embedding);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      BlockSlots<X>::visit(self.blocks[i], "blocks." + std::to_string(i) + ".", fn);
    }
    fn(std::string("final_gain"), self.final_gain);
    fn(std::string("final_bias"), self.final_bias);
    fn(std::string("output_weight"), self.output_weight);
    fn(std::string("output_bias"), self.output_bias);
  }
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }
};

/// Causal-attention next-item model.
template <typename T>
struct RecModel {
  RecModelConfig config;
  ModelSlots<Tensor<T>> params;

  /// Fresh model with GPT-style Gaussian initialization from config.seed.
  static RecModel init(const RecModelConfig& config);

  std::size_t parameter_count() const;

  template <typename U>
  RecModel<U> cast() const {
    RecModel<U> out;
    out.config = config;
    std::vector<Tensor<U>> flat;
    params.for_each([&](const std::string&, const Tensor<T>& t) { flat.push_back(t.template cast<U>()); });
    out.params = slots_from_list<Tensor<U>>(config.n_layers, std::move(flat));
    return out;
  }

  template <typename X>
  static ModelSlots<X> slots_from_list(std::size_t n_layers, std::vector<X> flat) {
    ModelSlots<X> slots;
    slots.blocks.resize(n_layers);
    std::size_t i = 0;
    slots.for_each([&](const std::string&, X& slot) { slot = std::move(flat.at(i++)); });
    return slots;
  }
};

/// Replaces a block output [positions x hidden] with a new value of the same shape.
template <typename T>
using ActivationEdit = std::function<Tensor<T>(const Tensor<T>&)>;

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;  // [positions x n_items], or [1 x n_items] when only the last position was requested
  Tensor<T> hidden;  // tap-layer output before any edit, [positions x hidden]
};

/// A packed batch of sequences for one recorded pass.
struct PackedBatch {
  std::vector<std::size_t> tokens;     // item id + 1
  std::vector<std::size_t> positions;  // position within the sequence
  std::vector<numerics::Segment> segments;
  std::vector<int> targets;  // next item id per row, -1 where there is none
};

/// Inputs are every item but the last; targets are shifted by one.
PackedBatch pack_training_batch(std::span<const std::vector<std::int64_t>> sequences, std::size_t max_len);

template <typename T>
ModelSlots<Var> bind_parameters(Tape<T>& tape, const RecModel<T>& model, bool trainable);

struct RecordedPass {
  Var logits;
  Var hidden;
};

/// Records a forward pass over a packed batch. tap_layer is 1-based; 0 means
/// no tap. When `last_only`, logits are produced for each segment's last row.
template <typename T>
RecordedPass record_forward(Tape<T>& tape, const RecModelConfig& config, const ModelSlots<Var>& params,
                            const PackedBatch& batch, std::size_t tap_layer, const ActivationEdit<T>* edit,
                            bool last_only, std::mt19937_64* dropout_rng);

/// Mean next-item cross-entropy of a packed batch.
template <typename T>
Var record_loss(Tape<T>& tape, const RecModelConfig& config, const ModelSlots<Var>& params, const PackedBatch& batch,
                std::mt19937_64* dropout_rng);

/// Eval-mode forward over one sequence of dense item ids.
template <typename T>
ForwardOutput<T> forward(const RecModel<T>& model, std::span<const std::int64_t> sequence, std::size_t tap_layer,
                         const ActivationEdit<T>& edit = {}, bool last_only = false);

/// Continues a forward pass from a tap-layer output of one sequence.
template <typename T>
Tensor<T> forward_from_tap(const RecModel<T>& model, const Tensor<T>& tap_output, std::size_t tap_layer,
                           bool last_only);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::size_t steps = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam on next-item cross-entropy. Sequences longer than max_len + 1 keep
/// their most recent items.
template <typename T>
TrainReport train(RecModel<T>& model, const std::vector<data::UserSequence>& sequences, const TrainOptions& options);

struct ScoredItem {
  std::int64_t item = 0;
  double score = 0.0;
};

/// Top-k by last-position score, ties to the lower item id.
std::vector<ScoredItem> top_k(std::span<const float> scores, std::size_t k, std::span<const std::int64_t> exclude);

std::vector<ScoredItem> recommend(const RecModel<float>& model, std::span<const std::int64_t> history, std::size_t k,
                                  bool exclude_seen, const ActivationEdit<float>& edit = {}, std::size_t tap_layer = 1);

/// Last max_len items of a history.
std::span<const std::int64_t> truncate_history(std::span<const std::int64_t> history, std::size_t max_len);

/// Checkpoint: tensor container with the config, block layout and `extra`
/// (id maps) in its header. Returns the file checksum.
std::string save_model(const RecModel<float>& model, const std::filesystem::path& path,
                       const nlohmann::json& extra = nlohmann::json::object());
RecModel<float> load_model(const std::filesystem::path& path, nlohmann::json* header = nullptr);

}  // namespace saerec::rec
