#include "saerec/recmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "saerec/numerics/adam.hpp"
#include "saerec/numerics/container.hpp"

namespace saerec::rec {

using numerics::Segment;
namespace ops = saerec::numerics;

void RecModelConfig::validate() const {
  if (n_items == 0) throw std::invalid_argument("recmodel config: n_items must be positive");
  if (n_layers == 0 || n_heads == 0 || hidden == 0 || max_len == 0 || mlp_expansion == 0) {
    throw std::invalid_argument("recmodel config: sizes must be positive");
  }
  if (hidden % n_heads != 0) throw std::invalid_argument("recmodel config: hidden must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("recmodel config: dropout must be in [0, 1)");
}

void to_json(nlohmann::json& j, const RecModelConfig& c) {
  j = nlohmann::json{{"n_items", c.n_items}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                     {"hidden", c.hidden},   {"max_len", c.max_len},   {"mlp_expansion", c.mlp_expansion},
                     {"dropout", c.dropout}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RecModelConfig& c) {
  RecModelConfig d;
  c.n_items = j.value("n_items", d.n_items);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.hidden = j.value("hidden", d.hidden);
  c.max_len = j.value("max_len", d.max_len);
  c.mlp_expansion = j.value("mlp_expansion", d.mlp_expansion);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

template <typename T>
RecModel<T> RecModel<T>::init(const RecModelConfig& config) {
  config.validate();
  RecModel<T> m;
  m.config = config;
  std::mt19937_64 rng(config.seed);
  const std::size_t h = config.hidden;
  const std::size_t wide = h * config.mlp_expansion;
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto gaussian = [&](numerics::Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto& p = m.params;
  p.item_embedding = gaussian({config.n_items + 1, h}, base);
  for (T& v : p.item_embedding.row(0)) v = T{0};
  p.position_embedding = gaussian({config.max_len, h}, base);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = Tensor<T>({h}, T{1});
    b.ln1_bias = Tensor<T>({h});
    b.qkv_weight = gaussian({h, 3 * h}, base);
    b.qkv_bias = Tensor<T>({3 * h});
    b.proj_weight = gaussian({h, h}, residual);
    b.proj_bias = Tensor<T>({h});
    b.ln2_gain = Tensor<T>({h}, T{1});
    b.ln2_bias = Tensor<T>({h});
    b.fc1_weight = gaussian({h, wide}, base);
    b.fc1_bias = Tensor<T>({wide});
    b.fc2_weight = gaussian({wide, h}, residual);
    b.fc2_bias = Tensor<T>({h});
  }
  p.final_gain = Tensor<T>({h}, T{1});
  p.final_bias = Tensor<T>({h});
  p.output_weight = gaussian({h, config.n_items}, base);
  p.output_bias = Tensor<T>({config.n_items});
  return m;
}

template <typename T>
std::size_t RecModel<T>::parameter_count() const {
  std::size_t n = 0;
  params.for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

PackedBatch pack_training_batch(std::span<const std::vector<std::int64_t>> sequences, std::size_t max_len) {
  PackedBatch batch;
  for (const auto& full : sequences) {
    if (full.size() < 2) continue;
    const std::size_t keep = std::min(full.size(), max_len + 1);
    const auto* seq = full.data() + (full.size() - keep);
    Segment seg{batch.tokens.size(), keep - 1};
    for (std::size_t i = 0; i + 1 < keep; ++i) {
      batch.tokens.push_back(static_cast<std::size_t>(seq[i]) + 1);
      batch.positions.push_back(i);
      batch.targets.push_back(static_cast<int>(seq[i + 1]));
    }
    batch.segments.push_back(seg);
  }
  return batch;
}

template <typename T>
ModelSlots<Var> bind_parameters(Tape<T>& tape, const RecModel<T>& model, bool trainable) {
  std::vector<Var> flat;
  model.params.for_each([&](const std::string&, const Tensor<T>& t) {
    flat.push_back(trainable ? tape.parameter_view(t) : tape.constant_view(t));
  });
  return RecModel<T>::template slots_from_list<Var>(model.config.n_layers, std::move(flat));
}

namespace {

template <typename T>
Var run_block(Tape<T>& tape, const BlockSlots<Var>& b, Var x, std::span<const Segment> segments, std::size_t n_heads,
              T dropout_rate, std::mt19937_64* rng) {
  auto maybe_dropout = [&](Var v) { return rng ? ops::dropout(tape, v, dropout_rate, *rng) : v; };
  Var a = ops::layer_norm(tape, x, b.ln1_gain, b.ln1_bias);
  Var qkv = ops::add_bias(tape, ops::matmul(tape, a, b.qkv_weight), b.qkv_bias);
  Var att = ops::causal_attention(tape, qkv, segments, n_heads);
  Var proj = ops::add_bias(tape, ops::matmul(tape, att, b.proj_weight), b.proj_bias);
  x = ops::add(tape, x, maybe_dropout(proj));
  Var m = ops::layer_norm(tape, x, b.ln2_gain, b.ln2_bias);
  Var f = ops::gelu(tape, ops::add_bias(tape, ops::matmul(tape, m, b.fc1_weight), b.fc1_bias));
  Var f2 = ops::add_bias(tape, ops::matmul(tape, f, b.fc2_weight), b.fc2_bias);
  return ops::add(tape, x, maybe_dropout(f2));
}

template <typename T>
Var run_head(Tape<T>& tape, const ModelSlots<Var>& p, Var x, std::span<const Segment> segments, bool last_only) {
  if (last_only) {
    std::vector<std::size_t> rows;
    for (const Segment& s : segments) rows.push_back(s.offset + s.length - 1);
    x = ops::embedding_lookup(tape, x, rows);
  }
  Var n = ops::layer_norm(tape, x, p.final_gain, p.final_bias);
  return ops::add_bias(tape, ops::matmul(tape, n, p.output_weight), p.output_bias);
}

template <typename T>
void validate_sequence(const RecModelConfig& config, std::span<const std::int64_t> sequence) {
  if (sequence.empty()) throw std::invalid_argument("recmodel: empty sequence");
  if (sequence.size() > config.max_len) {
    throw std::invalid_argument("recmodel: sequence length " + std::to_string(sequence.size()) + " exceeds max_len " +
                                std::to_string(config.max_len));
  }
  for (auto item : sequence) {
    if (item < 0 || static_cast<std::size_t>(item) >= config.n_items) {
      throw std::out_of_range("recmodel: unknown item id " + std::to_string(item));
    }
  }
}

}  // namespace

template <typename T>
RecordedPass record_forward(Tape<T>& tape, const RecModelConfig& config, const ModelSlots<Var>& p,
                            const PackedBatch& batch, std::size_t tap_layer, const ActivationEdit<T>* edit,
                            bool last_only, std::mt19937_64* dropout_rng) {
  if (tap_layer > config.n_layers) {
    throw std::out_of_range("recmodel: tap_layer " + std::to_string(tap_layer) + " outside [1, " +
                            std::to_string(config.n_layers) + "]");
  }
  const T rate = static_cast<T>(config.dropout);
  std::mt19937_64* rng = rate > T{0} ? dropout_rng : nullptr;
  Var x = ops::add(tape, ops::embedding_lookup(tape, p.item_embedding, batch.tokens),
                   ops::embedding_lookup(tape, p.position_embedding, batch.positions));
  if (rng) x = ops::dropout(tape, x, rate, *rng);
  RecordedPass out{};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    x = run_block(tape, p.blocks[l], x, batch.segments, config.n_heads, rate, rng);
    if (l + 1 == tap_layer) {
      out.hidden = x;
      if (edit && *edit) {
        Tensor<T> edited = (*edit)(tape.value(x));
        numerics::require_same_shape(edited, tape.value(x), "activation edit");
        x = tape.constant(std::move(edited));
      }
    }
  }
  out.logits = run_head(tape, p, x, batch.segments, last_only);
  return out;
}

template <typename T>
Var record_loss(Tape<T>& tape, const RecModelConfig& config, const ModelSlots<Var>& params, const PackedBatch& batch,
                std::mt19937_64* dropout_rng) {
  RecordedPass pass = record_forward<T>(tape, config, params, batch, 0, nullptr, false, dropout_rng);
  return ops::cross_entropy(tape, pass.logits, batch.targets);
}

template <typename T>
ForwardOutput<T> forward(const RecModel<T>& model, std::span<const std::int64_t> sequence, std::size_t tap_layer,
                         const ActivationEdit<T>& edit, bool last_only) {
  validate_sequence<T>(model.config, sequence);
  if (tap_layer == 0) throw std::out_of_range("recmodel: tap_layer is 1-based");
  PackedBatch batch;
  for (std::size_t i = 0; i < sequence.size(); ++i) {
    batch.tokens.push_back(static_cast<std::size_t>(sequence[i]) + 1);
    batch.positions.push_back(i);
  }
  batch.segments.push_back(Segment{0, sequence.size()});
  Tape<T> tape;
  auto params = bind_parameters(tape, model, false);
  RecordedPass pass = record_forward<T>(tape, model.config, params, batch, tap_layer, edit ? &edit : nullptr,
                                        last_only, nullptr);
  return ForwardOutput<T>{tape.value(pass.logits), tape.value(pass.hidden)};
}

template <typename T>
Tensor<T> forward_from_tap(const RecModel<T>& model, const Tensor<T>& tap_output, std::size_t tap_layer,
                           bool last_only) {
  const auto& config = model.config;
  if (tap_layer == 0 || tap_layer > config.n_layers) throw std::out_of_range("recmodel: bad tap_layer");
  if (tap_output.rank() != 2 || tap_output.cols() != config.hidden) {
    throw numerics::ShapeError("recmodel: tap output must be [positions x hidden]");
  }
  Tape<T> tape;
  auto params = bind_parameters(tape, model, false);
  std::vector<Segment> segments{Segment{0, tap_output.rows()}};
  Var x = tape.constant_view(tap_output);
  for (std::size_t l = tap_layer; l < config.n_layers; ++l) {
    x = run_block(tape, params.blocks[l], x, segments, config.n_heads, T{0}, nullptr);
  }
  return tape.value(run_head(tape, params, x, segments, last_only));
}

template <typename T>
TrainReport train(RecModel<T>& model, const std::vector<data::UserSequence>& sequences, const TrainOptions& options) {
  std::vector<std::vector<std::int64_t>> usable;
  for (const auto& s : sequences) {
    if (s.items.size() >= 2) usable.push_back(s.items);
  }
  if (usable.empty()) throw std::invalid_argument("recmodel train: no sequence with at least two items");
  if (options.batch_size == 0) throw std::invalid_argument("recmodel train: batch_size must be positive");
  for (const auto& s : usable) {
    for (auto item : s) {
      if (item < 0 || static_cast<std::size_t>(item) >= model.config.n_items) {
        throw std::out_of_range("recmodel train: unknown item id " + std::to_string(item));
      }
    }
  }

  std::vector<Tensor<T>*> params;
  model.params.for_each([&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
  auto state = numerics::make_adam_state<T>(std::span<const Tensor<T>* const>(params.data(), params.size()),
                                            numerics::AdamOptions{.lr = options.lr});
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t target_count = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      std::vector<std::vector<std::int64_t>> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + options.batch_size); ++i) {
        chunk.push_back(usable[order[i]]);
      }
      PackedBatch batch = pack_training_batch(chunk, model.config.max_len);
      Tape<T> tape;
      ModelSlots<Var> vars = bind_parameters(tape, model, true);
      Var loss = record_loss(tape, model.config, vars, batch, &rng);
      const double value = static_cast<double>(tape.value(loss).item());
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "recmodel train diverged: loss " << value << " at epoch " << epoch << ", step " << report.steps;
        throw DivergenceError(msg.str());
      }
      tape.backward(loss);
      std::vector<const Tensor<T>*> grads;
      vars.for_each([&](const std::string&, const Var& v) { grads.push_back(&tape.grad_slot(v)); });
      numerics::adam_step<T>(params, grads, state);
      ++report.steps;
      loss_sum += value * static_cast<double>(batch.targets.size());
      target_count += batch.targets.size();
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(target_count));
    if (options.verbose) {
      std::fprintf(stderr, "[train-model] epoch %zu loss %.4f\n", epoch + 1, report.epoch_loss.back());
    }
  }
  return report;
}

std::vector<ScoredItem> top_k(std::span<const float> scores, std::size_t k, std::span<const std::int64_t> exclude) {
  std::vector<bool> banned(scores.size(), false);
  for (auto item : exclude) {
    if (item >= 0 && static_cast<std::size_t>(item) < banned.size()) banned[static_cast<std::size_t>(item)] = true;
  }
  std::vector<std::int64_t> candidates;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!banned[i]) candidates.push_back(static_cast<std::int64_t>(i));
  }
  const std::size_t take = std::min(k, candidates.size());
  auto better = [&](std::int64_t a, std::int64_t b) {
    const float sa = scores[static_cast<std::size_t>(a)];
    const float sb = scores[static_cast<std::size_t>(b)];
    return sa != sb ? sa > sb : a < b;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(), better);
  std::vector<ScoredItem> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    out.push_back(ScoredItem{candidates[i], static_cast<double>(scores[static_cast<std::size_t>(candidates[i])])});
  }
  return out;
}

std::span<const std::int64_t> truncate_history(std::span<const std::int64_t> history, std::size_t max_len) {
  if (history.size() <= max_len) return history;
  return history.last(max_len);
}

std::vector<ScoredItem> recommend(const RecModel<float>& model, std::span<const std::int64_t> history, std::size_t k,
                                  bool exclude_seen, const ActivationEdit<float>& edit, std::size_t tap_layer) {
  if (history.empty()) throw std::invalid_argument("recommend: empty history");
  auto out = forward(model, truncate_history(history, model.config.max_len), tap_layer, edit, true);
  return top_k(out.logits.row(0), k, exclude_seen ? history : std::span<const std::int64_t>{});
}

std::string save_model(const RecModel<float>& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  numerics::TensorContainer c;
  c.header["kind"] = "recmodel";
  c.header["config"] = model.config;
  c.header["block"] = {{"norm", "pre"}, {"activation", "gelu"}, {"attention", "causal"}, {"weight_tying", false}};
  c.header["extra"] = extra;
  model.params.for_each([&](const std::string& name, const Tensor<float>& t) { c.put(name, t); });
  return c.save(path);
}

RecModel<float> load_model(const std::filesystem::path& path, nlohmann::json* header) {
  auto c = numerics::TensorContainer::load(path);
  if (c.header.value("kind", "") != "recmodel") throw std::runtime_error(path.string() + " is not a recmodel checkpoint");
  RecModel<float> model;
  model.config = c.header.at("config").get<RecModelConfig>();
  model.params.blocks.resize(model.config.n_layers);
  model.params.for_each([&](const std::string& name, Tensor<float>& t) { t = c.get<float>(name); });
  if (header) *header = c.header;
  return model;
}

#define SAEREC_INSTANTIATE_RECMODEL(T)                                                                           \
  template struct RecModel<T>;                                                                                   \
  template ModelSlots<Var> bind_parameters(Tape<T>&, const RecModel<T>&, bool);                                 \
  template RecordedPass record_forward(Tape<T>&, const RecModelConfig&, const ModelSlots<Var>&, const PackedBatch&, \
                                       std::size_t, const ActivationEdit<T>*, bool, std::mt19937_64*);          \
  template Var record_loss(Tape<T>&, const RecModelConfig&, const ModelSlots<Var>&, const PackedBatch&,         \
                           std::mt19937_64*);                                                                    \
  template ForwardOutput<T> forward(const RecModel<T>&, std::span<const std::int64_t>, std::size_t,             \
                                    const ActivationEdit<T>&, bool);                                             \
  template Tensor<T> forward_from_tap(const RecModel<T>&, const Tensor<T>&, std::size_t, bool);                 \
  template TrainReport train(RecModel<T>&, const std::vector<data::UserSequence>&, const TrainOptions&);

SAEREC_INSTANTIATE_RECMODEL(float)
SAEREC_INSTANTIATE_RECMODEL(double)

}  // namespace saerec::rec
