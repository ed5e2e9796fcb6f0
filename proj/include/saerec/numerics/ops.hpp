#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "saerec/numerics/tape.hpp"
#include "saerec/numerics/tensor.hpp"

namespace saerec::numerics {

/// A contiguous run of rows belonging to one sequence in a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// ---------------------------------------------------------------------------
// Plain tensor arithmetic (no recording).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a * b^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transposed(const Tensor<T>& a);

template <typename T>
Tensor<T> identity(std::size_t n);

// ---------------------------------------------------------------------------
// Recorded primitives. Each registers its adjoint rule on the tape.
// ---------------------------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var transpose(Tape<T>& tape, Var a);

template <typename T>
Var add(Tape<T>& tape, Var a, Var b);

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b);

/// Elementwise product.
template <typename T>
Var mul(Tape<T>& tape, Var a, Var b);

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor);

/// x[r x c] + bias[c] broadcast over rows.
template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias);

template <typename T>
Var relu(Tape<T>& tape, Var x);

/// Exact (erf) GELU.
template <typename T>
Var gelu(Tape<T>& tape, Var x);

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x);

/// Per-row standardization followed by gain[c] * xhat + bias[c].
template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5));

/// Mean next-token cross-entropy over rows whose target is >= 0. Rows with a
/// negative target are ignored (padding).
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets);

/// Mean logistic loss of logits z[N] (or [N x 1]) against 0/1 labels.
template <typename T>
Var logistic_loss(Tape<T>& tape, Var logits, std::span<const T> labels);

template <typename T>
Var l1_norm(Tape<T>& tape, Var x);

template <typename T>
Var l2_norm_sq(Tape<T>& tape, Var x);

template <typename T>
Var sum(Tape<T>& tape, Var x);

/// Gathers rows of table[v x c] into [ids.size() x c].
template <typename T>
Var embedding_lookup(Tape<T>& tape, Var table, std::span<const std::size_t> ids);

/// Rows [row_begin, row_end) and columns [col_begin, col_end) of a matrix.
template <typename T>
Var slice(Tape<T>& tape, Var x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
          std::size_t col_end);

/// Multi-head causal self-attention over packed sequences. qkv holds
/// [queries | keys | values] side by side, each hidden wide; positions only
/// attend to earlier positions of their own segment.
template <typename T>
Var causal_attention(Tape<T>& tape, Var qkv, std::span<const Segment> segments, std::size_t n_heads);

/// Inverted dropout. Identity when rate == 0.
template <typename T>
Var dropout(Tape<T>& tape, Var x, T rate, std::mt19937_64& rng);

}  // namespace saerec::numerics
