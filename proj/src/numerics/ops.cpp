#include "saerec/numerics/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>

namespace saerec::numerics {

namespace {

std::atomic<bool> g_finite_checks{false};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  return MatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  return ConstMatMap<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() > 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
}

template <typename T>
Tensor<T> unary_map(const Tensor<T>& x, auto&& fn) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i]);
  return out;
}

template <typename T>
void accumulate(Tensor<T>& into, const Tensor<T>& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Plain arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  Tensor<T> out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_transposed");
  require_matrix(b, "matmul_transposed");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_transposed: inner extents differ " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()) + "^T");
  }
  Tensor<T> out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  return out;
}

template <typename T>
Tensor<T> transposed(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a).transpose();
  return out;
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
  return out;
}

// ---------------------------------------------------------------------------
// Recorded primitives
// ---------------------------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  Tensor<T> out = matmul(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    if (t.requires_grad(a)) {
      as_matrix(t.grad_slot(a)).noalias() += as_matrix(g) * as_matrix(t.value(b)).transpose();
    }
    if (t.requires_grad(b)) {
      as_matrix(t.grad_slot(b)).noalias() += as_matrix(t.value(a)).transpose() * as_matrix(g);
    }
  });
}

template <typename T>
Var transpose(Tape<T>& tape, Var a) {
  return tape.record(transposed(tape.value(a)), {a}, [a](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    Tensor<T>& ga = t.grad_slot(a);
    as_matrix(ga) += as_matrix(g).transpose();
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  require_same_shape(va, vb, "add");
  Tensor<T> out = va;
  accumulate(out, vb);
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    if (t.requires_grad(a)) accumulate(t.grad_slot(a), g);
    if (t.requires_grad(b)) accumulate(t.grad_slot(b), g);
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  require_same_shape(va, vb, "sub");
  Tensor<T> out = va;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    if (t.requires_grad(a)) accumulate(t.grad_slot(a), g);
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_slot(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  require_same_shape(va, vb, "mul");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    if (t.requires_grad(a)) {
      Tensor<T>& ga = t.grad_slot(a);
      const Tensor<T>& vb = t.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad_slot(b);
      const Tensor<T>& va = t.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> out = unary_map(tape.value(a), [factor](T v) { return v * factor; });
  return tape.record(std::move(out), {a}, [a, factor](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    Tensor<T>& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias) {
  const Tensor<T>& vx = tape.value(x);
  const Tensor<T>& vb = tape.value(bias);
  require_matrix(vx, "add_bias");
  if (vb.size() != vx.cols()) {
    throw ShapeError("add_bias: bias " + shape_to_string(vb.shape()) + " does not match columns of " +
                     shape_to_string(vx.shape()));
  }
  Tensor<T> out = vx;
  as_matrix(out).rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vb.data(), vb.size());
  return tape.record(std::move(out), {x, bias}, [x, bias](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    if (t.requires_grad(x)) accumulate(t.grad_slot(x), g);
    if (t.requires_grad(bias)) {
      Tensor<T>& gb = t.grad_slot(bias);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), gb.size()) += as_matrix(g).colwise().sum();
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> out = unary_map(tape.value(x), [](T v) { return v > T{0} ? v : T{0}; });
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    const Tensor<T>& vx = t.value(x);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (vx[i] > T{0}) gx[i] += g[i];
    }
  });
}

template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  Tensor<T> out = unary_map(tape.value(x), [inv_sqrt2](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  return tape.record(std::move(out), {x}, [x, inv_sqrt2](Tape<T>& t, Var self) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    const Tensor<T>& g = t.grad_slot(self);
    const Tensor<T>& vx = t.value(x);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = vx[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  const Tensor<T>& vx = tape.value(x);
  require_matrix(vx, "softmax_rows");
  Tensor<T> out(vx.shape());
  for (std::size_t r = 0; r < vx.rows(); ++r) {
    auto in = vx.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T total{0};
    for (std::size_t c = 0; c < in.size(); ++c) total += (o[c] = std::exp(in[c] - mx));
    for (T& v : o) v /= total;
  }
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      T dot{0};
      for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
      auto out = gx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps) {
  const Tensor<T>& vx = tape.value(x);
  const Tensor<T>& vg = tape.value(gain);
  const Tensor<T>& vb = tape.value(bias);
  require_matrix(vx, "layer_norm");
  const std::size_t rows = vx.rows();
  const std::size_t cols = vx.cols();
  if (vg.size() != cols || vb.size() != cols) throw ShapeError("layer_norm: gain/bias length must equal columns");

  auto xhat = std::make_shared<Tensor<T>>(vx.shape());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(vx.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = vx.row(r);
    T mean{0};
    for (T v : in) mean += v;
    mean /= T(cols);
    T var{0};
    for (T v : in) var += (v - mean) * (v - mean);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    auto xh = xhat->row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      xh[c] = (in[c] - mean) * is;
      o[c] = vg[c] * xh[c] + vb[c];
    }
  }
  return tape.record(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    const Tensor<T>& vg = t.value(gain);
    const std::size_t rows = g.rows();
    const std::size_t cols = g.cols();
    if (t.requires_grad(gain) || t.requires_grad(bias)) {
      Tensor<T>* gg = t.requires_grad(gain) ? &t.grad_slot(gain) : nullptr;
      Tensor<T>* gb = t.requires_grad(bias) ? &t.grad_slot(bias) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        auto gr = g.row(r);
        auto xh = xhat->row(r);
        for (std::size_t c = 0; c < cols; ++c) {
          if (gg) (*gg)[c] += gr[c] * xh[c];
          if (gb) (*gb)[c] += gr[c];
        }
      }
    }
    if (t.requires_grad(x)) {
      Tensor<T>& gx = t.grad_slot(x);
      std::vector<T> dxhat(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        auto gr = g.row(r);
        auto xh = xhat->row(r);
        T mean_d{0};
        T mean_dx{0};
        for (std::size_t c = 0; c < cols; ++c) {
          dxhat[c] = gr[c] * vg[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= T(cols);
        mean_dx /= T(cols);
        auto out = gx.row(r);
        const T is = (*inv_std)[r];
        for (std::size_t c = 0; c < cols; ++c) out[c] += is * (dxhat[c] - mean_d - xh[c] * mean_dx);
      }
    }
  });
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets) {
  const Tensor<T>& z = tape.value(logits);
  require_matrix(z, "cross_entropy");
  if (targets.size() != z.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(z.rows()) +
                     " rows");
  }
  auto probs = std::make_shared<Tensor<T>>(z.shape());
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  std::size_t count = 0;
  T total{0};
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const int target = targets[r];
    if (target < 0) continue;
    if (static_cast<std::size_t>(target) >= z.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(target) + " outside " +
                              std::to_string(z.cols()) + " classes");
    }
    auto in = z.row(r);
    auto p = probs->row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T denom{0};
    for (std::size_t c = 0; c < in.size(); ++c) denom += (p[c] = std::exp(in[c] - mx));
    for (T& v : p) v /= denom;
    total += mx + std::log(denom) - in[static_cast<std::size_t>(target)];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: no valid targets");
  const T inv = T(1) / T(count);
  return tape.record(Tensor<T>::scalar(total * inv), {logits}, [logits, probs, tgt, inv](Tape<T>& t, Var self) {
    const T g = t.grad_slot(self)[0] * inv;
    Tensor<T>& gz = t.grad_slot(logits);
    for (std::size_t r = 0; r < gz.rows(); ++r) {
      const int target = (*tgt)[r];
      if (target < 0) continue;
      auto p = probs->row(r);
      auto out = gz.row(r);
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += g * p[c];
      out[static_cast<std::size_t>(target)] -= g;
    }
  });
}

template <typename T>
Var logistic_loss(Tape<T>& tape, Var logits, std::span<const T> labels) {
  const Tensor<T>& z = tape.value(logits);
  if (z.size() != labels.size()) {
    throw ShapeError("logistic_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(z.size()) +
                     " logits");
  }
  auto lab = std::make_shared<std::vector<T>>(labels.begin(), labels.end());
  T total{0};
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T v = z[i];
    total += std::max(v, T{0}) - labels[i] * v + std::log1p(std::exp(-std::abs(v)));
  }
  const T inv = T(1) / T(z.size());
  return tape.record(Tensor<T>::scalar(total * inv), {logits}, [logits, lab, inv](Tape<T>& t, Var self) {
    const T g = t.grad_slot(self)[0] * inv;
    const Tensor<T>& z = t.value(logits);
    Tensor<T>& gz = t.grad_slot(logits);
    for (std::size_t i = 0; i < gz.size(); ++i) {
      const T sig = T(1) / (T(1) + std::exp(-z[i]));
      gz[i] += g * (sig - (*lab)[i]);
    }
  });
}

template <typename T>
Var l1_norm(Tape<T>& tape, Var x) {
  T total{0};
  for (T v : tape.value(x).values()) total += std::abs(v);
  return tape.record(Tensor<T>::scalar(total), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad_slot(self)[0];
    const Tensor<T>& vx = t.value(x);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (vx[i] > T{0}) {
        gx[i] += g;
      } else if (vx[i] < T{0}) {
        gx[i] -= g;
      }
    }
  });
}

template <typename T>
Var l2_norm_sq(Tape<T>& tape, Var x) {
  T total{0};
  for (T v : tape.value(x).values()) total += v * v;
  return tape.record(Tensor<T>::scalar(total), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad_slot(self)[0];
    const Tensor<T>& vx = t.value(x);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * g * vx[i];
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T total{0};
  for (T v : tape.value(x).values()) total += v;
  return tape.record(Tensor<T>::scalar(total), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad_slot(self)[0];
    Tensor<T>& gx = t.grad_slot(x);
    for (T& v : gx.values()) v += g;
  });
}

template <typename T>
Var embedding_lookup(Tape<T>& tape, Var table, std::span<const std::size_t> ids) {
  const Tensor<T>& tab = tape.value(table);
  require_matrix(tab, "embedding_lookup");
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t cols = tab.cols();
  Tensor<T> out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tab.rows()) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tab.rows()) + " rows");
    }
    std::copy_n(tab.row(ids[i]).data(), cols, out.row(i).data());
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [table, idx](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    Tensor<T>& gt = t.grad_slot(table);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      auto src = g.row(i);
      auto dst = gt.row((*idx)[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var slice(Tape<T>& tape, Var x, std::size_t row_begin, std::size_t row_end, std::size_t col_begin,
          std::size_t col_end) {
  const Tensor<T>& vx = tape.value(x);
  require_matrix(vx, "slice");
  if (row_begin >= row_end || row_end > vx.rows() || col_begin >= col_end || col_end > vx.cols()) {
    throw ShapeError("slice: range out of bounds for " + shape_to_string(vx.shape()));
  }
  const auto nr = static_cast<Eigen::Index>(row_end - row_begin);
  const auto nc = static_cast<Eigen::Index>(col_end - col_begin);
  const auto rb = static_cast<Eigen::Index>(row_begin);
  const auto cb = static_cast<Eigen::Index>(col_begin);
  Tensor<T> out({row_end - row_begin, col_end - col_begin});
  as_matrix(out) = as_matrix(vx).block(rb, cb, nr, nc);
  return tape.record(std::move(out), {x}, [x, rb, cb, nr, nc](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    as_matrix(t.grad_slot(x)).block(rb, cb, nr, nc) += as_matrix(g);
  });
}

template <typename T>
Var causal_attention(Tape<T>& tape, Var qkv, std::span<const Segment> segments, std::size_t n_heads) {
  const Tensor<T>& vin = tape.value(qkv);
  require_matrix(vin, "causal_attention");
  if (n_heads == 0 || vin.cols() % (3 * n_heads) != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(vin.cols()) + " not divisible into 3 x " +
                     std::to_string(n_heads) + " heads");
  }
  const auto hidden = static_cast<Eigen::Index>(vin.cols() / 3);
  const auto head_dim = hidden / static_cast<Eigen::Index>(n_heads);
  const T inv_sqrt_d = T(1) / std::sqrt(T(head_dim));
  std::size_t covered = 0;
  for (const Segment& s : segments) {
    if (s.length == 0 || s.offset + s.length > vin.rows()) throw ShapeError("causal_attention: bad segment");
    covered += s.length;
  }
  if (covered != vin.rows()) throw ShapeError("causal_attention: segments must cover every row");

  auto segs = std::make_shared<std::vector<Segment>>(segments.begin(), segments.end());
  auto probs = std::make_shared<std::vector<RowMat<T>>>();
  probs->reserve(segments.size() * n_heads);

  Tensor<T> out({vin.rows(), static_cast<std::size_t>(hidden)});
  auto in = as_matrix(vin);
  auto o = as_matrix(out);
  for (const Segment& s : *segs) {
    const auto off = static_cast<Eigen::Index>(s.offset);
    const auto len = static_cast<Eigen::Index>(s.length);
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h) {
      auto q = in.block(off, h * head_dim, len, head_dim);
      auto k = in.block(off, hidden + h * head_dim, len, head_dim);
      auto v = in.block(off, 2 * hidden + h * head_dim, len, head_dim);
      RowMat<T> p = (q * k.transpose()) * inv_sqrt_d;
      for (Eigen::Index r = 0; r < len; ++r) {
        T mx = p(r, 0);
        for (Eigen::Index c = 1; c <= r; ++c) mx = std::max(mx, p(r, c));
        T total{0};
        for (Eigen::Index c = 0; c <= r; ++c) total += (p(r, c) = std::exp(p(r, c) - mx));
        for (Eigen::Index c = 0; c <= r; ++c) p(r, c) /= total;
        for (Eigen::Index c = r + 1; c < len; ++c) p(r, c) = T{0};
      }
      o.block(off, h * head_dim, len, head_dim).noalias() = p * v;
      probs->push_back(std::move(p));
    }
  }
  return tape.record(std::move(out), {qkv}, [qkv, segs, probs, n_heads, hidden, head_dim, inv_sqrt_d](Tape<T>& t, Var self) {
    auto g = as_matrix(t.grad_slot(self));
    auto in = as_matrix(t.value(qkv));
    auto gin = as_matrix(t.grad_slot(qkv));
    std::size_t idx = 0;
    for (const Segment& s : *segs) {
      const auto off = static_cast<Eigen::Index>(s.offset);
      const auto len = static_cast<Eigen::Index>(s.length);
      for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n_heads); ++h, ++idx) {
        const RowMat<T>& p = (*probs)[idx];
        auto q = in.block(off, h * head_dim, len, head_dim);
        auto k = in.block(off, hidden + h * head_dim, len, head_dim);
        auto v = in.block(off, 2 * hidden + h * head_dim, len, head_dim);
        auto go = g.block(off, h * head_dim, len, head_dim);
        RowMat<T> dp = go * v.transpose();
        gin.block(off, 2 * hidden + h * head_dim, len, head_dim).noalias() += p.transpose() * go;
        RowMat<T> ds(len, len);
        for (Eigen::Index r = 0; r < len; ++r) {
          T dot{0};
          for (Eigen::Index c = 0; c <= r; ++c) dot += dp(r, c) * p(r, c);
          for (Eigen::Index c = 0; c < len; ++c) ds(r, c) = c <= r ? p(r, c) * (dp(r, c) - dot) * inv_sqrt_d : T{0};
        }
        gin.block(off, h * head_dim, len, head_dim).noalias() += ds * k;
        gin.block(off, hidden + h * head_dim, len, head_dim).noalias() += ds.transpose() * q;
      }
    }
  });
}

template <typename T>
Var dropout(Tape<T>& tape, Var x, T rate, std::mt19937_64& rng) {
  if (rate < T{0} || rate >= T{1}) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == T{0}) return x;
  const Tensor<T>& vx = tape.value(x);
  auto mask = std::make_shared<Tensor<T>>(vx.shape());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T factor = T(1) / (T(1) - rate);
  Tensor<T> out(vx.shape());
  for (std::size_t i = 0; i < vx.size(); ++i) {
    (*mask)[i] = keep(rng) ? factor : T{0};
    out[i] = vx[i] * (*mask)[i];
  }
  return tape.record(std::move(out), {x}, [x, mask](Tape<T>& t, Var self) {
    const Tensor<T>& g = t.grad_slot(self);
    Tensor<T>& gx = t.grad_slot(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

#define SAEREC_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transposed(const Tensor<T>&);                                                        \
  template Tensor<T> identity<T>(std::size_t);                                                            \
  template Var matmul(Tape<T>&, Var, Var);                                                                \
  template Var transpose(Tape<T>&, Var);                                                                  \
  template Var add(Tape<T>&, Var, Var);                                                                   \
  template Var sub(Tape<T>&, Var, Var);                                                                   \
  template Var mul(Tape<T>&, Var, Var);                                                                   \
  template Var scale(Tape<T>&, Var, T);                                                                   \
  template Var add_bias(Tape<T>&, Var, Var);                                                              \
  template Var relu(Tape<T>&, Var);                                                                       \
  template Var gelu(Tape<T>&, Var);                                                                       \
  template Var softmax_rows(Tape<T>&, Var);                                                               \
  template Var layer_norm(Tape<T>&, Var, Var, Var, T);                                                    \
  template Var cross_entropy(Tape<T>&, Var, std::span<const int>);                                        \
  template Var logistic_loss(Tape<T>&, Var, std::span<const T>);                                          \
  template Var l1_norm(Tape<T>&, Var);                                                                    \
  template Var l2_norm_sq(Tape<T>&, Var);                                                                 \
  template Var sum(Tape<T>&, Var);                                                                        \
  template Var embedding_lookup(Tape<T>&, Var, std::span<const std::size_t>);                             \
  template Var slice(Tape<T>&, Var, std::size_t, std::size_t, std::size_t, std::size_t);                  \
  template Var causal_attention(Tape<T>&, Var, std::span<const Segment>, std::size_t);                    \
  template Var dropout(Tape<T>&, Var, T, std::mt19937_64&);

SAEREC_INSTANTIATE_OPS(float)
SAEREC_INSTANTIATE_OPS(double)

#undef SAEREC_INSTANTIATE_OPS

}  // namespace saerec::numerics
