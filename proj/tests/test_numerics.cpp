#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "saerec/numerics/adam.hpp"
#include "saerec/numerics/container.hpp"
#include "saerec/numerics/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/random.hpp"

using namespace saerec::numerics;
using saerec::testing::check_gradients;
using saerec::testing::random_tensor;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

// Scalar Adam written out longhand, used as the reference for the tensor version.
double scalar_adam_minimize(double w, double lr, int steps) {
  double m = 0.0, v = 0.0;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2.0 * (w - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    w -= lr * mhat / (std::sqrt(vhat) + 1e-8);
  }
  return w;
}

}  // namespace

TEST_CASE("matmul hand cases and triple-loop oracle") {
  Tensor<double> a = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  CHECK(matmul(identity<double>(2), a) == a);
  Tensor<double> b = Tensor<double>::matrix(2, 1, {0, 1});
  CHECK(matmul(a, b) == Tensor<double>::matrix(2, 1, {2, 4}));

  std::mt19937_64 rng(7);
  auto x = random_tensor({5, 4}, rng);
  auto y = random_tensor({4, 3}, rng);
  auto fast = matmul(x, y);
  auto slow = naive_matmul(x, y);
  for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast[i] - slow[i]) < 1e-12);

  CHECK_THROWS_AS(matmul(x, x), ShapeError);
}

TEST_CASE("matmul with identity is bitwise associative") {
  std::mt19937_64 rng(3);
  auto a = random_tensor({6, 5}, rng);
  auto b = random_tensor({5, 4}, rng);
  CHECK(matmul(matmul(a, identity<double>(5)), b) == matmul(a, b));
}

TEST_CASE("primitive forward values") {
  Tape<double> tape;
  auto r = relu(tape, tape.constant(Tensor<double>::vector({-1, 0, 2})));
  CHECK(tape.value(r) == Tensor<double>::vector({0, 0, 2}));

  auto s = softmax_rows(tape, tape.constant(Tensor<double>::vector({0, 0})));
  CHECK(tape.value(s)[0] == doctest::Approx(0.5));
  CHECK(tape.value(s)[1] == doctest::Approx(0.5));

  std::vector<int> target{1};
  auto ce = cross_entropy(tape, tape.constant(Tensor<double>::matrix(1, 3, {0, 0, 0})), target);
  CHECK(tape.value(ce).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  std::vector<int> bad{3};
  CHECK_THROWS_AS(cross_entropy(tape, tape.constant(Tensor<double>::matrix(1, 3, {0, 0, 0})), bad),
                  std::out_of_range);
  CHECK_THROWS_AS(add(tape, tape.constant(Tensor<double>::vector({1, 2})), tape.constant(Tensor<double>::vector({1}))),
                  ShapeError);
}

TEST_CASE("softmax rows sum to one and layer_norm standardizes rows") {
  std::mt19937_64 rng(11);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({8, 16}, rng, 3.0));
  const auto& s = tape.value(softmax_rows(tape, x));
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double total = 0.0;
    for (double v : s.row(r)) total += v;
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  auto ones = tape.constant(Tensor<double>({16}, 1.0));
  auto zeros = tape.constant(Tensor<double>({16}, 0.0));
  const auto& ln = tape.value(layer_norm(tape, x, ones, zeros, 1e-12));
  for (std::size_t r = 0; r < ln.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (double v : ln.row(r)) mean += v;
    mean /= 16.0;
    for (double v : ln.row(r)) var += (v - mean) * (v - mean);
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward: hand-derived and degenerate cases") {
  Tape<double> tape;
  auto w = tape.parameter(Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  auto x = tape.constant(Tensor<double>::matrix(3, 1, {0.5, -1.0, 2.0}));
  auto unused = tape.parameter(Tensor<double>::vector({1.0, 2.0}));
  auto loss = sum(tape, matmul(tape, w, x));
  tape.backward(loss);
  CHECK(tape.grad(w) == Tensor<double>::matrix(2, 3, {0.5, -1.0, 2.0, 0.5, -1.0, 2.0}));
  CHECK(tape.grad(unused) == Tensor<double>::vector({0.0, 0.0}));
  CHECK_THROWS_AS(tape.backward(loss), TapeError);

  Tape<double> other;
  auto v = other.parameter(Tensor<double>::vector({1.0, 2.0}));
  CHECK_THROWS_AS(other.backward(v), TapeError);
}

TEST_CASE("every differentiable primitive matches central finite differences") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> extent(2, 6);
  constexpr double kTol = 1e-4;
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t m = extent(rng), k = extent(rng), n = extent(rng);
    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto c = random_tensor({m, k}, rng);
    auto bias = random_tensor({k}, rng);
    auto weights = random_tensor({m, k}, rng);  // fixed projection to make sums informative
    auto project = [&](Tape<double>& t, Var v) { return sum(t, mul(t, v, t.constant(weights))); };

    SUBCASE("matmul") {
      auto w2 = random_tensor({m, n}, rng);
      auto r = check_gradients({a, b}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return sum(t, mul(t, matmul(t, p[0], p[1]), t.constant(w2)));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("transpose / add / sub / mul / scale") {
      auto r = check_gradients({a, c}, [&](Tape<double>& t, const std::vector<Var>& p) {
        auto tt = transpose(t, transpose(t, p[0]));
        auto e = scale(t, mul(t, sub(t, tt, p[1]), add(t, p[0], p[1])), 0.7);
        return project(t, e);
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("add_bias / relu / gelu") {
      auto r = check_gradients({a, bias}, [&](Tape<double>& t, const std::vector<Var>& p) {
        auto z = add_bias(t, p[0], p[1]);
        return add(t, project(t, relu(t, z)), project(t, gelu(t, z)));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("softmax_rows / layer_norm") {
      auto gain = random_tensor({k}, rng);
      auto r = check_gradients({a, gain, bias}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return project(t, softmax_rows(t, layer_norm(t, p[0], p[1], p[2])));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("cross_entropy with ignored rows") {
      std::vector<int> targets(m);
      for (std::size_t i = 0; i < m; ++i) targets[i] = static_cast<int>(i % k);
      targets[0] = -1;
      auto r = check_gradients({a}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return cross_entropy(t, p[0], targets);
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("logistic_loss") {
      std::vector<double> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = static_cast<double>(i % 2);
      auto col = random_tensor({m, 1}, rng, 2.0);
      auto r = check_gradients({col}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return logistic_loss(t, p[0], std::span<const double>(labels));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("l1_norm / l2_norm_sq") {
      auto r = check_gradients({a}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return add(t, l1_norm(t, p[0]), scale(t, l2_norm_sq(t, p[0]), 0.3));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("embedding_lookup / slice") {
      std::vector<std::size_t> ids{0, m - 1, 0, 1};
      auto w4 = random_tensor({3, k - 1}, rng);
      auto r = check_gradients({a}, [&](Tape<double>& t, const std::vector<Var>& p) {
        auto rows = embedding_lookup(t, p[0], ids);
        auto part = slice(t, rows, 1, 4, 1, k);
        return sum(t, mul(t, part, t.constant(w4)));
      });
      CHECK(r.max_relative_error < kTol);
    }
    SUBCASE("causal_attention over packed segments") {
      const std::size_t heads = 2, hidden = 4;
      auto qkv = random_tensor({7, 3 * hidden}, rng);
      auto w7 = random_tensor({7, hidden}, rng);
      std::vector<Segment> segs{{0, 3}, {3, 4}};
      auto r = check_gradients({qkv}, [&](Tape<double>& t, const std::vector<Var>& p) {
        return sum(t, mul(t, causal_attention(t, p[0], segs, heads), t.constant(w7)));
      });
      CHECK(r.max_relative_error < kTol);
    }
  }
}

TEST_CASE("causal attention only looks backwards") {
  std::mt19937_64 rng(5);
  auto qkv = random_tensor({5, 12}, rng);
  std::vector<Segment> seg{{0, 5}};
  Tape<double> t1;
  auto full = t1.value(causal_attention(t1, t1.constant(qkv), seg, 2));
  auto changed = qkv;
  for (std::size_t c = 0; c < 12; ++c) changed(4, c) += 1.0;
  Tape<double> t2;
  auto edited = t2.value(causal_attention(t2, t2.constant(changed), seg, 2));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(full(r, c) == edited(r, c));
}

TEST_CASE("adam: zero gradient, first step size, scalar reference") {
  Tensor<double> w = Tensor<double>::vector({1.5, -2.0});
  Tensor<double> zero({2});
  Tensor<double>* params[] = {&w};
  const Tensor<double>* grads[] = {&zero};
  auto state = make_adam_state<double>(std::span<const Tensor<double>* const>(params, 1));
  adam_step<double>(params, grads, state);
  CHECK(w == Tensor<double>::vector({1.5, -2.0}));

  Tensor<double> s = Tensor<double>::scalar(0.0);
  Tensor<double> one = Tensor<double>::scalar(1.0);
  Tensor<double>* sp[] = {&s};
  const Tensor<double>* sg[] = {&one};
  auto st = make_adam_state<double>(std::span<const Tensor<double>* const>(sp, 1));
  adam_step<double>(sp, sg, st);
  CHECK(std::abs(s[0]) == doctest::Approx(1e-3).epsilon(1e-6));

  Tensor<double> q = Tensor<double>::scalar(0.0);
  Tensor<double>* qp[] = {&q};
  auto qs = make_adam_state<double>(std::span<const Tensor<double>* const>(qp, 1), AdamOptions{.lr = 0.1});
  for (int i = 0; i < 100; ++i) {
    Tensor<double> g = Tensor<double>::scalar(2.0 * (q[0] - 3.0));
    const Tensor<double>* qg[] = {&g};
    adam_step<double>(qp, qg, qs);
  }
  CHECK(std::abs(q[0] - 3.0) < 0.1);
  CHECK(q[0] == doctest::Approx(scalar_adam_minimize(0.0, 0.1, 100)).epsilon(1e-12));

  Tensor<double> wrong({3});
  const Tensor<double>* bad[] = {&wrong};
  CHECK_THROWS_AS(adam_step<double>(params, bad, state), ShapeError);
}

TEST_CASE("finite-value guard is opt-in") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::vector({1e308, 1e308}));
  CHECK_NOTHROW(scale(tape, x, 10.0));
  set_finite_checks(true);
  CHECK_THROWS_AS(scale(tape, x, 10.0), NonFiniteError);
  set_finite_checks(false);
}

TEST_CASE("tensor container round trip and corruption detection") {
  std::mt19937_64 rng(1);
  TensorContainer c;
  c.header["kind"] = "test";
  c.put("weights", random_tensor<float>({3, 4}, rng));
  c.put("bias", random_tensor<double>({4}, rng));
  const auto bytes = c.serialize();
  auto back = TensorContainer::deserialize(bytes);
  CHECK(back.header["kind"] == "test");
  CHECK(back.get<float>("weights") == c.get<float>("weights"));
  CHECK(back.get<double>("bias") == c.get<double>("bias"));
  CHECK(back.get<double>("weights").shape() == Shape{3, 4});

  auto corrupt = bytes;
  corrupt[corrupt.size() / 2] ^= std::byte{0x01};
  CHECK_THROWS(TensorContainer::deserialize(corrupt));
  CHECK_THROWS(back.get<float>("missing"));

  const auto path = std::filesystem::temp_directory_path() / "saerec_container_test.srtc";
  const auto digest = c.save(path);
  CHECK(digest.size() == 64);
  CHECK(TensorContainer::load(path).get<float>("weights") == c.get<float>("weights"));
  std::filesystem::remove(path);
}
