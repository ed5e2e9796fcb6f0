#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "saerec/numerics/ops.hpp"
#include "saerec/sae.hpp"
#include "support/gradcheck.hpp"
#include "support/random.hpp"

using namespace saerec;
using namespace saerec::sae;

namespace {

harvest::ActivationSet make_set(std::size_t n, std::size_t dim, const std::function<void(std::span<float>)>& fill) {
  harvest::ActivationSet s;
  s.hidden = dim;
  s.meta.resize(n);
  s.values.resize(n * dim);
  for (std::size_t i = 0; i < n; ++i) fill(s.row(i));
  return s;
}

// Points in a random `rank`-dimensional subspace of R^dim.
harvest::ActivationSet subspace_data(std::size_t n, std::size_t dim, std::size_t rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto basis = testing::random_tensor<float>({rank, dim}, rng);
  std::normal_distribution<float> g(0.0f, 1.0f);
  return make_set(n, dim, [&](std::span<float> x) {
    std::fill(x.begin(), x.end(), 0.0f);
    for (std::size_t k = 0; k < rank; ++k) {
      const float c = g(rng) / std::sqrt(float(rank));
      for (std::size_t d = 0; d < dim; ++d) x[d] += c * basis(k, d);
    }
  });
}

// Sparse nonnegative combinations of 32 unit directions in R^16.
harvest::ActivationSet sparse_data(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto dirs = testing::random_tensor<float>({32, 16}, rng);
  for (std::size_t k = 0; k < 32; ++k) {
    float norm = 0.0f;
    for (float v : dirs.row(k)) norm += v * v;
    for (float& v : dirs.row(k)) v /= std::sqrt(norm);
  }
  std::uniform_int_distribution<std::size_t> pick(0, 31);
  std::exponential_distribution<float> mag(1.0f);
  return make_set(n, 16, [&](std::span<float> x) {
    std::fill(x.begin(), x.end(), 0.0f);
    for (int a = 0; a < 3; ++a) {
      const std::size_t k = pick(rng);
      const float c = mag(rng);
      for (std::size_t d = 0; d < 16; ++d) x[d] += c * dirs(k, d);
    }
  });
}

SaeModel<float> identity_sae(std::size_t n) {
  SaeModel<float> s;
  s.config.input_dim = s.config.dict_size = n;
  s.encoder = numerics::identity<float>(n);
  s.decoder = numerics::identity<float>(n);
  s.encoder_bias = Tensor<float>({n});
  s.decoder_bias = Tensor<float>({n});
  return s;
}

}  // namespace

TEST_CASE("encode and decode hand cases") {
  auto s = identity_sae(2);
  std::vector<float> x{1.0f, -1.0f};
  CHECK(s.encode(x) == std::vector<float>{1.0f, 0.0f});

  SaeConfig cfg;
  cfg.input_dim = 6;
  cfg.dict_size = 10;
  auto r = SaeModel<float>::init(cfg);
  std::mt19937_64 rng(2);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (float& b : r.encoder_bias.values()) b = g(rng);
  for (float& b : r.decoder_bias.values()) b = g(rng);
  for (int k = 0; k < 20; ++k) {
    std::vector<float> v(6);
    for (float& e : v) e = g(rng);
    for (float h : r.encode(v)) CHECK(h >= 0.0f);
  }
  std::vector<float> zero_x(6, 0.0f), zero_h(10, 0.0f);
  auto h0 = r.encode(zero_x);
  for (std::size_t j = 0; j < 10; ++j) CHECK(h0[j] == std::max(r.encoder_bias[j], 0.0f));
  auto x0 = r.decode(zero_h);
  for (std::size_t i = 0; i < 6; ++i) CHECK(x0[i] == r.decoder_bias[i]);

  std::vector<float> h1(10), h2(10), h12(10);
  for (std::size_t j = 0; j < 10; ++j) {
    h1[j] = std::abs(g(rng));
    h2[j] = std::abs(g(rng));
    h12[j] = h1[j] + h2[j];
  }
  auto d1 = r.decode(h1), d2 = r.decode(h2), d12 = r.decode(h12);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs((d12[i] - x0[i]) - ((d1[i] - x0[i]) + (d2[i] - x0[i]))) < 1e-6);

  CHECK(r.decoder_norm_error() < 1e-6);
  for (std::size_t j = 0; j < 10; ++j) {
    std::vector<float> e(10, 0.0f);
    e[j] = 1.0f;
    auto x = r.decode(e);
    double n2 = 0.0;
    for (std::size_t i = 0; i < 6; ++i) n2 += double(x[i] - r.decoder_bias[i]) * (x[i] - r.decoder_bias[i]);
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
  }
  // init: encoder is the decoder transposed, biases start at zero
  auto fresh = SaeModel<float>::init(cfg);
  CHECK(fresh.encoder == numerics::transposed(fresh.decoder));
  for (float b : fresh.encoder_bias.values()) CHECK(b == 0.0f);

  std::vector<float> wrong(5);
  CHECK_THROWS_AS(r.encode(wrong), numerics::ShapeError);
  CHECK_THROWS_AS(r.decode(wrong), numerics::ShapeError);

  // batch paths agree with the per-vector ones
  Tensor<float> batch({3, 6});
  for (float& v : batch.values()) v = g(rng);
  auto hb = r.encode_batch(batch);
  auto xb = r.decode_batch(hb);
  for (std::size_t row = 0; row < 3; ++row) {
    auto hv = r.encode(batch.row(row));
    auto xv = r.decode(hv);
    for (std::size_t j = 0; j < 10; ++j) CHECK(std::abs(hb(row, j) - hv[j]) < 1e-5);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(xb(row, i) - xv[i]) < 1e-5);
  }
}

TEST_CASE("reconstruction_metrics definitions") {
  std::vector<float> x{1, 2, 3, 4};
  CHECK(reconstruction_metrics(x, x, {}, 0).rmse == 0.0);
  CHECK(reconstruction_metrics(x, x, {}, 0).explained_variance == 1.0);
  std::vector<float> mean(4, 2.5f);
  CHECK(std::abs(reconstruction_metrics(x, mean, {}, 0).explained_variance) < 1e-12);

  // two records of width 2, reconstructions off by [1, 0]
  std::vector<float> a{0, 1, 2, 3};
  std::vector<float> b{1, 1, 3, 3};
  std::vector<float> codes{0.0f, 2.0f, 0.5f, 1.0f, 0.0f, 0.0f};  // 2 records x 3 features
  auto m = reconstruction_metrics(a, b, codes, 3);
  CHECK(m.rmse == doctest::Approx(std::sqrt(2.0 / 4.0)).epsilon(1e-12));
  // residuals [-1, 0, -1, 0]: var 0.25; inputs var 1.25
  CHECK(m.explained_variance == doctest::Approx(1.0 - 0.25 / 1.25).epsilon(1e-12));
  CHECK(m.l0 == doctest::Approx(1.5));
}

TEST_CASE("SAE loss gradient check at 64-bit") {
  std::mt19937_64 rng(3);
  const std::size_t n = 5, m = 7, batch = 4;
  std::vector<Tensor<double>> params{testing::random_tensor<double>({m, n}, rng, 0.7),
                                     testing::random_tensor<double>({m}, rng, 0.3),
                                     testing::random_tensor<double>({n, m}, rng, 0.7),
                                     testing::random_tensor<double>({n}, rng, 0.3)};
  auto x = testing::random_tensor<double>({batch, n}, rng);
  // keep pre-activations away from the ReLU kink so the L1 subgradient is well defined
  auto pre = numerics::matmul_transposed(x, params[0]);
  std::size_t active = 0;
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t j = 0; j < m; ++j) {
      const double z = pre(r, j) + params[1][j];
      REQUIRE(std::abs(z) > 1e-3);
      active += z > 0;
    }
  REQUIRE(active > 0);
  auto result = testing::check_gradients(params, [&](Tape<double>& tape, const std::vector<Var>& v) {
    return record_sae_loss(tape, SaeVars{v[0], v[1], v[2], v[3]}, tape.constant(x), 0.3);
  });
  CHECK(result.max_relative_error < 1e-4);

  // loss value against a direct evaluation
  SaeModel<double> s{SaeConfig{}, params[0], params[1], params[2], params[3]};
  double direct = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    auto h = s.encode(x.row(r));
    auto xh = s.decode(h);
    for (std::size_t i = 0; i < n; ++i) direct += (x(r, i) - xh[i]) * (x(r, i) - xh[i]);
    for (double v : h) direct += 0.3 * v;
  }
  direct /= double(batch);
  Tape<double> tape;
  SaeVars v{tape.constant(params[0]), tape.constant(params[1]), tape.constant(params[2]), tape.constant(params[3])};
  CHECK(tape.value(record_sae_loss(tape, v, tape.constant(x), 0.3)).item() == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("decoder gradient projection is orthogonal to the columns") {
  std::mt19937_64 rng(4);
  SaeConfig cfg;
  cfg.input_dim = 4;
  cfg.dict_size = 6;
  auto s = SaeModel<double>::init(cfg);
  auto g = testing::random_tensor<double>({4, 6}, rng);
  project_decoder_gradient(s.decoder, g);
  for (std::size_t j = 0; j < 6; ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < 4; ++i) dot += g(i, j) * s.decoder(i, j);
    CHECK(std::abs(dot) < 1e-12);
  }
}

TEST_CASE("no penalty recovers low-rank data") {
  auto data = subspace_data(4000, 64, 10, 5);
  SaeConfig cfg;
  cfg.input_dim = 64;
  cfg.dict_size = 128;
  cfg.l1_weight = 0.0;
  cfg.lr = 3e-3;
  cfg.epochs = 30;
  cfg.batch_size = 128;
  auto s = SaeModel<float>::init(cfg);
  auto report = train_sae(s, data);
  CHECK(reconstruction_metrics(s, data).explained_variance > 0.99);
  CHECK(s.decoder_norm_error() < 1e-4);
  // 10-epoch moving averages of the loss decrease
  CHECK(report.epoch_loss.size() == 30);
  auto window = [&](std::size_t start) {
    double t = 0.0;
    for (std::size_t e = start; e < start + 10; ++e) t += report.epoch_loss[e];
    return t;
  };
  CHECK(window(10) < window(0));
  CHECK(window(20) < window(10));
}

TEST_CASE("huge penalty collapses the codes") {
  auto data = subspace_data(1000, 16, 4, 6);
  SaeConfig cfg;
  cfg.input_dim = 16;
  cfg.dict_size = 32;
  cfg.l1_weight = 1e3;
  cfg.lr = 1e-2;
  cfg.epochs = 20;
  cfg.batch_size = 100;
  auto s = SaeModel<float>::init(cfg);
  train_sae(s, data);
  auto m = reconstruction_metrics(s, data);
  CHECK(m.l0 < 0.05);
  for (float b : s.decoder_bias.values()) CHECK(std::abs(b) < 0.1);
}

TEST_CASE("larger L1 weight: fewer active features, worse reconstruction") {
  auto data = sparse_data(3000, 7);
  std::vector<ReconstructionMetrics> ms;
  for (double lambda : {0.05, 0.1, 0.3}) {
    SaeConfig cfg;
    cfg.input_dim = 16;
    cfg.dict_size = 64;
    cfg.l1_weight = lambda;
    cfg.lr = 3e-3;
    cfg.epochs = 30;
    cfg.batch_size = 128;
    auto s = SaeModel<float>::init(cfg);
    train_sae(s, data);
    ms.push_back(reconstruction_metrics(s, data));
    CHECK(s.decoder_norm_error() < 1e-4);
  }
  for (std::size_t i = 1; i < ms.size(); ++i) {
    CHECK(ms[i].l0 < ms[i - 1].l0);
    CHECK(ms[i].rmse > ms[i - 1].rmse);
  }
}

TEST_CASE("training determinism and checkpoint round trip") {
  auto data = sparse_data(500, 9);
  SaeConfig cfg;
  cfg.input_dim = 16;
  cfg.dict_size = 24;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  cfg.seed = 5;
  auto a = SaeModel<float>::init(cfg);
  auto b = SaeModel<float>::init(cfg);
  auto ra = train_sae(a, data);
  auto rb = train_sae(b, data);
  CHECK(ra.epoch_loss == rb.epoch_loss);
  CHECK(a.decoder == b.decoder);
  CHECK(ra.steps == 3 * 8);

  harvest::NormStats stats{std::vector<float>(16, 0.5f), std::vector<float>(16, 2.0f), {}};
  auto path = std::filesystem::temp_directory_path() / "saerec_sae_ckpt.bin";
  save_sae(a, path, "dumpsum", stats);
  auto back = load_sae(path);
  CHECK(back.model.encoder == a.encoder);
  CHECK(back.model.decoder_bias == a.decoder_bias);
  CHECK(back.model.config.dict_size == 24);
  CHECK(back.stats == stats);
  CHECK(back.dump_checksum == "dumpsum");

  SaeConfig bad = cfg;
  bad.l1_weight = -1.0;
  CHECK_THROWS(SaeModel<float>::init(bad));
}
