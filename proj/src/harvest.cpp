#include "saerec/harvest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "saerec/io/binary.hpp"
#include "saerec/io/checksum.hpp"
#include "saerec/util/parallel.hpp"

namespace saerec::harvest {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kDigestBytes = 32;

std::vector<std::byte> digest_bytes(std::span<const std::byte> body) {
  const std::string hex = io::sha256_hex(body);
  std::vector<std::byte> out(kDigestBytes);
  for (std::size_t i = 0; i < kDigestBytes; ++i) {
    out[i] = static_cast<std::byte>(std::stoi(hex.substr(2 * i, 2), nullptr, 16));
  }
  return out;
}

void require_dims(std::size_t got, const NormStats& stats) {
  if (got != stats.mean.size()) {
    throw numerics::ShapeError("norm stats have " + std::to_string(stats.mean.size()) + " dims, vector has " +
                               std::to_string(got));
  }
}

}  // namespace

ActivationSet harvest(const rec::RecModel<float>& model, const std::vector<data::UserSequence>& sequences,
                      std::size_t tap_layer, std::size_t threads) {
  if (sequences.empty()) throw std::invalid_argument("harvest: no sequences");
  const std::size_t h = model.config.hidden;
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sequences[a].user < sequences[b].user; });

  std::vector<std::size_t> offsets(order.size() + 1, 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    offsets[i + 1] = offsets[i] + std::min(sequences[order[i]].items.size(), model.config.max_len);
  }
  ActivationSet set;
  set.hidden = h;
  set.tap_layer = tap_layer;
  set.meta.resize(offsets.back());
  set.values.resize(offsets.back() * h);

  util::parallel_for(order.size(), threads, [&](std::size_t i) {
    const auto& seq = sequences[order[i]];
    if (seq.items.empty()) return;
    auto items = rec::truncate_history(seq.items, model.config.max_len);
    auto out = rec::forward(model, items, tap_layer);
    for (std::size_t p = 0; p < items.size(); ++p) {
      const std::size_t r = offsets[i] + p;
      set.meta[r] = RecordMeta{seq.user, static_cast<std::uint32_t>(p), items[p]};
      std::copy_n(out.hidden.row(p).data(), h, set.values.data() + r * h);
    }
  });
  return set;
}

NormStats fit_norm(const ActivationSet& set) {
  if (set.count() < 2) throw std::invalid_argument("fit_norm: need at least two records");
  const std::size_t h = set.hidden;
  std::vector<double> sum(h, 0.0);
  for (std::size_t i = 0; i < set.count(); ++i) {
    auto r = set.row(i);
    for (std::size_t d = 0; d < h; ++d) sum[d] += r[d];
  }
  const double n = static_cast<double>(set.count());
  std::vector<double> mean(h);
  for (std::size_t d = 0; d < h; ++d) mean[d] = sum[d] / n;
  std::vector<double> sq(h, 0.0);
  for (std::size_t i = 0; i < set.count(); ++i) {
    auto r = set.row(i);
    for (std::size_t d = 0; d < h; ++d) {
      const double c = r[d] - mean[d];
      sq[d] += c * c;
    }
  }
  NormStats stats;
  stats.mean.resize(h);
  stats.std.resize(h);
  for (std::size_t d = 0; d < h; ++d) {
    stats.mean[d] = static_cast<float>(mean[d]);
    float s = static_cast<float>(std::sqrt(sq[d] / n));
    if (!(s >= NormStats::kStdFloor)) {
      s = NormStats::kStdFloor;
      stats.floored.push_back(d);
    }
    stats.std[d] = s;
  }
  if (!stats.floored.empty()) {
    std::fprintf(stderr, "warning: %zu activation dimension(s) have near-zero variance; std floored at %g\n",
                 stats.floored.size(), static_cast<double>(NormStats::kStdFloor));
  }
  return stats;
}

void apply_norm(std::span<float> x, const NormStats& stats) {
  require_dims(x.size(), stats);
  for (std::size_t d = 0; d < x.size(); ++d) x[d] = (x[d] - stats.mean[d]) / stats.std[d];
}

void invert_norm(std::span<float> x, const NormStats& stats) {
  require_dims(x.size(), stats);
  for (std::size_t d = 0; d < x.size(); ++d) x[d] = x[d] * stats.std[d] + stats.mean[d];
}

std::vector<float> apply_norm(std::span<const float> x, const NormStats& stats) {
  std::vector<float> out(x.begin(), x.end());
  apply_norm(std::span<float>(out), stats);
  return out;
}

std::vector<float> invert_norm(std::span<const float> x, const NormStats& stats) {
  std::vector<float> out(x.begin(), x.end());
  invert_norm(std::span<float>(out), stats);
  return out;
}

ActivationSet normalized(const ActivationSet& set, const NormStats& stats) {
  ActivationSet out = set;
  for (std::size_t i = 0; i < out.count(); ++i) apply_norm(out.row(i), stats);
  return out;
}

std::string save_dump(const std::filesystem::path& path, const ActivationSet& set, const NormStats& stats) {
  require_dims(set.hidden, stats);
  io::ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(set.hidden));
  w.put(static_cast<std::uint64_t>(set.count()));
  w.put(static_cast<std::uint32_t>(set.tap_layer));
  w.put_string(set.model_checksum);
  w.put_array(std::span<const float>(stats.mean));
  w.put_array(std::span<const float>(stats.std));
  for (std::size_t i = 0; i < set.count(); ++i) {
    const RecordMeta& m = set.meta[i];
    w.put(static_cast<std::uint64_t>(m.user));
    w.put(m.position);
    w.put(static_cast<std::uint64_t>(m.item));
    w.put_array(set.row(i));
  }
  auto digest = digest_bytes(w.bytes());
  w.put_bytes(digest);
  io::write_file_bytes(path, w.bytes());
  return io::sha256_hex(w.bytes());
}

Dump load_dump(const std::filesystem::path& path) {
  const auto bytes = io::read_file_bytes(path);
  if (bytes.size() < sizeof(kMagic) + kDigestBytes) throw io::FormatError(path.string() + ": dump too short");
  const auto body = std::span(bytes).first(bytes.size() - kDigestBytes);
  const auto expected = digest_bytes(body);
  if (!std::equal(expected.begin(), expected.end(), bytes.end() - kDigestBytes)) {
    throw io::FormatError(path.string() + ": dump checksum mismatch");
  }
  io::ByteReader r(body);
  auto magic = r.get_bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw io::FormatError(path.string() + ": not a dump");
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw io::FormatError(path.string() + ": unsupported dump version " + std::to_string(v));
  }
  Dump d;
  d.set.hidden = r.get<std::uint32_t>();
  const auto count = static_cast<std::size_t>(r.get<std::uint64_t>());
  d.set.tap_layer = r.get<std::uint32_t>();
  d.set.model_checksum = r.get_string();
  d.stats.mean.resize(d.set.hidden);
  d.stats.std.resize(d.set.hidden);
  r.get_array(std::span<float>(d.stats.mean));
  r.get_array(std::span<float>(d.stats.std));
  const std::size_t record_bytes = 8 + 4 + 8 + 4 * d.set.hidden;
  if (r.remaining() != count * record_bytes) throw io::FormatError(path.string() + ": record section size mismatch");
  d.set.meta.resize(count);
  d.set.values.resize(count * d.set.hidden);
  for (std::size_t i = 0; i < count; ++i) {
    RecordMeta& m = d.set.meta[i];
    m.user = static_cast<std::int64_t>(r.get<std::uint64_t>());
    m.position = r.get<std::uint32_t>();
    m.item = static_cast<std::int64_t>(r.get<std::uint64_t>());
    r.get_array(d.set.row(i));
  }
  return d;
}

}  // namespace saerec::harvest
