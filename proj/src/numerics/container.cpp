#include "saerec/numerics/container.hpp"

#include <algorithm>
#include <cstring>

#include "saerec/io/binary.hpp"
#include "saerec/io/checksum.hpp"

namespace saerec::numerics {

namespace {

constexpr char kMagic[4] = {'S', 'R', 'T', 'C'};
constexpr std::size_t kDigestBytes = 32;

std::vector<std::byte> hex_to_bytes(const std::string& hex) {
  std::vector<std::byte> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::byte>(std::stoi(hex.substr(2 * i, 2), nullptr, 16));
  }
  return out;
}

}  // namespace

void TensorContainer::put(std::string name, AnyTensor tensor) {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
  if (it != entries_.end()) {
    it->tensor = std::move(tensor);
  } else {
    entries_.push_back(Entry{std::move(name), std::move(tensor)});
  }
}

bool TensorContainer::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

const TensorContainer::Entry& TensorContainer::find(const std::string& name) const {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
  if (it == entries_.end()) throw io::FormatError("container has no tensor named '" + name + "'");
  return *it;
}

template <typename T>
Tensor<T> TensorContainer::get(const std::string& name) const {
  return std::visit(
      [](const auto& t) -> Tensor<T> {
        using Stored = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<Stored, T>) {
          return t;
        } else {
          return t.template cast<T>();
        }
      },
      find(name).tensor);
}

template Tensor<float> TensorContainer::get<float>(const std::string&) const;
template Tensor<double> TensorContainer::get<double>(const std::string&) const;

std::vector<std::byte> TensorContainer::serialize() const {
  io::ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put(kFormatVersion);
  const std::string head = header.dump();
  w.put(static_cast<std::uint64_t>(head.size()));
  w.put_bytes(std::as_bytes(std::span(head.data(), head.size())));
  w.put(static_cast<std::uint32_t>(entries_.size()));
  for (const Entry& e : entries_) {
    w.put_string(e.name);
    std::visit(
        [&](const auto& t) {
          using Stored = typename std::decay_t<decltype(t)>::value_type;
          w.put(static_cast<std::uint8_t>(std::is_same_v<Stored, float> ? DType::f32 : DType::f64));
          w.put(static_cast<std::uint32_t>(t.rank()));
          for (std::size_t d : t.shape()) w.put(static_cast<std::uint64_t>(d));
          w.put_array(t.values());
        },
        e.tensor);
  }
  const std::string digest = io::sha256_hex(w.bytes());
  w.put_bytes(hex_to_bytes(digest));
  return std::move(w.bytes());
}

TensorContainer TensorContainer::deserialize(std::span<const std::byte> bytes) {
  if (bytes.size() < sizeof(kMagic) + kDigestBytes) throw io::FormatError("container too short");
  const auto body = bytes.first(bytes.size() - kDigestBytes);
  const auto stored = bytes.last(kDigestBytes);
  const auto expected = hex_to_bytes(io::sha256_hex(body));
  if (!std::equal(stored.begin(), stored.end(), expected.begin())) {
    throw io::FormatError("container checksum mismatch");
  }
  io::ByteReader r(body);
  auto magic = r.get_bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) throw io::FormatError("not a tensor container");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw io::FormatError("unsupported container version " + std::to_string(version));
  }
  TensorContainer out;
  const auto head_len = r.get<std::uint64_t>();
  auto head = r.get_bytes(static_cast<std::size_t>(head_len));
  out.header = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(head.data()), head.size()));
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (dtype == DType::f32) {
      Tensor<float> t(shape);
      r.get_array(t.values());
      out.entries_.push_back(Entry{std::move(name), std::move(t)});
    } else if (dtype == DType::f64) {
      Tensor<double> t(shape);
      r.get_array(t.values());
      out.entries_.push_back(Entry{std::move(name), std::move(t)});
    } else {
      throw io::FormatError("unknown dtype tag in entry '" + name + "'");
    }
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes after container entries");
  return out;
}

std::string TensorContainer::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  io::write_file_bytes(path, bytes);
  return io::sha256_hex(bytes);
}

TensorContainer TensorContainer::load(const std::filesystem::path& path) {
  return deserialize(io::read_file_bytes(path));
}

}  // namespace saerec::numerics
