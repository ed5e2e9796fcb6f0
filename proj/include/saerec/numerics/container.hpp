#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "saerec/numerics/tensor.hpp"

namespace saerec::numerics {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

/// Named-tensor checkpoint file.
///
/// Layout (all integers little-endian):
///   magic "SRTC" | u32 format version | u64 header length | header JSON |
///   u32 entry count | entries... | 32-byte SHA-256 of all preceding bytes
/// where each entry is
///   u32 name length | UTF-8 name | u8 dtype | u32 rank | u64 extents[rank] | raw values
class TensorContainer {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  struct Entry {
    std::string name;
    AnyTensor tensor;
  };

  nlohmann::json header = nlohmann::json::object();

  void put(std::string name, AnyTensor tensor);
  bool contains(const std::string& name) const;

  /// Returns the named tensor converted to T.
  template <typename T>
  Tensor<T> get(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::byte> serialize() const;
  static TensorContainer deserialize(std::span<const std::byte> bytes);

  /// Writes the file and returns its SHA-256.
  std::string save(const std::filesystem::path& path) const;
  static TensorContainer load(const std::filesystem::path& path);

 private:
  const Entry& find(const std::string& name) const;
  std::vector<Entry> entries_;
};

}  // namespace saerec::numerics
