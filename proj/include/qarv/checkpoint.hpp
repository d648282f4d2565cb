#pragma once

// Self-describing binary checkpoint:
//
//   magic "QARVCKPT" | version u16 | entry count u32 |
//   per entry: name length u16, UTF-8 name, dtype u8, rank u8,
//              extents u32 x rank, raw little-endian values
//
// All integers are little-endian. EMA shadows live under "<param>/ema".

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qarv/params.hpp"

namespace qarv::nn {

inline constexpr char kCheckpointMagic[8] = {'Q', 'A', 'R', 'V', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> extents;
  std::vector<std::uint8_t> raw;

  std::size_t count() const;
  std::vector<double> as_doubles() const;
  std::string as_string() const;
};

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values);
  void put_string(const std::string& name, const std::string& text);
  void put_entry(CheckpointEntry entry);

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;
  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint parse(std::span<const std::uint8_t> bytes);

  // Written to a temporary file first and renamed, so an existing checkpoint
  // is never left half-overwritten.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointEntry> entries_;
};

// Stores every parameter (as float32) and optionally its EMA shadow.
template <typename T>
void put_parameters(Checkpoint& ckpt, const ParameterStore<T>& store, const EmaState<T>* ema);

// Loads parameters by name. With use_ema, "<name>/ema" is preferred when
// present. Throws if a parameter is missing or has the wrong shape.
template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterStore<T>& store, bool use_ema);

}  // namespace qarv::nn
