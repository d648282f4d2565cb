#pragma once

// Byte-oriented range coder for 16-bit frequency tables.
//
// The low accumulator keeps 56 bits plus a carry bit and the range stays in
// [2^48, 2^56], so the per-symbol precision loss from r = range >> 16 is
// negligible. Carries are resolved with a cached byte and a count of pending
// 0xFF bytes. A stream always starts with a zero byte and ends with the
// flushed low register, so even an empty sequence costs eight bytes.

#include <cstdint>
#include <span>
#include <vector>

#include "qarv/prob.hpp"

namespace qarv::prob {

class RangeEncoder {
 public:
  static constexpr std::uint64_t kRangeTop = std::uint64_t(1) << 56;
  static constexpr std::uint64_t kRangeBottom = std::uint64_t(1) << 48;

  // Codes the interval [start, start + freq) out of kPmfTotal.
  void encode(std::uint32_t start, std::uint32_t freq);
  // Throws std::out_of_range if n lies outside the pmf's alphabet.
  void encode_symbol(int n, const QuantizedPmf& pmf);
  std::vector<std::uint8_t> finish();

 private:
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint64_t range_ = kRangeTop;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  // Throws std::runtime_error if the stream is shorter than its preamble.
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);
  // Throws std::runtime_error when the stream runs out (truncated input).
  int decode_symbol(const QuantizedPmf& pmf);
  std::size_t consumed() const { return pos_; }

 private:
  std::uint8_t next_byte();

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint64_t code_ = 0;
  std::uint64_t range_ = RangeEncoder::kRangeTop;
};

std::vector<std::uint8_t> rc_encode(std::span<const int> symbols, std::span<const QuantizedPmf> pmfs);
std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedPmf> pmfs);

// Ideal code length of the sequence in bits, sum of -log2(freq / total).
double ideal_bits(std::span<const int> symbols, std::span<const QuantizedPmf> pmfs);

}  // namespace qarv::prob
