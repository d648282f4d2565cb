#include "qarv/range_coder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qarv::prob {

namespace {

constexpr int kShift = 48;
constexpr int kPreambleBytes = 8;

}  // namespace

void RangeEncoder::encode(std::uint32_t start, std::uint32_t freq) {
  if (freq == 0 || std::uint64_t(start) + freq > kPmfTotal)
    throw std::invalid_argument("range coder: invalid interval");
  const std::uint64_t r = range_ >> kPmfPrecision;
  low_ += r * start;
  range_ = r * freq;
  while (range_ < kRangeBottom) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode_symbol(int n, const QuantizedPmf& pmf) {
  if (!pmf.contains(n))
    throw std::out_of_range("range coder: symbol " + std::to_string(n) + " outside [" +
                            std::to_string(pmf.n_min) + ", " + std::to_string(pmf.n_max) + "]");
  encode(pmf.start(n), pmf.freq(n));
}

void RangeEncoder::shift_low() {
  if (low_ < (std::uint64_t(0xFF) << kShift) || low_ >= kRangeTop) {
    const auto carry = std::uint8_t(low_ >> 56);
    std::uint8_t temp = cache_;
    do {
      out_.push_back(std::uint8_t(temp + carry));
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = std::uint8_t(low_ >> kShift);
  }
  ++cache_size_;
  low_ = (low_ & (kRangeBottom - 1)) << 8;
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  for (int i = 0; i < kPreambleBytes; ++i) shift_low();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  if (bytes.size() < std::size_t(kPreambleBytes))
    throw std::runtime_error("range decoder: stream shorter than its preamble");
  for (int i = 0; i < kPreambleBytes; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  if (pos_ >= bytes_.size()) throw std::runtime_error("range decoder: truncated stream");
  return bytes_[pos_++];
}

int RangeDecoder::decode_symbol(const QuantizedPmf& pmf) {
  const std::uint64_t r = range_ >> kPmfPrecision;
  const std::uint64_t v = std::min<std::uint64_t>(code_ / r, kPmfTotal - 1);
  // Largest index with cdf[index] <= v.
  const auto it = std::upper_bound(pmf.cdf.begin(), pmf.cdf.end(), std::uint32_t(v));
  const std::size_t index = std::size_t(it - pmf.cdf.begin()) - 1;
  code_ -= r * pmf.cdf[index];
  range_ = r * pmf.freqs[index];
  while (range_ < RangeEncoder::kRangeBottom) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
  return pmf.n_min + int(index);
}

std::vector<std::uint8_t> rc_encode(std::span<const int> symbols, std::span<const QuantizedPmf> pmfs) {
  if (symbols.size() != pmfs.size()) throw std::invalid_argument("rc_encode: one pmf per symbol required");
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode_symbol(symbols[i], pmfs[i]);
  return enc.finish();
}

std::vector<int> rc_decode(std::span<const std::uint8_t> bytes, std::span<const QuantizedPmf> pmfs) {
  RangeDecoder dec(bytes);
  std::vector<int> out;
  out.reserve(pmfs.size());
  for (const auto& pmf : pmfs) out.push_back(dec.decode_symbol(pmf));
  return out;
}

double ideal_bits(std::span<const int> symbols, std::span<const QuantizedPmf> pmfs) {
  if (symbols.size() != pmfs.size()) throw std::invalid_argument("ideal_bits: one pmf per symbol required");
  double bits = 0;
  for (std::size_t i = 0; i < symbols.size(); ++i)
    bits -= std::log2(double(pmfs[i].freq(symbols[i])) / double(kPmfTotal));
  return bits;
}

}  // namespace qarv::prob
