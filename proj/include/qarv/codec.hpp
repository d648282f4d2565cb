#pragma once

// Image compression with a trained model: latent quantization, one range
// coded stream per latent, the container format and partial decoding.
//
// Container (all integers little-endian):
//
//   "QARV" | version u16 | model config hash u64 | lambda f32 |
//   width u32 | height u32 | stream count u8 |
//   per stream: byte length u32, payload
//
// Within a stream the symbols n = z - mu_hat follow NCHW raster order
// (channel-major), each coded with the PMF of its own sigma_hat.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarv/image.hpp"
#include "qarv/model.hpp"
#include "qarv/prob.hpp"

namespace qarv::codec {

inline constexpr char kMagic[4] = {'Q', 'A', 'R', 'V'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kFixedHeaderBytes = 4 + 2 + 8 + 4 + 4 + 4 + 1;
inline constexpr std::size_t kStreamLengthBytes = 4;

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Container {
  std::uint16_t version = kVersion;
  std::uint64_t config_hash = 0;
  float lambda = 0;
  std::uint32_t width = 0, height = 0;
  std::vector<std::vector<std::uint8_t>> streams;

  bool operator==(const Container&) const = default;
  std::size_t header_bytes() const { return kFixedHeaderBytes + kStreamLengthBytes * streams.size(); }
  std::size_t total_bytes() const;
  std::vector<std::uint8_t> serialize() const;
  // Throws CodecError on a bad magic, unknown version or truncated data.
  static Container parse(std::span<const std::uint8_t> bytes);
};

// n = clamp(round_half_away_from_zero(mu - mu_hat), n_min, n_max) and
// z = mu_hat + n, elementwise.
struct Quantized {
  nn::Tensor<float> z;
  std::vector<int> symbols;
};
Quantized quantize_latent(const nn::Tensor<float>& mu, const nn::Tensor<float>& mu_hat,
                          int n_min = prob::kDefaultNMin, int n_max = prob::kDefaultNMax);

struct CompressResult {
  Container container;
  std::vector<nn::Tensor<float>> z;         // quantized latents, encoder side
  std::vector<std::vector<int>> symbols;    // per latent
  std::vector<nn::Tensor<float>> mu, mu_hat;  // posterior and prior means
  std::vector<double> ideal_bits;           // per latent, -sum log2 P(n)
  image::Image reconstruction;              // what a full decode yields
};

// Throws std::invalid_argument if lambda lies outside the model's range.
CompressResult compress(const model::QarvModel<float>& m, const image::Image& img, double lambda);

enum class DecodeKind { kFull, kProgressive, kLeaveOneOut, kDisjoint };

// Latent indices are 1-based, as on the command line.
struct DecodeMode {
  DecodeKind kind = DecodeKind::kFull;
  std::size_t index = 0;

  static DecodeMode full() { return {}; }
  static DecodeMode progressive(std::size_t i) { return {DecodeKind::kProgressive, i}; }
  static DecodeMode leave_one_out(std::size_t i) { return {DecodeKind::kLeaveOneOut, i}; }
  static DecodeMode disjoint(std::size_t i) { return {DecodeKind::kDisjoint, i}; }
  // "full", "progressive:i", "loo:i" or "disjoint:i".
  static DecodeMode parse(const std::string& s);
  std::string to_string() const;
  // Whether latent j (1-based) is taken from the bitstream.
  bool uses(std::size_t j) const;
};

struct DecodeResult {
  image::Image image;
  std::vector<nn::Tensor<float>> z;  // latents as used for the reconstruction
  std::vector<nn::Tensor<float>> decoded_z;  // latents recovered from the streams read
};

// Full and progressive modes read streams in order and substitute mu_hat for
// the rest. Leave-one-out and disjoint first recover every latent along the
// full chain (later streams were coded against priors that saw the true
// earlier latents), then rerun the decoder with mu_hat for the skipped ones.
DecodeResult decompress(const model::QarvModel<float>& m, const Container& c,
                        const DecodeMode& mode = DecodeMode::full());

struct RateBreakdown {
  std::vector<double> bits;       // payload bits per latent
  std::vector<double> fractions;  // of the total payload
  std::size_t header_bytes = 0;
};
RateBreakdown rate_breakdown(const Container& c);

}  // namespace qarv::codec
