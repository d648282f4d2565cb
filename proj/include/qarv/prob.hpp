#pragma once

// Probability model of the latents.
//
// Posterior: a unit-width uniform centred at mu. Prior: a Gaussian
// N(mu_hat, sigma^2) convolved with U(-1/2, 1/2), so its density at z is the
// Gaussian mass of the unit window around z. Evaluated at mu_hat + n for
// integer n it becomes the discretized Gaussian PMF used for entropy coding,
// which depends on sigma only.

#include <cstdint>
#include <span>
#include <vector>

#include "qarv/tensor.hpp"

namespace qarv::prob {

inline constexpr double kSigmaMin = 1e-2;
inline constexpr double kSigmaMax = 1e2;
inline constexpr double kDensityFloor = 1e-9;
inline constexpr int kDefaultNMin = -32;
inline constexpr int kDefaultNMax = 32;
inline constexpr unsigned kPmfPrecision = 16;
inline constexpr std::uint32_t kPmfTotal = 1u << kPmfPrecision;

// Standard normal CDF through the complementary error function.
double std_normal_cdf(double x);

// Gaussian mass of [z - 1/2, z + 1/2] under N(mu_hat, sigma^2), floored at
// kDensityFloor.
double prior_density(double z, double mu_hat, double sigma);

// -ln prior_density, elementwise and differentiable in all three arguments.
template <typename T>
nn::Tensor<T> rate_nats(const nn::Tensor<T>& z, const nn::Tensor<T>& mu_hat,
                        const nn::Tensor<T>& sigma);

// Integer-frequency PMF over symbols [n_min, n_max] summing to kPmfTotal.
struct QuantizedPmf {
  int n_min = kDefaultNMin;
  int n_max = kDefaultNMax;
  std::vector<std::uint32_t> freqs;
  std::vector<std::uint32_t> cdf;  // size freqs.size() + 1, cdf[0] = 0

  std::size_t size() const { return freqs.size(); }
  bool contains(int n) const { return n >= n_min && n <= n_max; }
  std::uint32_t freq(int n) const { return freqs[std::size_t(n - n_min)]; }
  std::uint32_t start(int n) const { return cdf[std::size_t(n - n_min)]; }
};

// P(n) = Phi((n + 1/2)/sigma) - Phi((n - 1/2)/sigma) over [n_min, n_max], with
// the tail mass beyond either bound folded into the edge symbol.
std::vector<double> real_pmf(double sigma, int n_min = kDefaultNMin, int n_max = kDefaultNMax);

// Deterministic integer quantization of a real PMF: floor(P * total), give
// the remainder one unit at a time to the largest masses (ties to the lowest
// index), then lift zero bins to 1 by taking from the current largest bin.
QuantizedPmf quantize_pmf(std::span<const double> pmf, int n_min);

QuantizedPmf pmf_for_sigma(double sigma, int n_min = kDefaultNMin, int n_max = kDefaultNMax);

// Clamp sigma into [kSigmaMin, kSigmaMax].
double clamp_sigma(double sigma);

}  // namespace qarv::prob
