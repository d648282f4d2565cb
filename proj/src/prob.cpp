#include "qarv/prob.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

namespace qarv::prob {

namespace {

template <typename T>
T phi_cdf(T x) {
  return T(0.5) * std::erfc(-x * T(std::numbers::sqrt2 / 2));
}

template <typename T>
T phi_pdf(T x) {
  return T(std::numbers::inv_sqrtpi / std::numbers::sqrt2) * std::exp(T(-0.5) * x * x);
}

// Mass of the unit window at offset d = z - mu_hat. Evaluated on the lower
// tail side (|d|) so the subtraction stays accurate far from the mean.
template <typename T>
T window_mass(T d, T sigma) {
  const T a = std::abs(d);
  return phi_cdf((T(0.5) - a) / sigma) - phi_cdf((T(-0.5) - a) / sigma);
}

}  // namespace

double std_normal_cdf(double x) { return phi_cdf(x); }

double clamp_sigma(double sigma) { return std::clamp(sigma, kSigmaMin, kSigmaMax); }

double prior_density(double z, double mu_hat, double sigma) {
  return std::max(window_mass(z - mu_hat, sigma), kDensityFloor);
}

template <typename T>
nn::Tensor<T> rate_nats(const nn::Tensor<T>& z, const nn::Tensor<T>& mu_hat,
                        const nn::Tensor<T>& sigma) {
  if (z.shape() != mu_hat.shape() || z.shape() != sigma.shape())
    throw std::invalid_argument("rate_nats: shape mismatch " + nn::shape_str(z.shape()) + ", " +
                                nn::shape_str(mu_hat.shape()) + ", " + nn::shape_str(sigma.shape()));
  auto out = nn::make_result<T>(z.shape(), {&z, &mu_hat, &sigma});
  auto zv = z.values(), mv = mu_hat.values(), sv = sigma.values();
  auto ov = out.mutable_values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const T p = std::max(window_mass(zv[i] - mv[i], sv[i]), T(kDensityFloor));
    ov[i] = -std::log(p);
  }
  if (out.requires_grad()) {
    out.node()->backward = [z, mu_hat, sigma](typename nn::Tensor<T>::Node& self) {
      auto find = [&](const nn::Tensor<T>& t) -> typename nn::Tensor<T>::Node* {
        for (auto& in : self.inputs)
          if (in.get() == t.node()) return in.get();
        return nullptr;
      };
      auto* gz = find(z);
      auto* gm = find(mu_hat);
      auto* gs = find(sigma);
      auto zv = z.values(), mv = mu_hat.values(), sv = sigma.values();
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        const T s = sv[i], d = zv[i] - mv[i];
        const T upper = (d + T(0.5)) / s, lower = (d - T(0.5)) / s;
        const T pu = phi_pdf(upper), pl = phi_pdf(lower);
        // The floor only guards the log; the gradient of the unfloored mass
        // still flows so a badly placed latent keeps receiving signal.
        const T p = std::max(window_mass(d, s), T(kDensityFloor));
        const T k = -self.grad[i] / p;
        const T dp_dd = (pu - pl) / s;
        if (gz) gz->grad_buffer()[i] += k * dp_dd;
        if (gm) gm->grad_buffer()[i] -= k * dp_dd;
        if (gs) gs->grad_buffer()[i] += k * (-(upper * pu - lower * pl) / s);
      }
    };
  }
  return out;
}

std::vector<double> real_pmf(double sigma, int n_min, int n_max) {
  if (n_min > n_max) throw std::invalid_argument("real_pmf: empty alphabet");
  if (!(sigma > 0) || !std::isfinite(sigma))
    throw std::invalid_argument("real_pmf: sigma must be positive and finite");
  std::vector<double> p(std::size_t(n_max - n_min + 1));
  for (int n = n_min; n <= n_max; ++n) {
    const double a = std::abs(double(n));
    double mass;
    // Edge symbols absorb everything beyond them. Mirror to the lower tail.
    const bool lower_edge = (n == n_min), upper_edge = (n == n_max);
    if (lower_edge && upper_edge) {
      mass = 1.0;
    } else if ((lower_edge && n <= 0) || (upper_edge && n >= 0)) {
      mass = phi_cdf((0.5 - a) / sigma);
    } else if (lower_edge) {  // n_min > 0: everything below n_min + 1/2
      mass = 1.0 - phi_cdf((-0.5 - a) / sigma);
    } else if (upper_edge) {  // n_max < 0
      mass = 1.0 - phi_cdf((-0.5 - a) / sigma);
    } else {
      mass = window_mass(double(n), sigma);
    }
    p[std::size_t(n - n_min)] = mass;
  }
  return p;
}

QuantizedPmf quantize_pmf(std::span<const double> pmf, int n_min) {
  const std::size_t k = pmf.size();
  if (k == 0) throw std::invalid_argument("quantize_pmf: empty pmf");
  if (k > kPmfTotal) throw std::logic_error("quantize_pmf: alphabet larger than the total");

  QuantizedPmf q;
  q.n_min = n_min;
  q.n_max = n_min + int(k) - 1;
  q.freqs.resize(k);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double scaled = std::max(pmf[i], 0.0) * double(kPmfTotal);
    q.freqs[i] = std::uint32_t(std::min(std::floor(scaled), double(kPmfTotal)));
    assigned += q.freqs[i];
  }

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pmf[a] > pmf[b]; });
  std::int64_t remainder = std::int64_t(kPmfTotal) - assigned;
  for (std::size_t j = 0; remainder > 0; j = (j + 1) % k, --remainder) ++q.freqs[order[j]];
  for (std::size_t j = 0; remainder < 0; j = (j + 1) % k) {
    if (q.freqs[order[j]] > 0) {
      --q.freqs[order[j]];
      ++remainder;
    }
  }

  auto largest = [&] {
    return std::size_t(std::max_element(q.freqs.begin(), q.freqs.end()) - q.freqs.begin());
  };
  for (std::size_t i = 0; i < k; ++i) {
    if (q.freqs[i] == 0) {
      const std::size_t donor = largest();
      if (q.freqs[donor] <= 1) throw std::logic_error("quantize_pmf: cannot enforce minimum frequency");
      --q.freqs[donor];
      q.freqs[i] = 1;
    }
  }

  q.cdf.assign(k + 1, 0);
  for (std::size_t i = 0; i < k; ++i) q.cdf[i + 1] = q.cdf[i] + q.freqs[i];
  if (q.cdf[k] != kPmfTotal) throw std::logic_error("quantize_pmf: frequencies do not sum to total");
  return q;
}

QuantizedPmf pmf_for_sigma(double sigma, int n_min, int n_max) {
  const auto p = real_pmf(sigma, n_min, n_max);
  return quantize_pmf(p, n_min);
}

template nn::Tensor<float> rate_nats(const nn::Tensor<float>&, const nn::Tensor<float>&,
                                     const nn::Tensor<float>&);
template nn::Tensor<double> rate_nats(const nn::Tensor<double>&, const nn::Tensor<double>&,
                                      const nn::Tensor<double>&);

}  // namespace qarv::prob
