#pragma once

// Shared helpers for unit and acceptance tests: random tensors, naive
// reference kernels, a central-difference gradient checker and quadrature.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "qarv/params.hpp"
#include "qarv/tensor.hpp"

namespace qarv::test {

inline nn::Tensor<double> random_tensor(nn::Shape shape, std::uint64_t seed, double lo = -1,
                                        double hi = 1, bool requires_grad = false) {
  nn::InitRng rng(seed);
  nn::Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = lo + (hi - lo) * rng.uniform();
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

// Fills every parameter with small random values so zero-initialized
// projections stop masking dependencies.
template <typename T>
void perturb_all(nn::ParameterStore<T>& store, std::uint64_t seed, double scale) {
  nn::InitRng rng(seed);
  for (auto& p : store.params())
    for (auto& v : p.value.mutable_values()) v += T(scale * (2 * rng.uniform() - 1));
}

struct GradCheckResult {
  double rel_error = 0;    // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_error = 0;
  std::size_t coordinates = 0;
};

// Compares backward() against central differences on up to `per_leaf`
// randomly chosen coordinates of every leaf. `loss_fn` must rebuild the graph
// from the leaves' current values on each call.
inline GradCheckResult grad_check(std::vector<nn::Tensor<double>> leaves,
                                  const std::function<nn::Tensor<double>()>& loss_fn,
                                  std::size_t per_leaf = 48, std::uint64_t seed = 7, double h = 1e-5) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  nn::backward(loss_fn());
  std::mt19937_64 rng(seed);
  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheckResult result;
  for (auto& leaf : leaves) {
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    std::vector<std::size_t> coords(leaf.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_leaf);
    }
    auto values = leaf.mutable_values();
    for (auto i : coords) {
      const double saved = values[i];
      double plus, minus;
      {
        nn::NoGradGuard guard;
        values[i] = saved + h;
        plus = loss_fn().item();
        values[i] = saved - h;
        minus = loss_fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double d = analytic[i] - numeric;
      diff2 += d * d;
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      result.max_abs_error = std::max(result.max_abs_error, std::abs(d));
      ++result.coordinates;
    }
  }
  const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
  result.rel_error = scale > 0 ? std::sqrt(diff2) / scale : std::sqrt(diff2);
  return result;
}

// Composite Simpson rule on [a, b] with an even number of panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int panels = 2000) {
  if (panels % 2) ++panels;
  const double h = (b - a) / panels;
  double s = f(a) + f(b);
  for (int i = 1; i < panels; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

inline double gaussian_pdf(double x, double mean, double sigma) {
  const double u = (x - mean) / sigma;
  return std::exp(-0.5 * u * u) / (sigma * std::sqrt(2 * M_PI));
}

// Density of N(mean, sigma^2) * U(-1/2, 1/2) at z by direct quadrature of the
// Gaussian pdf over the unit window.
inline double boxed_gaussian_quadrature(double z, double mean, double sigma) {
  return simpson([&](double t) { return gaussian_pdf(t, mean, sigma); }, z - 0.5, z + 0.5, 4000);
}

}  // namespace qarv::test
