#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "qarv/ops.hpp"
#include "qarv/prob.hpp"
#include "qarv/range_coder.hpp"
#include "support.hpp"

using namespace qarv;
using nn::Shape;
using nn::Tensor;

TEST_CASE("standard normal cdf") {
  CHECK(prob::std_normal_cdf(0.0) == 0.5);
  // 30-digit reference value.
  CHECK(std::abs(prob::std_normal_cdf(0.5) - 0.691462461274013103637704610608) < 1e-7);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-6, 6);
  for (int i = 0; i < 100; ++i) {
    const double x = u(rng);
    CHECK(prob::std_normal_cdf(x) + prob::std_normal_cdf(-x) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("prior density") {
  CHECK(prob::prior_density(0.3, 0.3, prob::kSigmaMin) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(prob::prior_density(0.0, 0.0, 1.0) - 0.382924922548026207275409221217) < 1e-6);
  const double total = test::simpson([](double z) { return prob::prior_density(z, 0.4, 1.3); }, -15, 15, 6000);
  CHECK(std::abs(total - 1.0) < 1e-4);
  CHECK(prob::prior_density(1e6, 0.0, 0.01) == prob::kDensityFloor);
}

TEST_CASE("rate_nats values and gradients") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> mean(-3, 3), sig(-1.5, 1.0);
  Tensor<double> z(Shape{64}), m(Shape{64}), s(Shape{64});
  for (std::size_t i = 0; i < 64; ++i) {
    m.mutable_values()[i] = mean(rng);
    z.mutable_values()[i] = m[i] + mean(rng);
    s.mutable_values()[i] = std::exp(sig(rng));
  }
  auto r = prob::rate_nats(z, m, s);
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(r[i] >= 0.0);
    const double density = std::max(test::boxed_gaussian_quadrature(z[i], m[i], s[i]), prob::kDensityFloor);
    const double oracle = -std::log(density);
    CHECK(std::abs(r[i] - oracle) < 1e-6);
  }
  Tensor<double> one(Shape{1}, 0.0), tiny(Shape{1}, prob::kSigmaMin);
  CHECK(prob::rate_nats(one, one, tiny)[0] == doctest::Approx(0.0));

  // Away from the density floor, where the rate is smooth.
  std::uniform_real_distribution<double> near(-2, 2), sig_near(-0.5, 1.0);
  for (std::size_t i = 0; i < 64; ++i) {
    z.mutable_values()[i] = m[i] + near(rng);
    s.mutable_values()[i] = std::exp(sig_near(rng));
  }
  auto g = test::grad_check({z, m, s}, [&] { return nn::sum(prob::rate_nats(z, m, s)); }, 64);
  CHECK(g.rel_error < 1e-5);
}

TEST_CASE("real pmf") {
  auto p = prob::real_pmf(1.0);
  REQUIRE(p.size() == 65);
  CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-9);
  CHECK(std::abs(p[32] - 0.382924922548026207275409221217) < 1e-9);
  CHECK(std::abs(p[31] - 0.241730337457128830357801348412) < 1e-9);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == p[p.size() - 1 - i]);

  auto wide = prob::real_pmf(50.0);
  CHECK(std::abs(std::accumulate(wide.begin(), wide.end(), 0.0) - 1.0) < 1e-9);
  CHECK(wide.front() > wide[1]);  // folded tail dominates at large sigma
}

TEST_CASE("quantized pmf") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> logs(std::log(prob::kSigmaMin), std::log(prob::kSigmaMax));
  for (int t = 0; t < 500; ++t) {
    const auto q = prob::pmf_for_sigma(std::exp(logs(rng)));
    CHECK(q.cdf.back() == prob::kPmfTotal);
    for (auto f : q.freqs) CHECK(f >= 1u);
    for (std::size_t i = 0; i + 1 < q.cdf.size(); ++i) CHECK(q.cdf[i] < q.cdf[i + 1]);
  }
  SUBCASE("remainder goes to the largest masses, ties to the lowest index") {
    const std::vector<double> p = {0.25, 0.25, 0.25, 0.25 - 3.0 / 65536};
    // floors: 16384 x3, 16381 -> remainder 3 to indices 0, 1, 2
    auto q = prob::quantize_pmf(p, 0);
    CHECK(q.freqs == std::vector<std::uint32_t>{16385, 16385, 16385, 16381});
  }
  SUBCASE("zero bins are lifted by the largest bin") {
    const std::vector<double> p = {1.0, 0.0, 0.0};
    auto q = prob::quantize_pmf(p, -1);
    CHECK(q.freqs == std::vector<std::uint32_t>{65534, 1, 1});
    CHECK(q.n_max == 1);
  }
  SUBCASE("pure function of the sigma bits") {
    auto a = prob::pmf_for_sigma(0.7311);
    auto b = prob::pmf_for_sigma(0.7311);
    CHECK(a.freqs == b.freqs);
  }
}

TEST_CASE("range coder") {
  SUBCASE("empty sequence") {
    auto bytes = prob::rc_encode({}, {});
    CHECK(bytes.size() == 8);
    CHECK(prob::rc_decode(bytes, {}).empty());
  }
  SUBCASE("10000 symbols from the unit-sigma pmf") {
    const auto q = prob::pmf_for_sigma(1.0);
    std::vector<double> real = prob::real_pmf(1.0);
    std::mt19937_64 rng(5);
    std::discrete_distribution<int> dist(real.begin(), real.end());
    std::vector<int> sym(10000);
    for (auto& s : sym) s = dist(rng) + q.n_min;
    std::vector<prob::QuantizedPmf> pmfs(sym.size(), q);
    auto bytes = prob::rc_encode(sym, pmfs);
    CHECK(prob::rc_decode(bytes, pmfs) == sym);
    const double ideal = prob::ideal_bits(sym, pmfs) / 8;
    CHECK(double(bytes.size()) >= ideal);
    CHECK(double(bytes.size()) <= ideal * 1.005 + 32);
  }
  SUBCASE("carry-heavy sequences of near-certain and improbable symbols") {
    const auto sharp = prob::pmf_for_sigma(prob::kSigmaMin);
    std::vector<int> sym;
    for (int i = 0; i < 4000; ++i) sym.push_back(i % 97 == 0 ? (i % 2 ? 32 : -32) : 0);
    std::vector<prob::QuantizedPmf> pmfs(sym.size(), sharp);
    auto bytes = prob::rc_encode(sym, pmfs);
    CHECK(prob::rc_decode(bytes, pmfs) == sym);
  }
  SUBCASE("errors") {
    const auto q = prob::pmf_for_sigma(1.0);
    std::vector<int> bad = {40};
    std::vector<prob::QuantizedPmf> one(1, q);
    CHECK_THROWS_AS(prob::rc_encode(bad, one), std::out_of_range);
    std::vector<int> sym(200, 3);
    std::vector<prob::QuantizedPmf> pmfs(200, q);
    auto bytes = prob::rc_encode(sym, pmfs);
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(prob::rc_decode(bytes, pmfs), std::runtime_error);
  }
}
