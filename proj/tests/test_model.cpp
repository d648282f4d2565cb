#include <cmath>
#include <vector>

#include "doctest.h"
#include "qarv/model.hpp"
#include "qarv/ops.hpp"
#include "qarv/prob.hpp"
#include "support.hpp"

using namespace qarv;
using model::ModelConfig;
using model::QarvModel;
using nn::Shape;
using nn::Tensor;
using test::perturb_all;
using test::random_tensor;

namespace {

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor<double> image_batch(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  return random_tensor(Shape{n, 3, h, w}, seed, 0, 1);
}

}  // namespace

TEST_CASE("model config presets, json and hash") {
  const auto tiny = model::preset("qarv-tiny");
  CHECK(tiny.max_downsample == 16);
  CHECK(tiny.num_latents() == 4);
  CHECK(tiny.width(16) == 48);
  CHECK(tiny.width(8) == 32);
  CHECK(tiny.width(4) == 24);
  const auto base = model::preset("qarv-base");
  CHECK(base.max_downsample == 64);
  CHECK(base.num_latents() == 9);
  CHECK_THROWS_AS(model::preset("huge"), std::invalid_argument);

  CHECK(ModelConfig::from_json(tiny.to_json(), base) == tiny);
  CHECK(ModelConfig::from_json(base.to_json(), tiny) == base);
  CHECK(tiny.hash() == ModelConfig::from_json(tiny.to_json(), tiny).hash());
  auto other = tiny;
  other.block_config = model::BlockConfig::kA;
  CHECK(other.hash() != tiny.hash());

  auto bad = tiny;
  bad.max_downsample = 32;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny;
  bad.ladder[1].divisor = 32;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny;
  bad.ladder[1].divisor = 6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny;
  bad.affine_position = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"block_config", "D"}}, tiny), std::invalid_argument);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"norm", "batch"}}, tiny), std::invalid_argument);
}

TEST_CASE("lambda embedding") {
  for (double lambda : {16.0, 100.0, 2048.0}) {
    const auto f = model::sinusoidal_features(lambda, 32);
    REQUIRE(f.size() == 64);
    for (double v : f) CHECK(std::abs(v) <= 1.0);
    CHECK(f == model::sinusoidal_features(lambda, 32));
  }
  // Lowest frequency pair is sin(ln lambda), cos(ln lambda).
  const auto f = model::sinusoidal_features(16, 4);
  CHECK(f[0] == doctest::Approx(std::sin(std::log(16.0))).epsilon(1e-15));
  CHECK(f[4] == doctest::Approx(std::cos(std::log(16.0))).epsilon(1e-15));
  CHECK(f[3] == doctest::Approx(std::sin(std::log(16.0) / 1e4)).epsilon(1e-12));
  CHECK_THROWS_AS(model::sinusoidal_features(0, 4), std::invalid_argument);
  CHECK_THROWS_AS(model::sinusoidal_features(-1, 4), std::invalid_argument);

  QarvModel<double> m(model::preset("qarv-tiny"), 3);
  const std::vector<double> lambdas{16, 2048, 16};
  const auto e = m.embed(lambdas);
  REQUIRE(e.shape() == Shape{3, 64});
  const auto e2 = m.embed(lambdas);
  double diff = 0, same = 0;
  for (std::size_t k = 0; k < 64; ++k) {
    CHECK(std::isfinite(e[k]));
    CHECK(e[k] == e2[k]);
    diff = std::max(diff, std::abs(e[k] - e[64 + k]));
    same = std::max(same, std::abs(e[k] - e[128 + k]));
  }
  CHECK(diff > 1e-3);
  CHECK(same == 0);
  const std::vector<double> bad{0.0};
  CHECK_THROWS(m.embed(bad));
}

TEST_CASE("adaptive affine") {
  const auto x = random_tensor(Shape{2, 4, 3, 3}, 1);
  const auto n = nn::layer_norm(x);
  // Zero scale/shift leaves the normalized tensor untouched.
  const Tensor<double> zero(Shape{2, 8});
  CHECK(max_abs_diff(nn::modulate(n, zero), n) == 0);
  // A constant input normalizes to zero, leaving only the shift.
  const Tensor<double> c(Shape{2, 4, 3, 3}, 0.7);
  const auto ss = random_tensor(Shape{2, 8}, 2);
  const auto y = nn::modulate(nn::layer_norm(c), ss);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t ch = 0; ch < 4; ++ch)
      for (std::size_t p = 0; p < 9; ++p) CHECK(y[(s * 4 + ch) * 9 + p] == doctest::Approx(ss[s * 8 + 4 + ch]));

  // Gradient with respect to the projection weights of a block's adapter.
  auto cfg = model::preset("qarv-tiny");
  nn::ParameterStore<double> store;
  nn::InitRng rng(5);
  model::ResBlock<double> block(store, "b", 4, cfg, rng);
  perturb_all(store, 6, 0.1);
  const auto e = random_tensor(Shape{2, cfg.embed_dim}, 7);
  const auto target = random_tensor(Shape{2, 4, 3, 3}, 8);
  std::vector<Tensor<double>> leaves{store.find("b/adapt/w")->value, store.find("b/adapt/b")->value};
  const auto r = test::grad_check(leaves, [&] {
    return nn::sum(nn::mul(nn::modulate(block.normalize(x), block.scale_shift(e)), target));
  });
  CHECK(r.rel_error < 1e-6);
}

TEST_CASE("residual block") {
  auto cfg = model::preset("qarv-tiny");
  const auto x = random_tensor(Shape{2, 8, 5, 6}, 11);
  const auto e = random_tensor(Shape{2, cfg.embed_dim}, 12);
  for (int pos = 0; pos <= 4; ++pos) {
    cfg.affine_position = pos;
    nn::ParameterStore<double> store;
    nn::InitRng rng(13);
    model::ResBlock<double> block(store, "b", 8, cfg, rng);
    CAPTURE(pos);
    CHECK((store.find("b/norm/w") == nullptr) == (pos == 2));
    const auto y = block.forward(x, e);
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y, x) == 0);
  }

  // Position 2 equals a plain block whose affine is (1 + s, b).
  cfg.affine_position = 2;
  nn::ParameterStore<double> store;
  nn::InitRng rng(14);
  model::ResBlock<double> block(store, "b", 8, cfg, rng);
  perturb_all(store, 15, 0.2);
  const auto e1 = random_tensor(Shape{1, cfg.embed_dim}, 16);
  const auto x1 = random_tensor(Shape{1, 8, 5, 6}, 17);
  const auto ss = block.scale_shift(e1);
  Tensor<double> w(Shape{8}), b(Shape{8});
  for (std::size_t c = 0; c < 8; ++c) {
    w.mutable_values()[c] = 1 + ss[c];
    b.mutable_values()[c] = ss[8 + c];
  }
  auto h = nn::depthwise_conv2d(x1, block.depthwise_weight(), block.depthwise_bias());
  h = nn::channel_affine(nn::layer_norm(h), w, b);
  h = block.pw2()(nn::gelu(block.pw1()(h)));
  CHECK(max_abs_diff(block.forward(x1, e1), nn::add(x1, h)) < 1e-12);
}

TEST_CASE("model shapes and training-path properties") {
  const auto cfg = model::preset("qarv-tiny");
  QarvModel<double> m(cfg, 21);
  const std::vector<double> lambdas{16, 2048};
  const auto e = m.embed(lambdas);

  const auto x = image_batch(2, 32, 32, 22);
  const auto feats = m.encode_features(x, e);
  REQUIRE(feats.size() == 3);
  CHECK(feats.at(16).shape() == Shape{2, 48, 2, 2});
  CHECK(feats.at(8).shape() == Shape{2, 32, 4, 4});
  CHECK(feats.at(4).shape() == Shape{2, 24, 8, 8});
  const auto big = m.encode_features(image_batch(2, 64, 32, 23), e);
  CHECK(big.at(16).shape() == Shape{2, 48, 4, 2});
  CHECK(big.at(4).shape() == Shape{2, 24, 16, 8});
  const auto feats2 = m.encode_features(x, e);
  for (auto& [d, f] : feats) CHECK(max_abs_diff(f, feats2.at(d)) == 0);
  CHECK_THROWS(m.encode_features(image_batch(2, 24, 32, 24), e));

  nn::InitRng noise(25);
  const auto out = m.forward_train(x, lambdas, noise);
  CHECK(out.x_hat.shape() == x.shape());
  for (double v : out.x_hat.values()) CHECK(std::isfinite(v));
  REQUIRE(out.rates.size() == 4);
  const std::size_t divs[] = {16, 8, 4, 4};
  for (std::size_t i = 0; i < 4; ++i) {
    CAPTURE(i);
    const Shape s{2, 8, 32 / divs[i], 32 / divs[i]};
    CHECK(out.mu[i].shape() == s);
    CHECK(out.mu_hat[i].shape() == s);
    CHECK(out.sigma[i].shape() == s);
    CHECK(out.z[i].shape() == s);
    CHECK(m.latent_divisor(i) == divs[i]);
    for (std::size_t k = 0; k < out.z[i].numel(); ++k) {
      CHECK(std::abs(out.z[i][k] - out.mu[i][k]) <= 0.5);
      CHECK(out.sigma[i][k] >= prob::kSigmaMin);
      CHECK(out.sigma[i][k] <= prob::kSigmaMax);
    }
    REQUIRE(out.rates[i].shape() == Shape{2});
    for (double r : out.rates[i].values()) {
      CHECK(std::isfinite(r));
      CHECK(r >= 0);
    }
  }

  // Same seed, same result.
  nn::InitRng noise2(25);
  const auto again = m.forward_train(x, lambdas, noise2);
  CHECK(max_abs_diff(out.x_hat, again.x_hat) == 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(max_abs_diff(out.rates[i], again.rates[i]) == 0);

  // The decoder alone, fed the sampled latents, reproduces the reconstruction.
  const auto x_dec = m.decode_from_latents(out.z, e, 32, 32);
  CHECK(max_abs_diff(x_dec, out.x_hat) == 0);

  // Prior parameters depend only on the decoder state.
  const auto state = m.enter(0, m.initial_state(2, 32, 32), e);
  CHECK(state.shape() == Shape{2, 48, 2, 2});
  const auto f = m.block(0).front(state, e);
  const auto [mh1, s1] = m.block(0).prior(f);
  const auto [mh2, s2] = m.block(0).prior(f);
  CHECK(max_abs_diff(mh1, mh2) == 0);
  CHECK(max_abs_diff(s1, s2) == 0);
  CHECK(mh1.shape() == out.mu[0].shape());
}

TEST_CASE("initial state tiles the learned bias") {
  QarvModel<double> m(model::preset("qarv-tiny"), 31);
  const auto s = m.initial_state(2, 48, 32);
  REQUIRE(s.shape() == Shape{2, 48, 3, 2});
  const auto& bias = m.params().find("dec/bias")->value;
  REQUIRE(bias.shape() == Shape{1, 48, 1, 1});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 48; ++c)
      for (std::size_t p = 0; p < 6; ++p) CHECK(s[(n * 48 + c) * 6 + p] == bias[c]);
}

TEST_CASE("posterior wiring per block configuration") {
  for (auto bc : {model::BlockConfig::kA, model::BlockConfig::kB, model::BlockConfig::kC}) {
    auto cfg = model::preset("qarv-tiny");
    cfg.block_config = bc;
    QarvModel<double> m(cfg, 41);
    perturb_all(m.params(), 42, 0.05);
    const std::vector<double> lambdas{64};
    const auto e = m.embed(lambdas);
    const auto enc = random_tensor(Shape{1, 48, 2, 2}, 43);
    const auto f1 = random_tensor(Shape{1, 48, 2, 2}, 44);
    const auto f2 = random_tensor(Shape{1, 48, 2, 2}, 45);
    const auto mu1 = m.block(0).posterior(enc, f1, e);
    const auto mu2 = m.block(0).posterior(enc, f2, e);
    CAPTURE(model::to_string(bc));
    CHECK(mu1.shape() == Shape{1, 8, 2, 2});
    if (bc == model::BlockConfig::kA)
      CHECK(max_abs_diff(mu1, mu2) == 0);
    else
      CHECK(max_abs_diff(mu1, mu2) > 1e-6);
    // Decode purity holds for every configuration.
    const auto x = image_batch(1, 16, 16, 46);
    nn::InitRng noise(47);
    const auto out = m.forward_train(x, lambdas, noise);
    CHECK(max_abs_diff(m.decode_from_latents(out.z, e, 16, 16), out.x_hat) == 0);
  }
}

TEST_CASE("lambda invariance at init and conditioning reach") {
  for (int pos = 0; pos <= 4; ++pos) {
    auto cfg = model::preset("qarv-tiny");
    cfg.affine_position = pos;
    CAPTURE(pos);
    QarvModel<double> m(cfg, 51);
    const auto x = image_batch(1, 16, 16, 52);
    const std::vector<double> lo{16}, hi{2048};
    nn::InitRng n1(53), n2(53);
    const auto a = m.forward_train(x, lo, n1);
    const auto b = m.forward_train(x, hi, n2);
    CHECK(max_abs_diff(a.x_hat, b.x_hat) == 0);

    // Once the projections are nonzero, every residual block responds to e.
    perturb_all(m.params(), 54, 0.05);
    const auto e_lo = m.embed(lo), e_hi = m.embed(hi);
    for (const auto* block : m.residual_blocks()) {
      const auto in = random_tensor(Shape{1, block->channels(), 4, 4}, 55);
      CAPTURE(block->name());
      CHECK(max_abs_diff(block->forward(in, e_lo), block->forward(in, e_hi)) > 1e-8);
    }
  }
}

TEST_CASE("full toy model gradient in double precision") {
  QarvModel<double> m(model::preset("qarv-tiny"), 61);
  perturb_all(m.params(), 62, 0.02);
  const auto x = image_batch(1, 16, 16, 63);
  const std::vector<double> lambdas{256};
  std::vector<Tensor<double>> leaves;
  for (auto& p : m.params().params()) leaves.push_back(p.value);
  const auto r = test::grad_check(
      leaves,
      [&] {
        nn::InitRng noise(64);
        const auto out = m.forward_train(x, lambdas, noise);
        Tensor<double> loss = nn::sum(out.rates[0]);
        for (std::size_t i = 1; i < out.rates.size(); ++i) loss = nn::add(loss, nn::sum(out.rates[i]));
        return nn::add(nn::scale(loss, 1.0 / 256), nn::scale(nn::sum(nn::mse_per_sample(out.x_hat, x)), 256.0));
      },
      3, 65);
  CAPTURE(r.coordinates);
  CAPTURE(r.max_abs_error);
  CHECK(r.rel_error < 1e-5);
}
