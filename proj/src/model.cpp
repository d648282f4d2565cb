#include "qarv/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "qarv/prob.hpp"

namespace qarv::model {

using nn::Shape;
using nn::Tensor;
using nlohmann::json;

namespace {

bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

[[noreturn]] void bad_config(const std::string& what) {
  throw std::invalid_argument("model config: " + what);
}

template <typename T>
Conv<T> make_conv(nn::ParameterStore<T>& store, const std::string& name, std::size_t cin,
                  std::size_t cout, std::size_t k, std::size_t stride, std::size_t padding,
                  nn::InitRng& rng, bool zero = false) {
  Conv<T> c;
  c.weight = store.add(name + "/w", {cout, cin, k, k});
  c.bias = store.add(name + "/b", {cout});
  c.stride = stride;
  c.padding = padding;
  if (!zero) nn::init_uniform(c.weight, rng, 1.0 / std::sqrt(double(cin * k * k)));
  return c;
}

template <typename T>
Linear<T> make_linear(nn::ParameterStore<T>& store, const std::string& name, std::size_t in,
                      std::size_t out, nn::InitRng& rng, bool zero = false) {
  Linear<T> l;
  l.weight = store.add(name + "/w", {out, in});
  l.bias = store.add(name + "/b", {out});
  if (!zero) {
    nn::init_uniform(l.weight, rng, 1.0 / std::sqrt(double(in)));
    nn::init_uniform(l.bias, rng, 1.0 / std::sqrt(double(in)));
  }
  return l;
}

// Largest divisor of the channel count not exceeding 32.
std::size_t group_count(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(32, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

// --------------------------------------------------------------------- config

std::string to_string(BlockConfig c) {
  switch (c) {
    case BlockConfig::kA: return "A";
    case BlockConfig::kB: return "B";
    case BlockConfig::kC: return "C";
  }
  return "?";
}

std::string to_string(NormType n) {
  switch (n) {
    case NormType::kLayer: return "layer";
    case NormType::kGroup: return "group";
    case NormType::kInstance: return "instance";
  }
  return "?";
}

BlockConfig parse_block_config(const std::string& s) {
  if (s == "A") return BlockConfig::kA;
  if (s == "B") return BlockConfig::kB;
  if (s == "C") return BlockConfig::kC;
  bad_config("unknown block config '" + s + "' (expected A, B or C)");
}

NormType parse_norm_type(const std::string& s) {
  if (s == "layer") return NormType::kLayer;
  if (s == "group") return NormType::kGroup;
  if (s == "instance") return NormType::kInstance;
  bad_config("unknown norm type '" + s + "' (expected layer, group or instance)");
}

void ModelConfig::validate() const {
  if (ladder.empty()) bad_config("empty latent ladder");
  if (!is_power_of_two(max_downsample)) bad_config("max_downsample must be a power of two");
  if (ladder.front().divisor != max_downsample)
    bad_config("the coarsest ladder divisor must equal max_downsample");
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    const auto& s = ladder[i];
    if (!is_power_of_two(s.divisor)) bad_config("ladder divisors must be powers of two");
    if (i > 0 && s.divisor > ladder[i - 1].divisor) bad_config("ladder divisors must not increase");
    if (i > 0 && s.divisor == ladder[i - 1].divisor)
      bad_config("repeated divisor in ladder; use the repeats field");
    if (s.latent_channels == 0 || s.repeats == 0) bad_config("latent channels and repeats must be positive");
    auto it = feature_channels.find(s.divisor);
    if (it == feature_channels.end())
      bad_config("no feature width for divisor " + std::to_string(s.divisor));
    if (it->second < 2) bad_config("feature widths must be at least 2");
  }
  if (affine_position < 0 || affine_position > 4) bad_config("affine position must lie in 0..4");
  if (!(lambda_low > 0 && lambda_low < lambda_high && std::isfinite(lambda_high)))
    bad_config("need 0 < lambda_low < lambda_high");
  if (embed_pairs == 0 || embed_hidden == 0 || embed_dim == 0) bad_config("embedding sizes must be positive");
  if (mlp_expansion == 0) bad_config("mlp expansion must be positive");
  if (kernel_size % 2 == 0) bad_config("kernel size must be odd");
}

std::size_t ModelConfig::num_latents() const {
  std::size_t n = 0;
  for (const auto& s : ladder) n += s.repeats;
  return n;
}

std::size_t ModelConfig::width(std::size_t divisor) const {
  auto it = feature_channels.find(divisor);
  if (it == feature_channels.end()) bad_config("no feature width for divisor " + std::to_string(divisor));
  return it->second;
}

std::vector<std::size_t> ModelConfig::divisors() const {
  std::vector<std::size_t> d;
  for (const auto& s : ladder) d.push_back(s.divisor);
  return d;
}

json ModelConfig::to_json() const {
  json j;
  j["name"] = name;
  j["max_downsample"] = max_downsample;
  j["ladder"] = json::array();
  for (const auto& s : ladder) j["ladder"].push_back({s.divisor, s.latent_channels, s.repeats});
  j["feature_channels"] = json::array();
  for (const auto& [d, c] : feature_channels) j["feature_channels"].push_back({d, c});
  j["block_config"] = to_string(block_config);
  j["norm"] = to_string(norm);
  j["affine_position"] = affine_position;
  j["lambda_low"] = lambda_low;
  j["lambda_high"] = lambda_high;
  j["embed_pairs"] = embed_pairs;
  j["embed_hidden"] = embed_hidden;
  j["embed_dim"] = embed_dim;
  j["mlp_expansion"] = mlp_expansion;
  j["kernel_size"] = kernel_size;
  j["enc_blocks"] = enc_blocks;
  return j;
}

ModelConfig ModelConfig::from_json(const json& j, const ModelConfig& base) {
  ModelConfig c = base;
  try {
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("max_downsample")) c.max_downsample = j.at("max_downsample").get<std::size_t>();
    if (j.contains("ladder")) {
      c.ladder.clear();
      for (const auto& s : j.at("ladder")) {
        if (!s.is_array() || s.size() != 3) bad_config("ladder entries are [divisor, latent_channels, repeats]");
        c.ladder.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()});
      }
    }
    if (j.contains("feature_channels")) {
      c.feature_channels.clear();
      for (const auto& s : j.at("feature_channels")) {
        if (!s.is_array() || s.size() != 2) bad_config("feature_channels entries are [divisor, channels]");
        c.feature_channels[s[0].get<std::size_t>()] = s[1].get<std::size_t>();
      }
    }
    if (j.contains("block_config")) c.block_config = parse_block_config(j.at("block_config").get<std::string>());
    if (j.contains("norm")) c.norm = parse_norm_type(j.at("norm").get<std::string>());
    if (j.contains("affine_position")) c.affine_position = j.at("affine_position").get<int>();
    if (j.contains("lambda_low")) c.lambda_low = j.at("lambda_low").get<double>();
    if (j.contains("lambda_high")) c.lambda_high = j.at("lambda_high").get<double>();
    if (j.contains("embed_pairs")) c.embed_pairs = j.at("embed_pairs").get<std::size_t>();
    if (j.contains("embed_hidden")) c.embed_hidden = j.at("embed_hidden").get<std::size_t>();
    if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("mlp_expansion")) c.mlp_expansion = j.at("mlp_expansion").get<std::size_t>();
    if (j.contains("kernel_size")) c.kernel_size = j.at("kernel_size").get<std::size_t>();
    if (j.contains("enc_blocks")) c.enc_blocks = j.at("enc_blocks").get<std::size_t>();
  } catch (const json::exception& e) {
    bad_config(e.what());
  }
  c.validate();
  return c;
}

std::uint64_t ModelConfig::hash() const { return fnv1a(to_json().dump()); }

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "qarv-tiny") {
    c.name = name;
    c.max_downsample = 16;
    c.ladder = {{16, 8, 1}, {8, 8, 1}, {4, 8, 2}};
    c.feature_channels = {{16, 48}, {8, 32}, {4, 24}};
  } else if (name == "qarv-base") {
    c.name = name;
    c.max_downsample = 64;
    c.ladder = {{64, 16, 1}, {32, 16, 2}, {16, 16, 3}, {8, 16, 3}};
    c.feature_channels = {{64, 256}, {32, 256}, {16, 192}, {8, 128}};
    c.embed_pairs = 32;
    c.embed_hidden = 256;
    c.embed_dim = 256;
  } else {
    bad_config("unknown preset '" + name + "' (expected qarv-tiny or qarv-base)");
  }
  c.validate();
  return c;
}

std::vector<double> sinusoidal_features(double lambda, std::size_t pairs) {
  if (!(lambda > 0) || !std::isfinite(lambda))
    throw std::invalid_argument("lambda must be positive and finite, got " + std::to_string(lambda));
  const double t = std::log(lambda);
  std::vector<double> out(2 * pairs);
  for (std::size_t k = 0; k < pairs; ++k) {
    const double omega = pairs > 1 ? std::pow(1e4, double(k) / double(pairs - 1)) : 1.0;
    out[k] = std::sin(t / omega);
    out[pairs + k] = std::cos(t / omega);
  }
  return out;
}

// ------------------------------------------------------------------ res block

template <typename T>
ResBlock<T>::ResBlock(nn::ParameterStore<T>& store, const std::string& name, std::size_t channels,
                      const ModelConfig& cfg, nn::InitRng& rng)
    : name_(name), channels_(channels), position_(cfg.affine_position), norm_(cfg.norm) {
  const std::size_t k = cfg.kernel_size, hidden = cfg.mlp_expansion * channels;
  dw_w_ = store.add(name + "/dw/w", {channels, k, k});
  dw_b_ = store.add(name + "/dw/b", {channels});
  nn::init_uniform(dw_w_, rng, 1.0 / double(k));
  if (position_ != 2) {
    norm_w_ = store.add(name + "/norm/w", {channels});
    norm_b_ = store.add(name + "/norm/b", {channels});
    nn::init_constant(norm_w_, 1.0);
  }
  const std::size_t site = position_ == 3 ? hidden : channels;
  adapt_ = make_linear(store, name + "/adapt", cfg.embed_dim, 2 * site, rng, true);
  pw1_ = make_conv(store, name + "/pw1", channels, hidden, 1, 1, 0, rng);
  pw2_ = make_conv(store, name + "/pw2", hidden, channels, 1, 1, 0, rng, true);
}

template <typename T>
Tensor<T> ResBlock<T>::normalize(const Tensor<T>& x) const {
  switch (norm_) {
    case NormType::kLayer: return nn::layer_norm(x);
    case NormType::kGroup: return nn::group_norm(x, group_count(x.dim(1)));
    case NormType::kInstance: return nn::instance_norm(x);
  }
  return x;
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& e) const {
  if (x.rank() != 4 || x.dim(1) != channels_)
    throw std::invalid_argument(name_ + ": expected " + std::to_string(channels_) + " channels, got " +
                                nn::shape_str(x.shape()));
  const Tensor<T> ss = adapt_(e);
  Tensor<T> h = x;
  if (position_ == 0) h = nn::modulate(h, ss);
  h = nn::depthwise_conv2d(h, dw_w_, dw_b_);
  if (position_ == 1) h = nn::modulate(h, ss);
  h = normalize(h);
  h = position_ == 2 ? nn::modulate(h, ss) : nn::channel_affine(h, norm_w_, norm_b_);
  h = nn::gelu(pw1_(h));
  if (position_ == 3) h = nn::modulate(h, ss);
  h = pw2_(h);
  if (position_ == 4) h = nn::modulate(h, ss);
  return nn::add(x, h);
}

// --------------------------------------------------------------- latent block

template <typename T>
LatentBlock<T>::LatentBlock(nn::ParameterStore<T>& store, const std::string& name,
                            std::size_t channels, std::size_t latent_channels,
                            const ModelConfig& cfg, nn::InitRng& rng)
    : channels_(channels), latent_channels_(latent_channels), config_(cfg.block_config) {
  auto res = [&](const std::string& part) {
    return std::make_unique<ResBlock<T>>(store, name + "/" + part, channels, cfg, rng);
  };
  front_ = res("front");
  prior_head_ = make_conv(store, name + "/prior", channels, 2 * latent_channels, 1, 1, 0, rng);
  post_enc_ = res("post_enc");
  const bool bidirectional = config_ != BlockConfig::kA;
  if (bidirectional) post_dec_ = res("post_dec");
  post_merge_ = make_conv(store, name + "/post_merge", bidirectional ? 2 * channels : channels, channels,
                          1, 1, 0, rng);
  post_fuse_ = res("post_fuse");
  post_head_ = make_conv(store, name + "/post_head", channels, latent_channels, 3, 1, 1, rng);
  z_proj_ = make_conv(store, name + "/z_proj", latent_channels, channels, 1, 1, 0, rng);
  end_ = res("end");
}

template <typename T>
Tensor<T> LatentBlock<T>::front(const Tensor<T>& f, const Tensor<T>& e) const {
  return front_->forward(f, e);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> LatentBlock<T>::prior(const Tensor<T>& g) const {
  const Tensor<T> p = prior_head_(g);
  Tensor<T> mu_hat = nn::slice_channels(p, 0, latent_channels_);
  Tensor<T> sigma = nn::clamp(nn::exp(nn::slice_channels(p, latent_channels_, 2 * latent_channels_)),
                              T(prob::kSigmaMin), T(prob::kSigmaMax));
  return {mu_hat, sigma};
}

template <typename T>
Tensor<T> LatentBlock<T>::posterior(const Tensor<T>& enc, const Tensor<T>& g, const Tensor<T>& e) const {
  if (enc.rank() != 4 || g.rank() != 4 || enc.dim(2) != g.dim(2) || enc.dim(3) != g.dim(3))
    throw std::invalid_argument("posterior: resolution mismatch " + nn::shape_str(enc.shape()) + " vs " +
                                nn::shape_str(g.shape()));
  Tensor<T> h = post_enc_->forward(enc, e);
  if (config_ != BlockConfig::kA) h = nn::concat_channels(h, post_dec_->forward(g, e));
  h = post_fuse_->forward(post_merge_(h), e);
  return post_head_(h);
}

template <typename T>
Tensor<T> LatentBlock<T>::merge(const Tensor<T>& g, const Tensor<T>& z, const Tensor<T>& e) const {
  Tensor<T> f = z_proj_(z);
  if (config_ == BlockConfig::kC) f = nn::add(g, f);
  return end_->forward(f, e);
}

template <typename T>
void LatentBlock<T>::collect(std::vector<const ResBlock<T>*>& out) const {
  for (const auto* b : {front_.get(), post_enc_.get(), post_dec_.get(), post_fuse_.get(), end_.get()})
    if (b) out.push_back(b);
}

// ---------------------------------------------------------------------- model

template <typename T>
QarvModel<T>::QarvModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  nn::InitRng rng(seed);
  embed_fc1_ = make_linear(store_, "embed/fc1", 2 * cfg_.embed_pairs, cfg_.embed_hidden, rng);
  embed_fc2_ = make_linear(store_, "embed/fc2", cfg_.embed_hidden, cfg_.embed_dim, rng);

  const auto divs = cfg_.divisors();
  const std::size_t fine = divs.back();
  stem_ = make_conv(store_, "enc/stem", 3, cfg_.width(fine), fine, fine, 0, rng);
  for (std::size_t k = divs.size(); k-- > 0;) {
    const std::size_t d = divs[k], c = cfg_.width(d);
    std::vector<std::unique_ptr<ResBlock<T>>> stage;
    for (std::size_t b = 0; b < cfg_.enc_blocks; ++b)
      stage.push_back(std::make_unique<ResBlock<T>>(store_, "enc/s" + std::to_string(d) + "/b" + std::to_string(b),
                                                    c, cfg_, rng));
    enc_blocks_.push_back(std::move(stage));
    if (k > 0) {
      const std::size_t next = divs[k - 1], r = next / d;
      const std::string name = "enc/down" + std::to_string(d);
      enc_down_blocks_.push_back(std::make_unique<ResBlock<T>>(store_, name + "/res", c, cfg_, rng));
      enc_down_.push_back(make_conv(store_, name + "/conv", c, cfg_.width(next), r, r, 0, rng));
    }
  }

  dec_bias_ = store_.add("dec/bias", {1, cfg_.width(cfg_.max_downsample), 1, 1});
  nn::init_uniform(dec_bias_, rng, 1.0);
  std::size_t index = 0;
  for (std::size_t s = 0; s < cfg_.ladder.size(); ++s) {
    const auto& stage = cfg_.ladder[s];
    const std::size_t c = cfg_.width(stage.divisor);
    if (s > 0) {
      const std::size_t prev = cfg_.ladder[s - 1].divisor, pc = cfg_.width(prev), r = prev / stage.divisor;
      const std::string name = "dec/up" + std::to_string(stage.divisor);
      Upsampler up;
      up.factor = r;
      up.pre = std::make_unique<ResBlock<T>>(store_, name + "/pre", pc, cfg_, rng);
      up.expand = make_conv(store_, name + "/expand", pc, c * r * r, 1, 1, 0, rng);
      up.post = std::make_unique<ResBlock<T>>(store_, name + "/post", c, cfg_, rng);
      ups_.push_back(std::move(up));
    }
    for (std::size_t rep = 0; rep < stage.repeats; ++rep, ++index) {
      blocks_.push_back(std::make_unique<LatentBlock<T>>(store_, "dec/z" + std::to_string(index), c,
                                                         stage.latent_channels, cfg_, rng));
      block_divisor_.push_back(stage.divisor);
      up_before_block_.push_back(rep == 0 && s > 0 ? int(s - 1) : -1);
    }
  }
  head_block_ = std::make_unique<ResBlock<T>>(store_, "dec/head/res", cfg_.width(fine), cfg_, rng);
  head_conv_ = make_conv(store_, "dec/head/conv", cfg_.width(fine), 3 * fine * fine, 1, 1, 0, rng);
}

template <typename T>
Tensor<T> QarvModel<T>::embed(std::span<const double> lambdas) const {
  if (lambdas.empty()) throw std::invalid_argument("embed: no lambda given");
  const std::size_t k2 = 2 * cfg_.embed_pairs;
  Tensor<T> feats(Shape{lambdas.size(), k2});
  auto fv = feats.mutable_values();
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const auto s = sinusoidal_features(lambdas[i], cfg_.embed_pairs);
    for (std::size_t j = 0; j < k2; ++j) fv[i * k2 + j] = T(s[j]);
  }
  return embed_fc2_(nn::gelu(embed_fc1_(feats)));
}

template <typename T>
std::map<std::size_t, Tensor<T>> QarvModel<T>::encode_features(const Tensor<T>& x, const Tensor<T>& e) const {
  const std::size_t d = cfg_.max_downsample;
  if (x.rank() != 4 || x.dim(1) != 3) throw std::invalid_argument("encoder: expected (N, 3, H, W), got " + nn::shape_str(x.shape()));
  if (x.dim(2) % d != 0 || x.dim(3) % d != 0)
    throw std::invalid_argument("encoder: input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                                " is not a multiple of " + std::to_string(d) + "; pad first");
  if (e.dim(0) != x.dim(0)) throw std::invalid_argument("encoder: one embedding row per image required");
  const auto divs = cfg_.divisors();
  std::map<std::size_t, Tensor<T>> out;
  Tensor<T> h = stem_(x);
  for (std::size_t k = 0; k < enc_blocks_.size(); ++k) {
    for (const auto& b : enc_blocks_[k]) h = b->forward(h, e);
    out[divs[divs.size() - 1 - k]] = h;
    if (k < enc_down_.size()) h = enc_down_[k](enc_down_blocks_[k]->forward(h, e));
  }
  return out;
}

template <typename T>
Tensor<T> QarvModel<T>::initial_state(std::size_t n, std::size_t height, std::size_t width) const {
  const std::size_t d = cfg_.max_downsample;
  if (height % d != 0 || width % d != 0) throw std::invalid_argument("decoder: size not a multiple of D");
  return nn::tile_spatial(dec_bias_, n, height / d, width / d);
}

template <typename T>
Tensor<T> QarvModel<T>::enter(std::size_t i, const Tensor<T>& state, const Tensor<T>& e) const {
  const int u = up_before_block_.at(i);
  if (u < 0) return state;
  const auto& up = ups_[std::size_t(u)];
  Tensor<T> h = up.pre->forward(state, e);
  h = nn::pixel_shuffle(up.expand(h), up.factor);
  return up.post->forward(h, e);
}

template <typename T>
Tensor<T> QarvModel<T>::head(const Tensor<T>& state, const Tensor<T>& e) const {
  return nn::pixel_shuffle(head_conv_(head_block_->forward(state, e)), cfg_.finest_divisor());
}

template <typename T>
Tensor<T> QarvModel<T>::check_finite(const Tensor<T>& t, const std::string& where) const {
  if (!t.all_finite()) throw std::runtime_error("non-finite values in " + where);
  return t;
}

template <typename T>
TrainOutput<T> QarvModel<T>::forward_train(const Tensor<T>& x, std::span<const double> lambdas,
                                           nn::InitRng& noise) const {
  if (lambdas.size() != x.dim(0)) throw std::invalid_argument("forward_train: one lambda per image required");
  const Tensor<T> e = embed(lambdas);
  const auto feats = encode_features(x, e);
  TrainOutput<T> out;
  Tensor<T> f = initial_state(x.dim(0), x.dim(2), x.dim(3));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = *blocks_[i];
    const std::string where = "latent block " + std::to_string(i);
    f = enter(i, f, e);
    const Tensor<T> g = blk.front(f, e);
    auto [mu_hat, sigma] = blk.prior(g);
    const Tensor<T> mu = check_finite(blk.posterior(feats.at(block_divisor_[i]), g, e), where + " (posterior)");
    check_finite(mu_hat, where + " (prior mean)");
    check_finite(sigma, where + " (prior scale)");
    Tensor<T> u(mu.shape());
    for (auto& v : u.mutable_values()) v = T(noise.uniform() - 0.5);
    const Tensor<T> z = nn::add(mu, u);
    out.rates.push_back(nn::sum_per_sample(prob::rate_nats(z, mu_hat, sigma)));
    f = check_finite(blk.merge(g, z, e), where + " (merge)");
    out.z.push_back(z);
    out.mu.push_back(mu);
    out.mu_hat.push_back(mu_hat);
    out.sigma.push_back(sigma);
  }
  out.x_hat = check_finite(head(f, e), "reconstruction head");
  return out;
}

template <typename T>
Tensor<T> QarvModel<T>::decode_from_latents(const std::vector<Tensor<T>>& z, const Tensor<T>& e,
                                            std::size_t height, std::size_t width) const {
  if (z.size() != blocks_.size()) throw std::invalid_argument("decode: wrong number of latents");
  Tensor<T> f = initial_state(e.dim(0), height, width);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    f = enter(i, f, e);
    f = blocks_[i]->merge(blocks_[i]->front(f, e), z[i], e);
  }
  return head(f, e);
}

template <typename T>
std::vector<const ResBlock<T>*> QarvModel<T>::residual_blocks() const {
  std::vector<const ResBlock<T>*> out;
  for (const auto& stage : enc_blocks_)
    for (const auto& b : stage) out.push_back(b.get());
  for (const auto& b : enc_down_blocks_) out.push_back(b.get());
  for (const auto& up : ups_) {
    out.push_back(up.pre.get());
    out.push_back(up.post.get());
  }
  for (const auto& b : blocks_) b->collect(out);
  out.push_back(head_block_.get());
  return out;
}

template class ResBlock<float>;
template class ResBlock<double>;
template class LatentBlock<float>;
template class LatentBlock<double>;
template class QarvModel<float>;
template class QarvModel<double>;

}  // namespace qarv::model
