#pragma once

// Hierarchical VAE with uniform posteriors and boxed-Gaussian priors.
//
// Encoder: a patch-embedding stem at the finest divisor, then residual blocks
// and patch-embedding downsamplers up to the coarsest divisor, producing one
// feature map per ladder resolution.
//
// Decoder: a learned bias tile at the coarsest resolution, then the latent
// blocks from coarse to fine with sub-pixel upsamplers between resolutions,
// and a sub-pixel head back to RGB. Every residual block is conditioned on
// the lambda embedding through an adaptive affine transform.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qarv/ops.hpp"
#include "qarv/params.hpp"

namespace qarv::model {

enum class BlockConfig { kA, kB, kC };
enum class NormType { kLayer, kGroup, kInstance };

struct LadderStage {
  std::size_t divisor = 16;
  std::size_t latent_channels = 8;
  std::size_t repeats = 1;
  bool operator==(const LadderStage&) const = default;
};

struct ModelConfig {
  std::string name = "qarv-tiny";
  std::size_t max_downsample = 16;
  std::vector<LadderStage> ladder;                        // coarse to fine
  std::map<std::size_t, std::size_t> feature_channels;    // divisor -> width
  BlockConfig block_config = BlockConfig::kC;
  NormType norm = NormType::kLayer;
  int affine_position = 2;
  double lambda_low = 16;
  double lambda_high = 2048;
  std::size_t embed_pairs = 8;
  std::size_t embed_hidden = 64;
  std::size_t embed_dim = 64;
  std::size_t mlp_expansion = 2;
  std::size_t kernel_size = 7;
  std::size_t enc_blocks = 1;

  bool operator==(const ModelConfig&) const = default;

  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
  std::size_t num_latents() const;
  std::size_t finest_divisor() const { return ladder.back().divisor; }
  std::size_t width(std::size_t divisor) const;
  // Divisors in decoding order, without repeats.
  std::vector<std::size_t> divisors() const;

  nlohmann::json to_json() const;
  // Keys absent from `j` keep the values of `base`.
  static ModelConfig from_json(const nlohmann::json& j, const ModelConfig& base);
  // FNV-1a 64 of the canonical (sorted-key, compact) JSON serialization.
  std::uint64_t hash() const;
};

// "qarv-tiny" (D=16, four latents) or "qarv-base" (D=64, nine latents).
ModelConfig preset(const std::string& name);

std::string to_string(BlockConfig c);
std::string to_string(NormType n);
BlockConfig parse_block_config(const std::string& s);
NormType parse_norm_type(const std::string& s);

// Sinusoidal features of t = ln(lambda): sin(t / w_k), cos(t / w_k) for K
// frequencies w_k geometric from 1 to 1e4. Throws for lambda <= 0.
std::vector<double> sinusoidal_features(double lambda, std::size_t pairs);

template <typename T>
struct Conv {
  nn::Tensor<T> weight, bias;
  std::size_t stride = 1, padding = 0;
  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const {
    return nn::conv2d(x, weight, bias, stride, padding);
  }
};

template <typename T>
struct Linear {
  nn::Tensor<T> weight, bias;
  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const { return nn::linear(x, weight, bias); }
};

// ConvNeXt block: x + pw2(gelu(pw1(affine(norm(dw7x7(x)))))), with the
// lambda-adaptive affine at one of five sites:
//   0 branch input, 1 after the depthwise conv, 2 in place of the norm's
//   own affine (AdaLN), 3 after the GELU, 4 after pw2.
// The adaptive scale/shift comes from a zero-initialized linear map of the
// embedding, applied as y = x * (1 + s) + b. pw2 is zero-initialized too, so
// a fresh block is the identity.
template <typename T>
class ResBlock {
 public:
  ResBlock(nn::ParameterStore<T>& store, const std::string& name, std::size_t channels,
           const ModelConfig& cfg, nn::InitRng& rng);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, const nn::Tensor<T>& embedding) const;
  // (N, 2 * site channels) scale and shift for the adaptive site.
  nn::Tensor<T> scale_shift(const nn::Tensor<T>& embedding) const { return adapt_(embedding); }
  nn::Tensor<T> normalize(const nn::Tensor<T>& x) const;
  std::size_t channels() const { return channels_; }
  int affine_position() const { return position_; }
  const std::string& name() const { return name_; }

  // Exposed for the substitution test of position 2.
  const nn::Tensor<T>& depthwise_weight() const { return dw_w_; }
  const nn::Tensor<T>& depthwise_bias() const { return dw_b_; }
  const Conv<T>& pw1() const { return pw1_; }
  const Conv<T>& pw2() const { return pw2_; }

 private:
  std::string name_;
  std::size_t channels_;
  int position_;
  NormType norm_;
  nn::Tensor<T> dw_w_, dw_b_;
  nn::Tensor<T> norm_w_, norm_b_;  // plain affine, unused at position 2
  Linear<T> adapt_;
  Conv<T> pw1_, pw2_;
};

// One latent variable of the top-down path.
//   front:     f <- res(f)
//   prior:     (mu_hat, s) <- conv1x1(f), sigma = clamp(exp(s), 1e-2, 1e2)
//   posterior: mu <- head3x3(res(merge1x1([res(enc), res(f)])))   (A: enc only)
//   merge:     f <- res(f + proj(z))  (C)   or   res(proj(z))  (A, B)
template <typename T>
class LatentBlock {
 public:
  LatentBlock(nn::ParameterStore<T>& store, const std::string& name, std::size_t channels,
              std::size_t latent_channels, const ModelConfig& cfg, nn::InitRng& rng);

  nn::Tensor<T> front(const nn::Tensor<T>& f, const nn::Tensor<T>& e) const;
  std::pair<nn::Tensor<T>, nn::Tensor<T>> prior(const nn::Tensor<T>& front_feature) const;
  nn::Tensor<T> posterior(const nn::Tensor<T>& enc_feature, const nn::Tensor<T>& front_feature,
                          const nn::Tensor<T>& e) const;
  nn::Tensor<T> merge(const nn::Tensor<T>& front_feature, const nn::Tensor<T>& z,
                      const nn::Tensor<T>& e) const;

  std::size_t channels() const { return channels_; }
  std::size_t latent_channels() const { return latent_channels_; }
  void collect(std::vector<const ResBlock<T>*>& out) const;

 private:
  std::size_t channels_, latent_channels_;
  BlockConfig config_;
  std::unique_ptr<ResBlock<T>> front_, post_enc_, post_dec_, post_fuse_, end_;
  Conv<T> prior_head_, post_merge_, post_head_, z_proj_;
};

template <typename T>
struct TrainOutput {
  nn::Tensor<T> x_hat;                  // unclamped reconstruction
  std::vector<nn::Tensor<T>> rates;     // per latent, (N) total nats per sample
  std::vector<nn::Tensor<T>> z, mu, mu_hat, sigma;
};

template <typename T>
class QarvModel {
 public:
  QarvModel(const ModelConfig& cfg, std::uint64_t seed);
  QarvModel(const QarvModel&) = delete;
  QarvModel& operator=(const QarvModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& params() { return store_; }
  const nn::ParameterStore<T>& params() const { return store_; }

  // (N, embed_dim), one row per lambda.
  nn::Tensor<T> embed(std::span<const double> lambdas) const;

  // Feature maps keyed by divisor. Input spatial dims must be multiples of D.
  std::map<std::size_t, nn::Tensor<T>> encode_features(const nn::Tensor<T>& x,
                                                       const nn::Tensor<T>& e) const;

  // Learned bias tiled to (n, C, H / D, W / D).
  nn::Tensor<T> initial_state(std::size_t n, std::size_t height, std::size_t width) const;
  // Upsamples the decoder state when latent i sits at a finer resolution
  // than latent i - 1.
  nn::Tensor<T> enter(std::size_t i, const nn::Tensor<T>& state, const nn::Tensor<T>& e) const;
  const LatentBlock<T>& block(std::size_t i) const { return *blocks_[i]; }
  std::size_t num_latents() const { return blocks_.size(); }
  std::size_t latent_divisor(std::size_t i) const { return block_divisor_[i]; }
  nn::Tensor<T> head(const nn::Tensor<T>& state, const nn::Tensor<T>& e) const;

  // Training pass with additive uniform noise drawn from `noise`.
  TrainOutput<T> forward_train(const nn::Tensor<T>& x, std::span<const double> lambdas,
                               nn::InitRng& noise) const;
  // Decoder-only pass from given latents.
  nn::Tensor<T> decode_from_latents(const std::vector<nn::Tensor<T>>& z, const nn::Tensor<T>& e,
                                    std::size_t height, std::size_t width) const;

  std::vector<const ResBlock<T>*> residual_blocks() const;

 private:
  nn::Tensor<T> check_finite(const nn::Tensor<T>& t, const std::string& where) const;

  ModelConfig cfg_;
  nn::ParameterStore<T> store_;
  Linear<T> embed_fc1_, embed_fc2_;
  std::vector<double> embed_freqs_;

  Conv<T> stem_;
  std::vector<std::vector<std::unique_ptr<ResBlock<T>>>> enc_blocks_;  // fine to coarse
  std::vector<std::unique_ptr<ResBlock<T>>> enc_down_blocks_;
  std::vector<Conv<T>> enc_down_;

  nn::Tensor<T> dec_bias_;
  std::vector<std::unique_ptr<LatentBlock<T>>> blocks_;
  std::vector<std::size_t> block_divisor_;
  struct Upsampler {
    std::unique_ptr<ResBlock<T>> pre, post;
    Conv<T> expand;
    std::size_t factor;
  };
  std::vector<Upsampler> ups_;          // ups_[k] feeds stage k + 1
  std::vector<int> up_before_block_;    // index into ups_, or -1
  std::unique_ptr<ResBlock<T>> head_block_;
  Conv<T> head_conv_;
};

extern template class ResBlock<float>;
extern template class ResBlock<double>;
extern template class LatentBlock<float>;
extern template class LatentBlock<double>;
extern template class QarvModel<float>;
extern template class QarvModel<double>;

}  // namespace qarv::model
