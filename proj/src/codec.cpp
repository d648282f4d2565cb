#include "qarv/codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include "qarv/ops.hpp"
#include "qarv/range_coder.hpp"

namespace qarv::codec {

using nn::Tensor;

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint64_t uint(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw CodecError(std::string("truncated container (") + what + ")");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw CodecError(std::string("truncated container (") + what + ")");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Quantized PMFs keyed by the exact float sigma; both coder sides see the
// same float values, so the cache never changes what gets coded.
class PmfCache {
 public:
  const prob::QuantizedPmf& get(float sigma) {
    const auto key = std::bit_cast<std::uint32_t>(sigma);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, prob::pmf_for_sigma(double(sigma))).first;
    return it->second;
  }

 private:
  std::unordered_map<std::uint32_t, prob::QuantizedPmf> cache_;
};

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

Tensor<float> embed_one(const model::QarvModel<float>& m, float lambda) {
  const double l = double(lambda);
  return m.embed(std::span<const double>(&l, 1));
}

void check_lambda(const model::ModelConfig& cfg, double lambda) {
  if (!std::isfinite(lambda) || lambda < cfg.lambda_low || lambda > cfg.lambda_high)
    throw std::invalid_argument("lambda " + std::to_string(lambda) + " outside the model's range [" +
                                std::to_string(cfg.lambda_low) + ", " + std::to_string(cfg.lambda_high) + "]");
}

Tensor<float> offset(const Tensor<float>& mu_hat, std::span<const int> symbols) {
  Tensor<float> z(mu_hat.shape());
  auto zv = z.mutable_values();
  for (std::size_t k = 0; k < zv.size(); ++k) zv[k] = mu_hat[k] + float(symbols[k]);
  return z;
}

// Runs the top-down path; choose(i, g, mu_hat, sigma) supplies latent i.
template <typename Choose>
Tensor<float> run_chain(const model::QarvModel<float>& m, const Tensor<float>& e, std::size_t hp, std::size_t wp,
                        Choose&& choose) {
  Tensor<float> state = m.initial_state(1, hp, wp);
  for (std::size_t i = 0; i < m.num_latents(); ++i) {
    state = m.enter(i, state, e);
    const auto& blk = m.block(i);
    const Tensor<float> g = blk.front(state, e);
    const auto [mu_hat, sigma] = blk.prior(g);
    const Tensor<float> z = choose(i, g, mu_hat, sigma);
    state = blk.merge(g, z, e);
  }
  return m.head(state, e);
}

image::Image finish_image(const Tensor<float>& x_hat, std::size_t width, std::size_t height) {
  image::Image img = image::from_tensor(nn::crop(x_hat, height, width));
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

}  // namespace

// ---------------------------------------------------------------- container

std::size_t Container::total_bytes() const {
  std::size_t n = header_bytes();
  for (const auto& s : streams) n += s.size();
  return n;
}

std::vector<std::uint8_t> Container::serialize() const {
  if (streams.size() > 255) throw CodecError("too many streams for the container");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.reserve(total_bytes());
  put_u16(out, version);
  put_u64(out, config_hash);
  put_u32(out, std::bit_cast<std::uint32_t>(lambda));
  put_u32(out, width);
  put_u32(out, height);
  out.push_back(std::uint8_t(streams.size()));
  for (const auto& s : streams) {
    if (s.size() > 0xffffffffu) throw CodecError("stream too long for the container");
    put_u32(out, std::uint32_t(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw CodecError("not a QARV container (bad magic)");
  Container c;
  c.version = std::uint16_t(r.uint(2, "version"));
  if (c.version != kVersion)
    throw CodecError("unsupported container version " + std::to_string(c.version) + " (expected " +
                     std::to_string(kVersion) + ")");
  c.config_hash = r.uint(8, "config hash");
  c.lambda = std::bit_cast<float>(std::uint32_t(r.uint(4, "lambda")));
  c.width = std::uint32_t(r.uint(4, "width"));
  c.height = std::uint32_t(r.uint(4, "height"));
  if (c.width == 0 || c.height == 0) throw CodecError("container has a zero image size");
  const std::size_t n = r.uint(1, "stream count");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = r.uint(4, "stream length");
    const auto payload = r.take(len, "stream payload");
    c.streams.emplace_back(payload.begin(), payload.end());
  }
  if (r.remaining() != 0) throw CodecError("trailing bytes after the last stream");
  return c;
}

// ------------------------------------------------------------- quantization

Quantized quantize_latent(const Tensor<float>& mu, const Tensor<float>& mu_hat, int n_min, int n_max) {
  if (mu.shape() != mu_hat.shape())
    throw std::invalid_argument("quantize_latent: shape mismatch " + nn::shape_str(mu.shape()) + " vs " +
                                nn::shape_str(mu_hat.shape()));
  Quantized q;
  q.symbols.resize(mu.numel());
  for (std::size_t k = 0; k < mu.numel(); ++k) {
    const double d = double(mu[k]) - double(mu_hat[k]);
    q.symbols[k] = int(std::clamp<long>(std::lround(d), n_min, n_max));
  }
  q.z = offset(mu_hat, q.symbols);
  return q;
}

// ----------------------------------------------------------------- compress

CompressResult compress(const model::QarvModel<float>& m, const image::Image& img, double lambda) {
  const auto& cfg = m.config();
  check_lambda(cfg, lambda);
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("compress: empty image");
  nn::NoGradGuard no_grad;

  CompressResult res;
  Container& c = res.container;
  c.config_hash = cfg.hash();
  c.lambda = float(lambda);
  check_lambda(cfg, double(c.lambda));
  c.width = std::uint32_t(img.width);
  c.height = std::uint32_t(img.height);

  const std::size_t d = cfg.max_downsample;
  const std::size_t hp = round_up(img.height, d), wp = round_up(img.width, d);
  const Tensor<float> x = nn::pad_replicate(image::to_tensor<float>(img), hp, wp);
  const Tensor<float> e = embed_one(m, c.lambda);
  const auto feats = m.encode_features(x, e);
  PmfCache pmfs;

  const Tensor<float> x_hat = run_chain(m, e, hp, wp, [&](std::size_t i, const Tensor<float>& g,
                                                          const Tensor<float>& mu_hat, const Tensor<float>& sigma) {
    const Tensor<float> mu = m.block(i).posterior(feats.at(m.latent_divisor(i)), g, e);
    Quantized q = quantize_latent(mu, mu_hat);
    prob::RangeEncoder enc;
    double bits = 0;
    for (std::size_t k = 0; k < q.symbols.size(); ++k) {
      const auto& pmf = pmfs.get(sigma[k]);
      enc.encode_symbol(q.symbols[k], pmf);
      bits -= std::log2(double(pmf.freq(q.symbols[k])) / double(prob::kPmfTotal));
    }
    c.streams.push_back(enc.finish());
    res.ideal_bits.push_back(bits);
    res.symbols.push_back(std::move(q.symbols));
    res.z.push_back(q.z);
    res.mu.push_back(mu);
    res.mu_hat.push_back(mu_hat);
    return q.z;
  });
  res.reconstruction = finish_image(x_hat, img.width, img.height);
  return res;
}

// --------------------------------------------------------------- decompress

DecodeMode DecodeMode::parse(const std::string& s) {
  if (s == "full") return full();
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("unknown decode mode '" + s + "'");
  const std::string kind = s.substr(0, colon), num = s.substr(colon + 1);
  std::size_t index = 0, used = 0;
  try {
    index = std::stoul(num, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (num.empty() || used != num.size() || index == 0)
    throw std::invalid_argument("decode mode '" + s + "' needs a positive latent index");
  if (kind == "progressive") return progressive(index);
  if (kind == "loo") return leave_one_out(index);
  if (kind == "disjoint") return disjoint(index);
  throw std::invalid_argument("unknown decode mode '" + s + "' (expected full, progressive:i, loo:i, disjoint:i)");
}

std::string DecodeMode::to_string() const {
  switch (kind) {
    case DecodeKind::kFull: return "full";
    case DecodeKind::kProgressive: return "progressive:" + std::to_string(index);
    case DecodeKind::kLeaveOneOut: return "loo:" + std::to_string(index);
    case DecodeKind::kDisjoint: return "disjoint:" + std::to_string(index);
  }
  return "full";
}

bool DecodeMode::uses(std::size_t j) const {
  switch (kind) {
    case DecodeKind::kFull: return true;
    case DecodeKind::kProgressive: return j <= index;
    case DecodeKind::kLeaveOneOut: return j != index;
    case DecodeKind::kDisjoint: return j == index;
  }
  return true;
}

DecodeResult decompress(const model::QarvModel<float>& m, const Container& c, const DecodeMode& mode) {
  const auto& cfg = m.config();
  if (c.version != kVersion) throw CodecError("unsupported container version " + std::to_string(c.version));
  if (c.config_hash != cfg.hash())
    throw CodecError("container was written by a different model configuration (hash mismatch)");
  const std::size_t n = m.num_latents();
  if (c.streams.size() != n)
    throw CodecError("container holds " + std::to_string(c.streams.size()) + " streams, model expects " +
                     std::to_string(n));
  if (mode.kind != DecodeKind::kFull && (mode.index < 1 || mode.index > n))
    throw std::invalid_argument("decode mode index " + std::to_string(mode.index) + " outside 1.." +
                                std::to_string(n));
  try {
    check_lambda(cfg, double(c.lambda));
  } catch (const std::invalid_argument& e) {
    throw CodecError(std::string("container ") + e.what());
  }
  nn::NoGradGuard no_grad;

  const std::size_t d = cfg.max_downsample;
  const std::size_t hp = round_up(c.height, d), wp = round_up(c.width, d);
  const Tensor<float> e = embed_one(m, c.lambda);
  PmfCache pmfs;

  auto read_stream = [&](std::size_t i, const Tensor<float>& mu_hat, const Tensor<float>& sigma) {
    prob::RangeDecoder dec(c.streams[i]);
    std::vector<int> symbols(mu_hat.numel());
    try {
      for (std::size_t k = 0; k < symbols.size(); ++k) symbols[k] = dec.decode_symbol(pmfs.get(sigma[k]));
    } catch (const std::runtime_error& err) {
      throw CodecError("latent " + std::to_string(i + 1) + ": " + err.what());
    }
    return offset(mu_hat, symbols);
  };

  DecodeResult res;
  const bool two_pass = mode.kind == DecodeKind::kLeaveOneOut || mode.kind == DecodeKind::kDisjoint;
  Tensor<float> x_hat;
  if (!two_pass) {
    x_hat = run_chain(m, e, hp, wp, [&](std::size_t i, const Tensor<float>&, const Tensor<float>& mu_hat,
                                        const Tensor<float>& sigma) {
      Tensor<float> z = mu_hat;
      if (mode.uses(i + 1)) {
        z = read_stream(i, mu_hat, sigma);
        res.decoded_z.push_back(z);
      }
      res.z.push_back(z);
      return z;
    });
  } else {
    run_chain(m, e, hp, wp, [&](std::size_t i, const Tensor<float>&, const Tensor<float>& mu_hat,
                                const Tensor<float>& sigma) {
      res.decoded_z.push_back(read_stream(i, mu_hat, sigma));
      return res.decoded_z.back();
    });
    x_hat = run_chain(m, e, hp, wp, [&](std::size_t i, const Tensor<float>&, const Tensor<float>& mu_hat,
                                        const Tensor<float>&) {
      res.z.push_back(mode.uses(i + 1) ? res.decoded_z[i] : mu_hat);
      return res.z.back();
    });
  }
  res.image = finish_image(x_hat, c.width, c.height);
  return res;
}

RateBreakdown rate_breakdown(const Container& c) {
  RateBreakdown r;
  r.header_bytes = c.header_bytes();
  double total = 0;
  for (const auto& s : c.streams) {
    r.bits.push_back(8.0 * double(s.size()));
    total += r.bits.back();
  }
  for (double b : r.bits) r.fractions.push_back(total > 0 ? b / total : 0.0);
  return r;
}

}  // namespace qarv::codec
