#include "qarv/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace qarv::train {

using nlohmann::json;
using nn::Shape;
using nn::Tensor;

namespace {

[[noreturn]] void bad_train_config(const std::string& what) {
  throw std::invalid_argument("train config: " + what);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

// ------------------------------------------------------------ lambda sampler

void LambdaSchedule::validate() const {
  if (!(low > 0 && low < high && std::isfinite(high)))
    throw std::invalid_argument("lambda schedule needs 0 < low < high");
}

std::string to_string(ScheduleKind k) { return k == ScheduleKind::kCubeRoot ? "cube-root" : "log-uniform"; }

ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "cube-root") return ScheduleKind::kCubeRoot;
  if (s == "log-uniform") return ScheduleKind::kLogUniform;
  throw std::invalid_argument("unknown lambda schedule '" + s + "' (expected cube-root or log-uniform)");
}

double lambda_from_unit(const LambdaSchedule& s, double u) {
  if (u <= 0) return s.low;
  if (u >= 1) return s.high;
  double lambda;
  if (s.kind == ScheduleKind::kCubeRoot) {
    const double a = std::cbrt(s.low), b = std::cbrt(s.high);
    const double delta = a + (b - a) * u;
    lambda = delta * delta * delta;
  } else {
    lambda = std::exp(std::log(s.low) + (std::log(s.high) - std::log(s.low)) * u);
  }
  return std::clamp(lambda, s.low, s.high);
}

double sample_lambda(const LambdaSchedule& s, nn::InitRng& rng) { return lambda_from_unit(s, rng.uniform()); }

double pdf_lambda(const LambdaSchedule& s, double lambda) {
  if (lambda < s.low || lambda > s.high) return 0;
  if (s.kind == ScheduleKind::kCubeRoot)
    return (1.0 / 3.0) * std::pow(lambda, -2.0 / 3.0) / (std::cbrt(s.high) - std::cbrt(s.low));
  return 1.0 / (lambda * (std::log(s.high) - std::log(s.low)));
}

double cdf_lambda(const LambdaSchedule& s, double lambda) {
  if (lambda <= s.low) return 0;
  if (lambda >= s.high) return 1;
  if (s.kind == ScheduleKind::kCubeRoot)
    return (std::cbrt(lambda) - std::cbrt(s.low)) / (std::cbrt(s.high) - std::cbrt(s.low));
  return (std::log(lambda) - std::log(s.low)) / (std::log(s.high) - std::log(s.low));
}

std::vector<double> equal_mass_bin_edges(const LambdaSchedule& s, std::size_t m) {
  if (m == 0) throw std::invalid_argument("equal_mass_bin_edges: need at least one bin");
  std::vector<double> edges(m + 1);
  for (std::size_t i = 0; i <= m; ++i) {
    const double t = double(i) / double(m);
    if (i == 0) {
      edges[i] = s.low;
    } else if (i == m) {
      edges[i] = s.high;
    } else if (s.kind == ScheduleKind::kCubeRoot) {
      const double delta = (1 - t) * std::cbrt(s.low) + t * std::cbrt(s.high);
      edges[i] = delta * delta * delta;
    } else {
      edges[i] = std::exp((1 - t) * std::log(s.low) + t * std::log(s.high));
    }
  }
  return edges;
}

// -------------------------------------------------------------------- losses

template <typename T>
Tensor<T> rd_loss(const Tensor<T>& rate_nats, const Tensor<T>& mse, std::span<const double> lambdas,
                  std::size_t pixels) {
  const std::size_t n = lambdas.size();
  if (rate_nats.shape() != Shape{n} || mse.shape() != Shape{n})
    throw std::invalid_argument("rd_loss: expected (N) rate and distortion with one lambda per item");
  std::vector<T> rate_w(n, T(1.0 / (double(n) * double(pixels)))), dist_w(n);
  for (std::size_t i = 0; i < n; ++i) dist_w[i] = T(lambdas[i] / double(n));
  return nn::add(nn::weighted_sum(rate_nats, std::span<const T>(rate_w)),
                 nn::weighted_sum(mse, std::span<const T>(dist_w)));
}

template <typename T>
LossTerms<T> loss_terms(const model::TrainOutput<T>& out, const Tensor<T>& x, std::span<const double> lambdas) {
  LossTerms<T> t;
  t.rate_nats = out.rates.front();
  for (std::size_t i = 1; i < out.rates.size(); ++i) t.rate_nats = nn::add(t.rate_nats, out.rates[i]);
  t.mse = nn::mse_per_sample(out.x_hat, x);
  t.loss = rd_loss(t.rate_nats, t.mse, lambdas, x.dim(2) * x.dim(3));
  if (!std::isfinite(double(t.loss.item()))) throw std::runtime_error("non-finite loss");
  return t;
}

template <typename T>
LossTerms<T> loss_fixed(const model::QarvModel<T>& m, const Tensor<T>& x, double lambda, nn::InitRng& noise) {
  const std::vector<double> lambdas(x.dim(0), lambda);
  return loss_terms(m.forward_train(x, lambdas, noise), x, lambdas);
}

template <typename T>
LossTerms<T> loss_variable(const model::QarvModel<T>& m, const Tensor<T>& x, const LambdaSchedule& s,
                           nn::InitRng& rng, std::vector<double>* drawn) {
  std::vector<double> lambdas(x.dim(0));
  for (auto& l : lambdas) l = sample_lambda(s, rng);
  if (drawn) drawn->insert(drawn->end(), lambdas.begin(), lambdas.end());
  return loss_terms(m.forward_train(x, lambdas, rng), x, lambdas);
}

// -------------------------------------------------------------- configuration

void TrainConfig::validate(const model::ModelConfig& m) const {
  if (batch_size == 0) bad_train_config("batch_size must be positive");
  if (!(lr > 0)) bad_train_config("lr must be positive");
  if (crop == 0 || crop % m.max_downsample != 0)
    bad_train_config("crop " + std::to_string(crop) + " must be a positive multiple of " +
                     std::to_string(m.max_downsample));
  if (!(flip_prob >= 0 && flip_prob <= 1)) bad_train_config("flip_prob must lie in [0, 1]");
  if (!(grad_clip > 0)) bad_train_config("grad_clip must be positive");
  if (!(ema_decay > 0 && ema_decay < 1)) bad_train_config("ema_decay must lie in (0, 1)");
  if (!variable_rate && !(fixed_lambda >= m.lambda_low && fixed_lambda <= m.lambda_high))
    bad_train_config("fixed lambda outside the model's range");
  if (checkpoint_every == 0 || log_every == 0) bad_train_config("checkpoint_every and log_every must be positive");
}

json TrainConfig::to_json() const {
  json j;
  j["batch_size"] = batch_size;
  j["iterations"] = iterations;
  j["lr"] = lr;
  j["lr_schedule"] = lr_schedule == LrSchedule::kConstant ? "constant" : "constant-cosine";
  j["crop"] = crop;
  j["flip_prob"] = flip_prob;
  j["grad_clip"] = grad_clip;
  j["ema_decay"] = ema_decay;
  j["seed"] = seed;
  j["loss_mode"] = variable_rate ? "variable" : "fixed";
  j["lambda"] = fixed_lambda;
  j["lambda_schedule"] = to_string(lambda_schedule);
  j["checkpoint_every"] = checkpoint_every;
  j["log_every"] = log_every;
  j["dataset"] = dataset;
  j["synthetic_count"] = synthetic_count;
  j["synthetic_size"] = synthetic_size;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  TrainConfig c = base;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("batch_size", c.batch_size);
    get("iterations", c.iterations);
    get("lr", c.lr);
    if (j.contains("lr_schedule")) {
      const auto s = j.at("lr_schedule").get<std::string>();
      if (s == "constant") c.lr_schedule = LrSchedule::kConstant;
      else if (s == "constant-cosine") c.lr_schedule = LrSchedule::kConstantCosine;
      else bad_train_config("unknown lr_schedule '" + s + "' (expected constant or constant-cosine)");
    }
    get("crop", c.crop);
    get("flip_prob", c.flip_prob);
    get("grad_clip", c.grad_clip);
    get("ema_decay", c.ema_decay);
    get("seed", c.seed);
    if (j.contains("loss_mode")) {
      const auto s = j.at("loss_mode").get<std::string>();
      if (s != "fixed" && s != "variable") bad_train_config("loss_mode must be fixed or variable");
      c.variable_rate = s == "variable";
    }
    get("lambda", c.fixed_lambda);
    if (j.contains("lambda_schedule")) c.lambda_schedule = parse_schedule_kind(j.at("lambda_schedule").get<std::string>());
    get("checkpoint_every", c.checkpoint_every);
    get("log_every", c.log_every);
    get("dataset", c.dataset);
    get("synthetic_count", c.synthetic_count);
    get("synthetic_size", c.synthetic_size);
  } catch (const json::exception& e) {
    bad_train_config(e.what());
  }
  return c;
}

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  const json model_keys = model::preset("qarv-tiny").to_json(), train_keys = TrainConfig{}.to_json();
  for (const auto& [key, value] : j.items())
    if (key != "preset" && !model_keys.contains(key) && !train_keys.contains(key))
      throw std::invalid_argument("config: unknown key '" + key + "'");
  RunConfig rc;
  const std::string preset = j.contains("preset") ? j.at("preset").get<std::string>() : "qarv-tiny";
  rc.model = model::ModelConfig::from_json(j, model::preset(preset));
  rc.train = TrainConfig::from_json(j, TrainConfig{});
  rc.train.validate(rc.model);
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

double learning_rate(const TrainConfig& c, std::size_t iteration) {
  if (c.lr_schedule == LrSchedule::kConstant || c.iterations == 0) return c.lr;
  const double start = 0.9 * double(c.iterations);
  if (double(iteration) < start) return c.lr;
  const double span = double(c.iterations) - start;
  const double p = std::min(1.0, (double(iteration) - start) / span);
  return c.lr * (0.02 + 0.98 * 0.5 * (1 + std::cos(std::numbers::pi * p)));
}

// ---------------------------------------------------------------------- data

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t iteration, std::uint64_t salt) {
  return splitmix64(splitmix64(seed ^ (salt * 0x632be59bd9b4e019ull)) + iteration);
}

Batch make_batch(std::span<const image::NamedImage> data, const TrainConfig& c, std::size_t iteration) {
  if (data.empty()) throw std::invalid_argument("make_batch: empty dataset");
  nn::InitRng rng(stream_seed(c.seed, iteration, 0));
  Batch b;
  const std::size_t k = c.crop, plane = k * k;
  b.x = Tensor<float>(Shape{c.batch_size, 3, k, k});
  auto xv = b.x.mutable_values();
  for (std::size_t i = 0; i < c.batch_size; ++i) {
    const std::size_t idx = std::min(data.size() - 1, std::size_t(rng.uniform() * double(data.size())));
    const auto& img = data[idx].image;
    if (img.width < k || img.height < k)
      throw std::invalid_argument("image '" + data[idx].id + "' is smaller than the crop size");
    const std::size_t oy = std::size_t(rng.uniform() * double(img.height - k + 1));
    const std::size_t ox = std::size_t(rng.uniform() * double(img.width - k + 1));
    const bool flip = rng.uniform() < c.flip_prob;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x)
          xv[(i * 3 + ch) * plane + y * k + x] = img.at(ch, oy + y, ox + (flip ? k - 1 - x : x));
    b.indices.push_back(idx);
    b.offsets.push_back(oy);
    b.offsets.push_back(ox);
    b.flipped.push_back(flip);
  }
  return b;
}

std::vector<image::NamedImage> load_dataset(const TrainConfig& c) {
  if (c.dataset == "synthetic") return image::synthetic_textures(c.synthetic_count, c.synthetic_size, c.seed + 1);
  return image::load_directory(c.dataset);
}

// ------------------------------------------------------------------- trainer

std::string log_header() { return "iteration,loss,rate_bpp,mse,psnr,lambda,lr"; }

std::string log_line(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.iteration, r.loss, r.rate_bpp, r.mse,
                r.psnr, r.lambda, r.lr);
  return buf;
}

Trainer::Trainer(const model::ModelConfig& mc, const TrainConfig& tc, std::vector<image::NamedImage> data)
    : model_(std::make_unique<model::QarvModel<float>>(mc, tc.seed)), tc_(tc), data_(std::move(data)) {
  tc_.validate(mc);
  if (data_.empty()) throw std::invalid_argument("trainer: empty dataset");
  adam_.options.lr = tc_.lr;
  ema_ = nn::ema_init(model_->params(), tc_.ema_decay);
}

StepRecord Trainer::step() {
  const auto& mc = model_->config();
  const Batch batch = make_batch(data_, tc_, iteration_);
  nn::InitRng lambda_rng(stream_seed(tc_.seed, iteration_, 1));
  nn::InitRng noise(stream_seed(tc_.seed, iteration_, 2));
  std::vector<double> lambdas(tc_.batch_size, tc_.fixed_lambda);
  if (tc_.variable_rate) {
    const LambdaSchedule sched{mc.lambda_low, mc.lambda_high, tc_.lambda_schedule};
    for (auto& l : lambdas) l = sample_lambda(sched, lambda_rng);
  }

  auto& store = model_->params();
  store.zero_grad();
  LossTerms<float> terms;
  try {
    terms = loss_terms(model_->forward_train(batch.x, lambdas, noise), batch.x, lambdas);
  } catch (const std::runtime_error& e) {
    throw TrainingAborted(iteration_, e.what());
  }
  nn::backward(terms.loss);
  clip_global_norm(store, tc_.grad_clip);
  adam_.options.lr = learning_rate(tc_, iteration_);
  try {
    nn::adam_step(store, adam_);
  } catch (const nn::NonFiniteGradient& e) {
    throw TrainingAborted(iteration_, e.what());
  }
  nn::ema_update(ema_, store);

  StepRecord r;
  r.iteration = iteration_;
  r.loss = terms.loss.item();
  const double pixels = double(tc_.crop * tc_.crop);
  for (std::size_t i = 0; i < tc_.batch_size; ++i) {
    r.rate_bpp += double(terms.rate_nats[i]) / std::numbers::ln2 / pixels;
    r.mse += double(terms.mse[i]);
    r.lambda += lambdas[i];
  }
  r.rate_bpp /= double(tc_.batch_size);
  r.mse /= double(tc_.batch_size);
  r.lambda /= double(tc_.batch_size);
  r.psnr = r.mse > 0 ? -10 * std::log10(r.mse) : INFINITY;
  r.lr = adam_.options.lr;
  ++iteration_;
  return r;
}

void Trainer::run(const std::filesystem::path& out_dir, const std::function<void(const StepRecord&)>& on_log) {
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / "train_log.csv";
  const bool fresh = iteration_ == 0 || !std::filesystem::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (fresh) log << log_header() << "\n";
  const auto ckpt_path = out_dir / "model.ckpt";
  while (iteration_ < tc_.iterations) {
    const StepRecord r = step();
    if (iteration_ % tc_.checkpoint_every == 0 || iteration_ == tc_.iterations) checkpoint().save(ckpt_path);
    if (r.iteration % tc_.log_every == 0 || iteration_ == tc_.iterations) {
      log << log_line(r) << "\n";
      log.flush();
      if (on_log) on_log(r);
    }
  }
  if (!log) throw std::runtime_error("write failed for " + log_path.string());
}

nn::Checkpoint Trainer::checkpoint() const {
  nn::Checkpoint ckpt;
  nn::put_parameters(ckpt, model_->params(), &ema_);
  const auto& params = model_->params().params();
  for (std::size_t k = 0; k < params.size() && k < adam_.first_moment.size(); ++k) {
    ckpt.put<float>(params[k].name + "/adam_m", params[k].value.shape(), adam_.first_moment[k]);
    ckpt.put<float>(params[k].name + "/adam_v", params[k].value.shape(), adam_.second_moment[k]);
  }
  json meta;
  meta["model"] = model_->config().to_json();
  meta["train"] = tc_.to_json();
  meta["iteration"] = iteration_;
  meta["adam_step"] = adam_.step_count;
  ckpt.put_string("__config__", meta.dump());
  return ckpt;
}

namespace {

json checkpoint_meta(const nn::Checkpoint& ckpt) {
  const auto* e = ckpt.find("__config__");
  if (!e) throw std::runtime_error("checkpoint has no model configuration");
  try {
    return json::parse(e->as_string());
  } catch (const json::exception& ex) {
    throw std::runtime_error(std::string("checkpoint configuration is malformed: ") + ex.what());
  }
}

}  // namespace

std::unique_ptr<Trainer> Trainer::resume(const nn::Checkpoint& ckpt, std::vector<image::NamedImage> data) {
  const json meta = checkpoint_meta(ckpt);
  const auto mc = model::ModelConfig::from_json(meta.at("model"), model::preset("qarv-tiny"));
  const auto tc = TrainConfig::from_json(meta.at("train"), TrainConfig{});
  auto t = std::make_unique<Trainer>(mc, tc, std::move(data));
  nn::load_parameters(ckpt, t->model_->params(), false);
  const auto& params = t->model_->params().params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    t->ema_.shadow[k].assign(params[k].value.values().begin(), params[k].value.values().end());
    if (const auto* e = ckpt.find(params[k].name + "/ema")) {
      const auto v = e->as_doubles();
      t->ema_.shadow[k].assign(v.begin(), v.end());
    }
  }
  t->adam_.step_count = meta.at("adam_step").get<std::uint64_t>();
  if (t->adam_.step_count > 0) {
    for (const auto& p : params) {
      const auto m = ckpt.at(p.name + "/adam_m").as_doubles();
      const auto v = ckpt.at(p.name + "/adam_v").as_doubles();
      t->adam_.first_moment.emplace_back(m.begin(), m.end());
      t->adam_.second_moment.emplace_back(v.begin(), v.end());
    }
  }
  t->iteration_ = meta.at("iteration").get<std::size_t>();
  return t;
}

std::unique_ptr<model::QarvModel<float>> load_model(const nn::Checkpoint& ckpt, bool use_ema) {
  const json meta = checkpoint_meta(ckpt);
  if (!meta.contains("model")) throw std::runtime_error("checkpoint configuration lacks the model section");
  const auto mc = model::ModelConfig::from_json(meta.at("model"), model::preset("qarv-tiny"));
  auto m = std::make_unique<model::QarvModel<float>>(mc, 0);
  nn::load_parameters(ckpt, m->params(), use_ema);
  return m;
}

std::unique_ptr<model::QarvModel<float>> load_model(const std::filesystem::path& path, bool use_ema) {
  return load_model(nn::Checkpoint::load(path), use_ema);
}

#define QARV_INSTANTIATE_TRAINING(T)                                                                    \
  template Tensor<T> rd_loss(const Tensor<T>&, const Tensor<T>&, std::span<const double>, std::size_t); \
  template LossTerms<T> loss_terms(const model::TrainOutput<T>&, const Tensor<T>&, std::span<const double>); \
  template LossTerms<T> loss_fixed(const model::QarvModel<T>&, const Tensor<T>&, double, nn::InitRng&);  \
  template LossTerms<T> loss_variable(const model::QarvModel<T>&, const Tensor<T>&, const LambdaSchedule&, \
                                      nn::InitRng&, std::vector<double>*);

QARV_INSTANTIATE_TRAINING(float)
QARV_INSTANTIATE_TRAINING(double)

}  // namespace qarv::train
