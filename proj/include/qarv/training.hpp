#pragma once

// Rate-distortion objectives, the lambda sampler and the training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qarv/checkpoint.hpp"
#include "qarv/image.hpp"
#include "qarv/model.hpp"

namespace qarv::train {

// ------------------------------------------------------------ lambda sampler

enum class ScheduleKind { kCubeRoot, kLogUniform };

// Cube-root schedule: Delta ~ U(low^(1/3), high^(1/3)), lambda = Delta^3,
// density (1/3) lambda^(-2/3) / (high^(1/3) - low^(1/3)) on [low, high].
// Log-uniform schedule: ln lambda uniform on [ln low, ln high].
struct LambdaSchedule {
  double low = 16;
  double high = 2048;
  ScheduleKind kind = ScheduleKind::kCubeRoot;

  void validate() const;
};

std::string to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(const std::string& s);

// Inverse-CDF map from u in [0, 1]; the endpoints map exactly to low, high.
double lambda_from_unit(const LambdaSchedule& s, double u);
double sample_lambda(const LambdaSchedule& s, nn::InitRng& rng);
double pdf_lambda(const LambdaSchedule& s, double lambda);
double cdf_lambda(const LambdaSchedule& s, double lambda);
// M + 1 increasing edges splitting the schedule into bins of equal mass.
std::vector<double> equal_mass_bin_edges(const LambdaSchedule& s, std::size_t m);

// -------------------------------------------------------------------- losses

// Per item: rate_nats / pixels + lambda * mse; averaged over the batch.
// rate_nats and mse are (N) tensors.
template <typename T>
nn::Tensor<T> rd_loss(const nn::Tensor<T>& rate_nats, const nn::Tensor<T>& mse,
                      std::span<const double> lambdas, std::size_t pixels);

template <typename T>
struct LossTerms {
  nn::Tensor<T> loss;
  nn::Tensor<T> rate_nats;  // (N) summed over latents
  nn::Tensor<T> mse;        // (N) against the unclamped reconstruction
};

template <typename T>
LossTerms<T> loss_terms(const model::TrainOutput<T>& out, const nn::Tensor<T>& x,
                        std::span<const double> lambdas);

template <typename T>
LossTerms<T> loss_fixed(const model::QarvModel<T>& m, const nn::Tensor<T>& x, double lambda,
                        nn::InitRng& noise);
// One lambda per batch item; the drawn values are appended to `drawn`.
template <typename T>
LossTerms<T> loss_variable(const model::QarvModel<T>& m, const nn::Tensor<T>& x,
                           const LambdaSchedule& s, nn::InitRng& rng, std::vector<double>* drawn = nullptr);

// -------------------------------------------------------------- configuration

enum class LrSchedule { kConstant, kConstantCosine };

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t iterations = 10000;
  double lr = 2e-4;
  LrSchedule lr_schedule = LrSchedule::kConstantCosine;
  std::size_t crop = 32;
  double flip_prob = 0.5;
  double grad_clip = 2.0;
  double ema_decay = 0.9999;
  std::uint64_t seed = 0;
  bool variable_rate = true;
  double fixed_lambda = 512;
  ScheduleKind lambda_schedule = ScheduleKind::kCubeRoot;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 100;
  std::string dataset = "synthetic";  // a directory, or "synthetic"
  std::size_t synthetic_count = 1024;
  std::size_t synthetic_size = 32;

  bool operator==(const TrainConfig&) const = default;
  void validate(const model::ModelConfig& m) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

// A flat JSON document holding both model and training keys. "preset"
// selects the model base (default qarv-tiny).
struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;
};
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Constant, or constant for the first 90% then cosine decay to 0.02 * lr.
double learning_rate(const TrainConfig& c, std::size_t iteration);

// ---------------------------------------------------------------------- data

// Independent deterministic streams for batch composition, lambdas and noise.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t iteration, std::uint64_t salt);

struct Batch {
  nn::Tensor<float> x;
  std::vector<std::size_t> indices;
  std::vector<std::size_t> offsets;  // (y, x) pairs
  std::vector<bool> flipped;
};

Batch make_batch(std::span<const image::NamedImage> data, const TrainConfig& c, std::size_t iteration);

std::vector<image::NamedImage> load_dataset(const TrainConfig& c);

// ------------------------------------------------------------------- trainer

struct StepRecord {
  std::size_t iteration = 0;
  double loss = 0, rate_bpp = 0, mse = 0, psnr = 0, lambda = 0, lr = 0;
};

std::string log_header();
std::string log_line(const StepRecord& r);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::size_t iteration, const std::string& why)
      : std::runtime_error("training aborted at iteration " + std::to_string(iteration) + ": " + why),
        iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

class Trainer {
 public:
  Trainer(const model::ModelConfig& mc, const TrainConfig& tc, std::vector<image::NamedImage> data);
  // Continues from a checkpoint written by checkpoint().
  static std::unique_ptr<Trainer> resume(const nn::Checkpoint& ckpt, std::vector<image::NamedImage> data);

  // One optimizer step. Throws TrainingAborted on non-finite loss or
  // gradients; parameters are left as they were before the step.
  StepRecord step();
  // Steps until the configured iteration count. Writes `<out>/train_log.csv`
  // and `<out>/model.ckpt` (every checkpoint_every steps and at the end).
  void run(const std::filesystem::path& out_dir, const std::function<void(const StepRecord&)>& on_log = {});

  nn::Checkpoint checkpoint() const;

  model::QarvModel<float>& model() { return *model_; }
  const nn::EmaState<float>& ema() const { return ema_; }
  const TrainConfig& config() const { return tc_; }
  std::size_t iteration() const { return iteration_; }

 private:
  std::unique_ptr<model::QarvModel<float>> model_;
  TrainConfig tc_;
  std::vector<image::NamedImage> data_;
  nn::AdamState<float> adam_;
  nn::EmaState<float> ema_;
  std::size_t iteration_ = 0;
};

// Model stored in a trainer checkpoint, with EMA weights when requested and
// available.
std::unique_ptr<model::QarvModel<float>> load_model(const nn::Checkpoint& ckpt, bool use_ema = true);
std::unique_ptr<model::QarvModel<float>> load_model(const std::filesystem::path& path, bool use_ema = true);

}  // namespace qarv::train
