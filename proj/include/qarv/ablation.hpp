#pragma once

// Ablation harness: train a family of config variants with a shared seed and
// budget, sweep each over an evaluation set and tabulate the results.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qarv/image.hpp"
#include "qarv/training.hpp"

namespace qarv::ablation {

enum class Axis { kBlockConfig, kAffinePosition, kNormType, kLambdaRange };

std::string to_string(Axis a);
// "block-config", "affine-position", "norm-type" or "lambda-range".
Axis parse_axis(const std::string& s);

struct Variant {
  std::string name;
  train::RunConfig config;
};

// block-config: A, B, C. affine-position: 0 to 4. norm-type: layer, group,
// instance. lambda-range: lambda_low fixed, lambda_high in {32, 128, 512, 2048}.
std::vector<Variant> variants(const train::RunConfig& base, Axis axis);

struct Result {
  std::string axis, variant;
  double final_loss = 0;  // mean training loss over the last tenth of steps
  double mean_bpp = 0, mean_psnr = 0;
  bool nan_free = true;
  std::size_t rank = 0;   // by final loss, 1 = lowest; 0 when training aborted
};

struct Options {
  // Empty: each variant is evaluated at its own lambda_low, geometric middle
  // and lambda_high.
  std::vector<double> lambdas;
  std::filesystem::path work_dir;  // per-variant checkpoints and logs
  std::function<void(const std::string&)> progress;
};

std::vector<Result> run(const train::RunConfig& base, Axis axis, const std::vector<image::NamedImage>& train_data,
                        std::span<const image::NamedImage> eval_data, const Options& options);

std::string table_header();
void write_table(std::ostream& os, std::span<const Result> rows);
void write_table(const std::filesystem::path& path, std::span<const Result> rows);

}  // namespace qarv::ablation
