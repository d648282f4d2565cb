// qarv: train, compress, decompress, sweep, bdrate, ablate, synth.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <json.hpp>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qarv/ablation.hpp"
#include "qarv/codec.hpp"
#include "qarv/image.hpp"
#include "qarv/metrics.hpp"
#include "qarv/training.hpp"

namespace fs = std::filesystem;
using namespace qarv;
using nlohmann::json;

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  f.flush();
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::vector<double> parse_lambda_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0') throw std::invalid_argument("bad lambda value '" + item + "' in list");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty lambda list");
  return out;
}

// Flags shared by train and ablate that override keys of the config file.
struct ConfigFlags {
  std::string config, dataset, lambda_schedule;
  long long iterations = -1, seed = -1;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Flat JSON run config (default: qarv-tiny preset)")->check(CLI::ExistingFile);
    app->add_option("--iterations", iterations, "Override the number of training steps")->check(CLI::NonNegativeNumber);
    app->add_option("--seed", seed, "Override the seed")->check(CLI::NonNegativeNumber);
    app->add_option("--dataset", dataset, "Training images: a directory of PPM/PGM files or 'synthetic'");
    app->add_option("--lambda-schedule", lambda_schedule, "cube-root or log-uniform");
  }

  train::RunConfig load() const {
    json j = config.empty() ? json::object() : read_json_file(config);
    if (!j.is_object()) throw std::runtime_error("config must be a JSON object");
    if (iterations >= 0) j["iterations"] = iterations;
    if (seed >= 0) j["seed"] = seed;
    if (!dataset.empty()) j["dataset"] = dataset;
    if (!lambda_schedule.empty()) j["lambda_schedule"] = lambda_schedule;
    return train::parse_run_config(j);
  }
};

int cmd_train(const ConfigFlags& flags, const fs::path& out, bool quiet) {
  const auto rc = flags.load();
  auto data = train::load_dataset(rc.train);
  std::cerr << "training " << rc.model.name << " on " << data.size() << " images for " << rc.train.iterations
            << " steps\n";
  train::Trainer trainer(rc.model, rc.train, std::move(data));
  if (!quiet) std::cout << train::log_header() << "\n";
  try {
    trainer.run(out, [&](const train::StepRecord& r) {
      if (!quiet) std::cout << train::log_line(r) << std::endl;
    });
  } catch (const train::TrainingAborted& e) {
    std::cerr << "error: " << e.what() << "\nlast good checkpoint: " << (out / "model.ckpt").string() << "\n";
    return 3;
  }
  std::cerr << "wrote " << (out / "model.ckpt").string() << " and " << (out / "train_log.csv").string() << "\n";
  return 0;
}

int cmd_compress(const fs::path& ckpt, const fs::path& in, const fs::path& out, double lambda, bool raw) {
  const auto model = train::load_model(ckpt, !raw);
  const auto img = image::read_pnm(in);
  const auto res = codec::compress(*model, img, lambda);
  const auto bytes = res.container.serialize();
  write_file(out, bytes);
  std::printf("bpp: %.6f\nbytes: %zu\nsize: %zux%zu\n", metrics::bpp(bytes.size(), img.width, img.height),
              bytes.size(), img.width, img.height);
  return 0;
}

int cmd_decompress(const fs::path& ckpt, const fs::path& in, const fs::path& out, const std::string& mode_str,
                   const std::string& ref, bool raw) {
  const auto mode = codec::DecodeMode::parse(mode_str);
  const auto model = train::load_model(ckpt, !raw);
  const auto container = codec::Container::parse(read_file(in));
  const auto dec = codec::decompress(*model, container, mode);
  const auto img = image::quantize_8bit(dec.image);
  image::write_ppm(out, img);
  std::printf("mode: %s\nsize: %zux%zu\n", mode.to_string().c_str(), img.width, img.height);
  if (!ref.empty()) std::printf("psnr: %.4f\n", metrics::psnr(image::read_pnm(ref), img));
  return 0;
}

int cmd_sweep(const fs::path& ckpt, const fs::path& dir, const std::string& lambdas, const fs::path& out,
              std::size_t threads, bool raw) {
  const auto model = train::load_model(ckpt, !raw);
  const auto images = image::load_directory(dir);
  if (images.empty()) throw std::runtime_error("no .ppm or .pgm images in " + dir.string());
  const auto ls = parse_lambda_list(lambdas);
  const auto sweep = metrics::rd_sweep(*model, images, ls, threads ? threads : metrics::worker_threads());
  metrics::write_csv(out, sweep.rows);
  for (const auto& m : sweep.means()) std::printf("lambda %g: bpp %.6f, psnr %.4f\n", m.lambda, m.bpp, m.psnr);
  return 0;
}

int cmd_bdrate(const fs::path& anchor, const fs::path& test) {
  const double v = metrics::bd_rate(metrics::curve_from_csv(anchor), metrics::curve_from_csv(test));
  std::printf("%.2f\n", v + 0.0);
  return 0;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& axis_str, const fs::path& out, const fs::path& work,
               const std::string& eval_dir, std::size_t eval_count, const std::string& lambdas) {
  const auto axis = ablation::parse_axis(axis_str);
  const auto rc = flags.load();
  const auto data = train::load_dataset(rc.train);
  const auto eval = eval_dir.empty()
                        ? image::synthetic_textures(eval_count, rc.train.synthetic_size, rc.train.seed + 1000003)
                        : image::load_directory(eval_dir);
  if (eval.empty()) throw std::runtime_error("empty evaluation set");
  ablation::Options opt;
  if (!lambdas.empty()) opt.lambdas = parse_lambda_list(lambdas);
  opt.work_dir = work.empty() ? out.parent_path() / (out.stem().string() + "_runs") : work;
  opt.progress = [](const std::string& s) { std::cerr << s << std::endl; };
  const auto rows = ablation::run(rc, axis, data, eval, opt);
  ablation::write_table(out, rows);
  ablation::write_table(std::cout, rows);
  return 0;
}

int cmd_synth(const fs::path& dir, std::size_t count, std::size_t size, std::uint64_t seed) {
  fs::create_directories(dir);
  for (const auto& img : image::synthetic_textures(count, size, seed)) image::write_ppm(dir / (img.id + ".ppm"), img.image);
  std::printf("wrote %zu images to %s\n", count, dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variable-rate hierarchical VAE image codec"};
  app.require_subcommand(1);
  bool raw = false;

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.ckpt and train_log.csv to --out");
  ConfigFlags train_flags;
  train_flags.add(train_cmd);
  std::string train_out;
  bool quiet = false;
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_flag("--quiet", quiet, "Do not echo log lines");

  auto* compress_cmd = app.add_subcommand("compress", "Compress a PPM/PGM image to a .qarv file");
  std::string c_ckpt, c_in, c_out;
  double c_lambda = 0;
  compress_cmd->add_option("checkpoint", c_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  compress_cmd->add_option("image", c_in, "Input image (P6 or P5)")->required()->check(CLI::ExistingFile);
  compress_cmd->add_option("output", c_out, "Output .qarv file")->required();
  compress_cmd->add_option("--lambda", c_lambda, "Rate-distortion trade-off")->required();
  compress_cmd->add_flag("--raw-weights", raw, "Use the raw weights instead of the EMA average");

  auto* decompress_cmd = app.add_subcommand("decompress", "Decode a .qarv file to a PPM image");
  std::string d_ckpt, d_in, d_out, d_mode = "full", d_ref;
  decompress_cmd->add_option("checkpoint", d_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  decompress_cmd->add_option("input", d_in, "Input .qarv file")->required()->check(CLI::ExistingFile);
  decompress_cmd->add_option("output", d_out, "Output PPM")->required();
  decompress_cmd->add_option("--mode", d_mode, "full, progressive:i, loo:i or disjoint:i (1-based)")->capture_default_str();
  decompress_cmd->add_option("--ref", d_ref, "Reference image; prints PSNR")->check(CLI::ExistingFile);
  decompress_cmd->add_flag("--raw-weights", raw, "Use the raw weights instead of the EMA average");

  auto* sweep_cmd = app.add_subcommand("sweep", "Rate-distortion sweep over a directory of images");
  std::string s_ckpt, s_dir, s_lambdas = "16,128,512,2048", s_out;
  std::size_t s_threads = 0;
  sweep_cmd->add_option("checkpoint", s_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("images", s_dir, "Directory of PPM/PGM images")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--lambdas", s_lambdas, "Comma-separated lambda values")->capture_default_str();
  sweep_cmd->add_option("--out", s_out, "Output CSV")->required();
  sweep_cmd->add_option("--threads", s_threads, "Worker threads (default: QARV_THREADS or all cores)");
  sweep_cmd->add_flag("--raw-weights", raw, "Use the raw weights instead of the EMA average");

  auto* bd_cmd = app.add_subcommand("bdrate", "BD-rate (percent) of a test sweep CSV against an anchor");
  std::string b_anchor, b_test;
  bd_cmd->add_option("anchor", b_anchor, "Anchor CSV")->required()->check(CLI::ExistingFile);
  bd_cmd->add_option("test", b_test, "Test CSV")->required()->check(CLI::ExistingFile);

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate variants along one ablation axis");
  ConfigFlags ablate_flags;
  ablate_flags.add(ablate_cmd);
  std::string a_axis, a_out, a_work, a_eval, a_lambdas;
  std::size_t a_eval_count = 16;
  ablate_cmd->add_option("--axis", a_axis, "block-config, affine-position, norm-type or lambda-range")->required();
  ablate_cmd->add_option("--out", a_out, "Result table CSV")->required();
  ablate_cmd->add_option("--work-dir", a_work, "Per-variant checkpoints and logs (default: <out stem>_runs)");
  ablate_cmd->add_option("--eval-dir", a_eval, "Evaluation images (default: held-out synthetic textures)");
  ablate_cmd->add_option("--eval-count", a_eval_count, "Number of synthetic evaluation images")->capture_default_str();
  ablate_cmd->add_option("--lambdas", a_lambdas, "Evaluation lambdas (default: each variant's low, middle, high)");

  auto* synth_cmd = app.add_subcommand("synth", "Write seeded synthetic texture images as PPM files");
  std::string y_dir;
  std::size_t y_count = 16, y_size = 32;
  std::uint64_t y_seed = 0;
  synth_cmd->add_option("directory", y_dir, "Output directory")->required();
  synth_cmd->add_option("--count", y_count, "Number of images")->capture_default_str();
  synth_cmd->add_option("--size", y_size, "Side length in pixels")->capture_default_str();
  synth_cmd->add_option("--seed", y_seed, "Generator seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_flags, train_out, quiet);
    if (*compress_cmd) return cmd_compress(c_ckpt, c_in, c_out, c_lambda, raw);
    if (*decompress_cmd) return cmd_decompress(d_ckpt, d_in, d_out, d_mode, d_ref, raw);
    if (*sweep_cmd) return cmd_sweep(s_ckpt, s_dir, s_lambdas, s_out, s_threads, raw);
    if (*bd_cmd) return cmd_bdrate(b_anchor, b_test);
    if (*ablate_cmd) return cmd_ablate(ablate_flags, a_axis, a_out, a_work, a_eval, a_eval_count, a_lambdas);
    if (*synth_cmd) return cmd_synth(y_dir, y_count, y_size, y_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
