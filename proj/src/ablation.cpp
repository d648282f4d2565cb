#include "qarv/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "qarv/metrics.hpp"

namespace qarv::ablation {

std::string to_string(Axis a) {
  switch (a) {
    case Axis::kBlockConfig: return "block-config";
    case Axis::kAffinePosition: return "affine-position";
    case Axis::kNormType: return "norm-type";
    case Axis::kLambdaRange: return "lambda-range";
  }
  return "?";
}

Axis parse_axis(const std::string& s) {
  for (Axis a : {Axis::kBlockConfig, Axis::kAffinePosition, Axis::kNormType, Axis::kLambdaRange})
    if (to_string(a) == s) return a;
  throw std::invalid_argument("unknown ablation axis '" + s +
                              "' (expected block-config, affine-position, norm-type or lambda-range)");
}

std::vector<Variant> variants(const train::RunConfig& base, Axis axis) {
  std::vector<Variant> out;
  auto add = [&](std::string name, auto&& edit) {
    Variant v{std::move(name), base};
    edit(v.config);
    v.config.model.validate();
    v.config.train.validate(v.config.model);
    out.push_back(std::move(v));
  };
  switch (axis) {
    case Axis::kBlockConfig:
      for (auto c : {model::BlockConfig::kA, model::BlockConfig::kB, model::BlockConfig::kC})
        add(model::to_string(c), [&](train::RunConfig& r) { r.model.block_config = c; });
      break;
    case Axis::kAffinePosition:
      for (int p = 0; p <= 4; ++p)
        add(std::to_string(p), [&](train::RunConfig& r) { r.model.affine_position = p; });
      break;
    case Axis::kNormType:
      for (auto n : {model::NormType::kLayer, model::NormType::kGroup, model::NormType::kInstance})
        add(model::to_string(n), [&](train::RunConfig& r) { r.model.norm = n; });
      break;
    case Axis::kLambdaRange:
      for (double high : {32.0, 128.0, 512.0, 2048.0}) {
        if (high <= base.model.lambda_low) continue;
        char name[64];
        std::snprintf(name, sizeof name, "%g-%g", base.model.lambda_low, high);
        add(name, [&](train::RunConfig& r) {
          r.model.lambda_high = high;
          r.train.fixed_lambda = std::clamp(r.train.fixed_lambda, r.model.lambda_low, high);
        });
      }
      break;
  }
  return out;
}

std::vector<Result> run(const train::RunConfig& base, Axis axis, const std::vector<image::NamedImage>& train_data,
                        std::span<const image::NamedImage> eval_data, const Options& options) {
  auto say = [&](const std::string& s) {
    if (options.progress) options.progress(s);
  };
  std::vector<Result> results;
  for (auto& v : variants(base, axis)) {
    Result r;
    r.axis = to_string(axis);
    r.variant = v.name;
    auto tc = v.config.train;
    tc.log_every = 1;
    tc.checkpoint_every = tc.iterations;
    const auto dir = options.work_dir / (r.axis + "_" + v.name);
    std::vector<double> losses;
    say("training " + r.axis + "=" + v.name + " for " + std::to_string(tc.iterations) + " steps");
    train::Trainer trainer(v.config.model, tc, train_data);
    try {
      trainer.run(dir, [&](const train::StepRecord& s) { losses.push_back(s.loss); });
    } catch (const train::TrainingAborted& e) {
      say(std::string("  aborted: ") + e.what());
      r.nan_free = false;
    }
    if (r.nan_free) {
      const std::size_t tail = std::max<std::size_t>(1, losses.size() / 10);
      r.final_loss = std::accumulate(losses.end() - std::ptrdiff_t(tail), losses.end(), 0.0) / double(tail);
      std::vector<double> lambdas = options.lambdas;
      if (lambdas.empty()) {
        const double lo = v.config.model.lambda_low, hi = v.config.model.lambda_high;
        lambdas = {lo, std::sqrt(lo * hi), hi};
      }
      const auto model = train::load_model(trainer.checkpoint());
      const auto sweep = metrics::rd_sweep(*model, eval_data, lambdas);
      const auto means = sweep.means();
      for (const auto& m : means) {
        r.mean_bpp += m.bpp / double(means.size());
        r.mean_psnr += m.psnr / double(means.size());
      }
      metrics::write_csv(dir / "sweep.csv", sweep.rows);
      if (!std::isfinite(r.final_loss) || !std::isfinite(r.mean_bpp) || !std::isfinite(r.mean_psnr))
        r.nan_free = false;
    } else {
      r.final_loss = r.mean_bpp = r.mean_psnr = std::numeric_limits<double>::quiet_NaN();
    }
    results.push_back(r);
  }
  std::vector<Result*> ok;
  for (auto& r : results)
    if (r.nan_free) ok.push_back(&r);
  std::stable_sort(ok.begin(), ok.end(), [](const Result* a, const Result* b) { return a->final_loss < b->final_loss; });
  for (std::size_t i = 0; i < ok.size(); ++i) ok[i]->rank = i + 1;
  return results;
}

std::string table_header() { return "axis,variant,final_loss,mean_bpp,mean_psnr,nan_free,rank"; }

void write_table(std::ostream& os, std::span<const Result> rows) {
  os << table_header() << "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%d,%zu\n", r.axis.c_str(), r.variant.c_str(), r.final_loss,
                  r.mean_bpp, r.mean_psnr, r.nan_free ? 1 : 0, r.rank);
    os << buf;
  }
}

void write_table(const std::filesystem::path& path, std::span<const Result> rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_table(f, rows);
  f.flush();
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace qarv::ablation
