#pragma once

// Rate-distortion measurements: PSNR, bpp, BD-rate and lambda sweeps.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qarv/image.hpp"
#include "qarv/model.hpp"

namespace qarv::metrics {

// Mean squared error over all RGB samples. Throws on a size mismatch.
double mse(const image::Image& a, const image::Image& b);
// -10 log10(mse); +infinity when the images are identical.
double psnr_from_mse(double mse);
double psnr(const image::Image& reference, const image::Image& reconstruction);

// Mean PSNR of the baseline that predicts every pixel as the per-channel
// mean over all images.
double mean_predictor_psnr(std::span<const image::NamedImage> images);

// 8 * file_bytes / (width * height).
double bpp(std::size_t file_bytes, std::size_t width, std::size_t height);

struct RdPoint {
  std::string image_id;
  double lambda = 0;
  double bpp = 0;
  double psnr = 0;
};

inline constexpr const char* kMeanRowId = "__mean__";

// Bjontegaard delta rate in percent: least-squares cubics of log10(bpp)
// against PSNR, integrated over the overlapping PSNR interval. Points with
// non-finite PSNR are ignored. Throws std::invalid_argument with fewer than
// four usable points on either curve or no overlap.
double bd_rate(std::span<const RdPoint> anchor, std::span<const RdPoint> test);

// Compress, decompress and measure one image. PSNR is taken against the
// 8-bit reconstruction as it would be written to disk.
RdPoint evaluate(const model::QarvModel<float>& m, const image::NamedImage& img, double lambda);

struct Sweep {
  // Per lambda: one row per image in input order, then the mean row.
  std::vector<RdPoint> rows;
  std::vector<RdPoint> means() const;
};

// Worker count from QARV_THREADS, else the number of hardware threads.
std::size_t worker_threads();

Sweep rd_sweep(const model::QarvModel<float>& m, std::span<const image::NamedImage> images,
               std::span<const double> lambdas, std::size_t threads = worker_threads());

std::string csv_header();
void write_csv(std::ostream& os, std::span<const RdPoint> rows);
void write_csv(const std::filesystem::path& path, std::span<const RdPoint> rows);
std::vector<RdPoint> read_csv(const std::filesystem::path& path);
// The mean rows of a sweep CSV, or every row when it has none.
std::vector<RdPoint> curve_from_csv(const std::filesystem::path& path);

}  // namespace qarv::metrics
