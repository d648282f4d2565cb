#include "qarv/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "qarv/codec.hpp"

namespace qarv::metrics {

double mse(const image::Image& a, const image::Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("mse: image sizes differ (" + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  return s / double(a.data.size());
}

double psnr_from_mse(double m) {
  if (m <= 0) return std::numeric_limits<double>::infinity();
  return -10 * std::log10(m);
}

double psnr(const image::Image& reference, const image::Image& reconstruction) {
  return psnr_from_mse(mse(reference, reconstruction));
}

double mean_predictor_psnr(std::span<const image::NamedImage> images) {
  if (images.empty()) throw std::invalid_argument("mean_predictor_psnr: no images");
  double sum[3] = {0, 0, 0}, count = 0;
  for (const auto& img : images) {
    const std::size_t plane = img.image.width * img.image.height;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < plane; ++k) sum[c] += img.image.data[c * plane + k];
    count += double(plane);
  }
  double total = 0;
  for (const auto& img : images) {
    auto pred = image::make_image(img.image.width, img.image.height);
    const std::size_t plane = img.image.width * img.image.height;
    for (std::size_t c = 0; c < 3; ++c)
      std::fill_n(pred.data.begin() + std::ptrdiff_t(c * plane), plane, float(sum[c] / count));
    total += psnr(img.image, pred);
  }
  return total / double(images.size());
}

double bpp(std::size_t file_bytes, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw std::invalid_argument("bpp: zero image size");
  return 8.0 * double(file_bytes) / (double(width) * double(height));
}

// ------------------------------------------------------------------ BD-rate

namespace {

struct Cubic {
  double center = 0, scale = 1;
  Eigen::Vector4d coef;

  double integral(double a, double b) const {
    auto antiderivative = [&](double x) {
      const double t = (x - center) / scale;
      return scale * (coef[0] * t + coef[1] * t * t / 2 + coef[2] * t * t * t / 3 + coef[3] * t * t * t * t / 4);
    };
    return antiderivative(b) - antiderivative(a);
  }
};

// Least-squares cubic of log10(bpp) in PSNR; the abscissa is centred and
// scaled before the solve.
Cubic fit_curve(std::span<const RdPoint> pts, const char* which, double& lo, double& hi) {
  std::vector<const RdPoint*> use;
  for (const auto& p : pts)
    if (std::isfinite(p.psnr)) {
      if (!(p.bpp > 0)) throw std::invalid_argument(std::string("bd_rate: non-positive bpp on the ") + which + " curve");
      use.push_back(&p);
    }
  if (use.size() < 4)
    throw std::invalid_argument(std::string("bd_rate: the ") + which + " curve needs at least 4 finite points, has " +
                                std::to_string(use.size()));
  lo = hi = use.front()->psnr;
  for (const auto* p : use) {
    lo = std::min(lo, p->psnr);
    hi = std::max(hi, p->psnr);
  }
  Cubic c;
  c.center = (lo + hi) / 2;
  c.scale = hi > lo ? (hi - lo) / 2 : 1;
  Eigen::MatrixXd a(use.size(), 4);
  Eigen::VectorXd y(use.size());
  for (std::size_t i = 0; i < use.size(); ++i) {
    const double t = (use[i]->psnr - c.center) / c.scale;
    a(Eigen::Index(i), 0) = 1;
    a(Eigen::Index(i), 1) = t;
    a(Eigen::Index(i), 2) = t * t;
    a(Eigen::Index(i), 3) = t * t * t;
    y[Eigen::Index(i)] = std::log10(use[i]->bpp);
  }
  c.coef = a.colPivHouseholderQr().solve(y);
  return c;
}

}  // namespace

double bd_rate(std::span<const RdPoint> anchor, std::span<const RdPoint> test) {
  double alo, ahi, tlo, thi;
  const Cubic fa = fit_curve(anchor, "anchor", alo, ahi);
  const Cubic ft = fit_curve(test, "test", tlo, thi);
  const double lo = std::max(alo, tlo), hi = std::min(ahi, thi);
  if (!(hi > lo)) throw std::invalid_argument("bd_rate: the curves' PSNR ranges do not overlap");
  const double avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
  return (std::pow(10.0, avg) - 1) * 100;
}

// -------------------------------------------------------------------- sweep

RdPoint evaluate(const model::QarvModel<float>& m, const image::NamedImage& img, double lambda) {
  const auto res = codec::compress(m, img.image, lambda);
  const auto bytes = res.container.serialize();
  const auto dec = codec::decompress(m, codec::Container::parse(bytes));
  RdPoint p;
  p.image_id = img.id;
  p.lambda = double(res.container.lambda);
  p.bpp = bpp(bytes.size(), img.image.width, img.image.height);
  p.psnr = psnr(img.image, image::quantize_8bit(dec.image));
  return p;
}

std::vector<RdPoint> Sweep::means() const {
  std::vector<RdPoint> out;
  for (const auto& r : rows)
    if (r.image_id == kMeanRowId) out.push_back(r);
  return out;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("QARV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return std::size_t(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Sweep rd_sweep(const model::QarvModel<float>& m, std::span<const image::NamedImage> images,
               std::span<const double> lambdas, std::size_t threads) {
  if (images.empty()) throw std::invalid_argument("rd_sweep: no images");
  if (lambdas.empty()) throw std::invalid_argument("rd_sweep: no lambda values");
  const std::size_t jobs = images.size() * lambdas.size();
  std::vector<RdPoint> results(jobs);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      try {
        results[j] = evaluate(m, images[j % images.size()], lambdas[j / images.size()]);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = jobs;
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, jobs);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  Sweep s;
  for (std::size_t l = 0; l < lambdas.size(); ++l) {
    RdPoint mean;
    mean.image_id = kMeanRowId;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& r = results[l * images.size() + i];
      s.rows.push_back(r);
      mean.lambda = r.lambda;
      mean.bpp += r.bpp;
      mean.psnr += r.psnr;
    }
    mean.bpp /= double(images.size());
    mean.psnr /= double(images.size());
    s.rows.push_back(mean);
  }
  return s;
}

// ---------------------------------------------------------------------- CSV

std::string csv_header() { return "image_id,lambda,bpp,psnr"; }

void write_csv(std::ostream& os, std::span<const RdPoint> rows) {
  os << csv_header() << "\n";
  char buf[128];
  for (const auto& r : rows) {
    if (r.image_id.find_first_of(",\n\"") != std::string::npos)
      throw std::invalid_argument("image id '" + r.image_id + "' cannot be written to CSV");
    std::snprintf(buf, sizeof buf, ",%.9g,%.17g,%.17g\n", r.lambda, r.bpp, r.psnr);
    os << r.image_id << buf;
  }
}

void write_csv(const std::filesystem::path& path, std::span<const RdPoint> rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_csv(f, rows);
  f.flush();
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

std::vector<RdPoint> read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != csv_header())
    throw std::runtime_error(path.string() + ": expected header '" + csv_header() + "'");
  std::vector<RdPoint> rows;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, fields[3];
    std::getline(ss, id, ',');
    RdPoint p;
    p.image_id = id;
    double* dst[3] = {&p.lambda, &p.bpp, &p.psnr};
    for (int k = 0; k < 3; ++k) {
      if (!std::getline(ss, fields[k], ','))
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
      char* end = nullptr;
      *dst[k] = std::strtod(fields[k].c_str(), &end);
      if (fields[k].empty() || *end != '\0')
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad number '" + fields[k] + "'");
    }
    rows.push_back(p);
  }
  return rows;
}

std::vector<RdPoint> curve_from_csv(const std::filesystem::path& path) {
  auto rows = read_csv(path);
  std::vector<RdPoint> means;
  for (const auto& r : rows)
    if (r.image_id == kMeanRowId) means.push_back(r);
  return means.empty() ? rows : means;
}

}  // namespace qarv::metrics
