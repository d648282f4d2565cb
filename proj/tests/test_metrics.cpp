#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "qarv/codec.hpp"
#include "qarv/image.hpp"
#include "qarv/metrics.hpp"
#include "qarv/model.hpp"
#include "support.hpp"

using namespace qarv;
using metrics::RdPoint;

namespace {

image::Image constant_image(std::size_t w, std::size_t h, float v) {
  auto img = image::make_image(w, h);
  for (auto& x : img.data) x = v;
  return img;
}

// Four-plus point curve shaped like a real codec: PSNR concave in log rate.
std::vector<RdPoint> smooth_curve(double rate_scale = 1) {
  std::vector<RdPoint> c;
  for (double b : {0.1, 0.2, 0.35, 0.6, 1.0, 1.5}) {
    RdPoint p;
    p.image_id = metrics::kMeanRowId;
    p.bpp = b * rate_scale;
    p.psnr = 30 + 6 * std::log2(b / 0.1) - 0.3 * std::pow(std::log2(b / 0.1), 2);
    c.push_back(p);
  }
  return c;
}

std::vector<RdPoint> scaled(std::vector<RdPoint> c, double factor) {
  for (auto& p : c) p.bpp *= factor;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("qarv_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("psnr") {
  const auto a = constant_image(8, 4, 0.5f);
  // Every sample off by 0.1 gives MSE 0.01.
  const auto b = constant_image(8, 4, 0.6f);
  CHECK(metrics::psnr(a, b) == doctest::Approx(20).epsilon(1e-6));
  CHECK(metrics::psnr(constant_image(3, 3, 0), constant_image(3, 3, 1)) == 0);
  CHECK(metrics::psnr_from_mse(0.01) == doctest::Approx(20).epsilon(1e-12));
  CHECK(metrics::psnr_from_mse(1) == 0);
  CHECK(std::isinf(metrics::psnr(a, a)));
  CHECK(metrics::psnr(a, a) > 0);
  CHECK_THROWS_AS(metrics::psnr(a, constant_image(4, 8, 0.5f)), std::invalid_argument);
  double prev = std::numeric_limits<double>::infinity();
  for (double m = 1e-6; m < 2; m *= 1.7) {
    const double p = metrics::psnr_from_mse(m);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("bpp") {
  CHECK(metrics::bpp(24576, 768, 512) == 0.5);
  codec::Container header_only;
  header_only.streams.resize(3);
  CHECK(metrics::bpp(header_only.total_bytes(), 64, 64) > 0);
  CHECK(metrics::bpp(header_only.total_bytes(), 64, 64) == 8.0 * (27 + 12) / 4096);
  CHECK_THROWS_AS(metrics::bpp(10, 0, 4), std::invalid_argument);
}

TEST_CASE("bd_rate on synthetic curves") {
  const auto a = smooth_curve();
  CHECK(metrics::bd_rate(a, a) == 0.0);
  CHECK(std::abs(metrics::bd_rate(a, scaled(a, 2)) - 100) < 1e-6);
  CHECK(std::abs(metrics::bd_rate(a, scaled(a, 0.5)) + 50) < 1e-6);
  CHECK(std::abs(metrics::bd_rate(a, scaled(a, 1.1)) - 10) < 1e-6);

  SUBCASE("scaled antisymmetry under swap") {
    // A second curve whose gap to the first is not a constant factor.
    auto b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b[i].bpp *= 1.05 + 0.04 * double(i);
    const double ab = metrics::bd_rate(a, b), ba = metrics::bd_rate(b, a);
    CHECK(ab > 0);
    CHECK(ab == doctest::Approx((1 / (1 + ba / 100) - 1) * 100).epsilon(1e-3));
  }

  SUBCASE("infinite PSNR points are ignored") {
    auto with_inf = a;
    RdPoint p;
    p.bpp = 5;
    p.psnr = std::numeric_limits<double>::infinity();
    with_inf.push_back(p);
    CHECK(metrics::bd_rate(with_inf, scaled(a, 2)) == doctest::Approx(metrics::bd_rate(a, scaled(a, 2))));
  }

  SUBCASE("errors") {
    const std::vector<RdPoint> three(a.begin(), a.begin() + 3);
    CHECK_THROWS_AS(metrics::bd_rate(three, a), std::invalid_argument);
    CHECK_THROWS_AS(metrics::bd_rate(a, three), std::invalid_argument);
    auto shifted = a;
    for (auto& p : shifted) p.psnr += 100;
    CHECK_THROWS_AS(metrics::bd_rate(a, shifted), std::invalid_argument);
  }
}

TEST_CASE("csv round trip and curve extraction") {
  const auto dir = temp_dir("csv");
  std::vector<RdPoint> rows{{"img0", 16, 0.25, 28.5}, {"img1", 16, 0.5, 30.25}, {metrics::kMeanRowId, 16, 0.375, 29.375}};
  metrics::write_csv(dir / "a.csv", rows);
  std::ifstream f(dir / "a.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "image_id,lambda,bpp,psnr");
  const auto back = metrics::read_csv(dir / "a.csv");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].image_id == rows[i].image_id);
    CHECK(back[i].lambda == rows[i].lambda);
    CHECK(back[i].bpp == rows[i].bpp);
    CHECK(back[i].psnr == rows[i].psnr);
  }
  const auto curve = metrics::curve_from_csv(dir / "a.csv");
  REQUIRE(curve.size() == 1);
  CHECK(curve[0].bpp == 0.375);

  std::ofstream(dir / "bad.csv") << "image_id,lambda,bpp,psnr\nx,1,2\n";
  CHECK_THROWS(metrics::read_csv(dir / "bad.csv"));
  std::ofstream(dir / "bad2.csv") << "id,l,b,p\n";
  CHECK_THROWS(metrics::read_csv(dir / "bad2.csv"));
  CHECK_THROWS(metrics::read_csv(dir / "missing.csv"));
  std::vector<RdPoint> bad_id{{"a,b", 1, 1, 1}};
  std::ostringstream os;
  CHECK_THROWS_AS(metrics::write_csv(os, bad_id), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

TEST_CASE("rd_sweep rows, means and determinism") {
  model::QarvModel<float> m(model::preset("qarv-tiny"), 401);
  test::perturb_all(m.params(), 402, 0.05);
  const auto images = image::synthetic_textures(3, 32, 7);
  const std::vector<double> lambdas{16, 2048};

  const auto s = metrics::rd_sweep(m, images, lambdas, 1);
  REQUIRE(s.rows.size() == 2 * images.size() + 2);
  for (std::size_t l = 0; l < lambdas.size(); ++l) {
    double bpp = 0, psnr = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& r = s.rows[l * (images.size() + 1) + i];
      CHECK(r.image_id == images[i].id);
      CHECK(r.lambda == lambdas[l]);
      const auto single = metrics::evaluate(m, images[i], lambdas[l]);
      CHECK(r.bpp == single.bpp);
      CHECK(r.psnr == single.psnr);
      // The header alone costs this much.
      CHECK(r.bpp >= 8.0 * double(codec::kFixedHeaderBytes + 4 * m.num_latents()) / (32.0 * 32.0));
      bpp += r.bpp;
      psnr += r.psnr;
    }
    const auto& mean = s.rows[l * (images.size() + 1) + images.size()];
    CHECK(mean.image_id == metrics::kMeanRowId);
    CHECK(std::abs(mean.bpp - bpp / double(images.size())) < 1e-9);
    CHECK(std::abs(mean.psnr - psnr / double(images.size())) < 1e-9);
  }
  CHECK(s.means().size() == 2);

  const auto threaded = metrics::rd_sweep(m, images, lambdas, 3);
  std::ostringstream a, b;
  metrics::write_csv(a, s.rows);
  metrics::write_csv(b, threaded.rows);
  CHECK(a.str() == b.str());

  const std::vector<double> one{64};
  CHECK(metrics::rd_sweep(m, images, one, 2).means().size() == 1);
  const std::vector<double> bad{1e9};
  CHECK_THROWS_AS(metrics::rd_sweep(m, images, bad, 2), std::invalid_argument);
}

TEST_CASE("worker thread count honours QARV_THREADS") {
  ::setenv("QARV_THREADS", "3", 1);
  CHECK(metrics::worker_threads() == 3);
  ::setenv("QARV_THREADS", "zero", 1);
  CHECK(metrics::worker_threads() >= 1);
  ::unsetenv("QARV_THREADS");
  CHECK(metrics::worker_threads() >= 1);
}
