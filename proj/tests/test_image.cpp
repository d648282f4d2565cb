#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "qarv/image.hpp"

using namespace qarv;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("qarv_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("P6 decode maps bytes to [0, 1] and round-trips at 8 bits") {
  const auto img = image::decode_pnm(bytes_of(std::string("P6\n# comment\n2 1\n255\n") + std::string("\x00\x80\xff\x0a\x14\x1e", 6)));
  REQUIRE(img.width == 2);
  REQUIRE(img.height == 1);
  CHECK(img.at(0, 0, 0) == 0.0f);
  CHECK(img.at(1, 0, 0) == 128.0f / 255.0f);
  CHECK(img.at(2, 0, 0) == 1.0f);
  CHECK(img.at(0, 0, 1) == 10.0f / 255.0f);
  CHECK(img.at(2, 0, 1) == 30.0f / 255.0f);
  const auto encoded = image::encode_ppm(img);
  CHECK(image::decode_pnm(encoded).data == img.data);
  CHECK(image::encode_ppm(image::decode_pnm(encoded)) == encoded);
}

TEST_CASE("P5 is expanded to grey RGB") {
  const auto img = image::decode_pnm(bytes_of(std::string("P5 3 1 255\n") + std::string("\x00\x40\xff", 3)));
  REQUIRE(img.width == 3);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(img.at(c, 0, 0) == 0.0f);
    CHECK(img.at(c, 0, 1) == 64.0f / 255.0f);
    CHECK(img.at(c, 0, 2) == 1.0f);
  }
}

TEST_CASE("PNM format errors") {
  for (const std::string bad : {"P3\n1 1\n255\n0 0 0\n", "P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", "P6\n1 1\n255\n\x01",
                                "P6\n0 1\n255\n", "P6\n1\n", "", "GIF89a"}) {
    CHECK_THROWS_AS(image::decode_pnm(bytes_of(bad), "bad.ppm"), std::runtime_error);
  }
  try {
    image::decode_pnm(bytes_of("P3\n1 1\n255\n0 0 0\n"), "label.ppm");
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("label.ppm") != std::string::npos);
  }
  try {
    image::decode_pnm(bytes_of("P6\n1 1\n1023\n"), "deep.ppm");
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("maxval") != std::string::npos);
  }
  CHECK_THROWS_AS(image::read_pnm("/nonexistent/x.ppm"), std::runtime_error);
}

TEST_CASE("quantize_8bit clamps and rounds") {
  auto img = image::make_image(2, 1);
  img.data = {-0.5f, 0.5f, 1.5f, 0.1f, 0.002f, 0.999f};
  const auto q = image::quantize_8bit(img);
  CHECK(q.data[0] == 0.0f);
  CHECK(q.data[1] == 128.0f / 255.0f);
  CHECK(q.data[2] == 1.0f);
  CHECK(q.data[3] == 26.0f / 255.0f);
  CHECK(q.data[4] == 1.0f / 255.0f);
  CHECK(q.data[5] == 1.0f);
  CHECK(image::quantize_8bit(q).data == q.data);
}

TEST_CASE("tensor conversion") {
  auto img = image::make_image(3, 2);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i) / 17.0f;
  const auto t = image::to_tensor<float>(img);
  CHECK(t.shape() == nn::Shape{1, 3, 2, 3});
  CHECK(t[0 * 6 + 1 * 3 + 2] == img.at(0, 1, 2));
  CHECK(t[2 * 6 + 0 * 3 + 1] == img.at(2, 0, 1));
  CHECK(image::from_tensor(t).data == img.data);
  CHECK_THROWS_AS(image::from_tensor(t, 1), std::invalid_argument);
}

TEST_CASE("directory loading") {
  const auto dir = temp_dir("images");
  auto img = image::make_image(4, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = float(i % 256) / 255.0f;
  image::write_ppm(dir / "b.ppm", img);
  image::write_ppm(dir / "a.ppm", img);
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto all = image::load_directory(dir);
  REQUIRE(all.size() == 2);
  CHECK(all[0].id == "a");
  CHECK(all[1].id == "b");
  CHECK(all[0].image.data == img.data);
  CHECK_THROWS_AS(image::load_directory(dir / "missing"), std::runtime_error);
  try {
    image::load_directory("/nonexistent/dataset");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("/nonexistent/dataset") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic textures are seeded and on the 8-bit grid") {
  const auto a = image::synthetic_textures(6, 16, 3);
  const auto b = image::synthetic_textures(6, 16, 3);
  const auto c = image::synthetic_textures(6, 16, 4);
  REQUIRE(a.size() == 6);
  CHECK(a[0].id == "tex00000");
  CHECK(a[5].id == "tex00005");
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.width == 16);
    CHECK(a[i].image.height == 16);
    CHECK(a[i].image.data == b[i].image.data);
    differs |= a[i].image.data != c[i].image.data;
    CHECK(image::quantize_8bit(a[i].image).data == a[i].image.data);
    double mean = 0, var = 0;
    for (float v : a[i].image.data) mean += v;
    mean /= double(a[i].image.data.size());
    for (float v : a[i].image.data) var += (v - mean) * (v - mean);
    CHECK(var > 0);
  }
  CHECK(differs);
}
