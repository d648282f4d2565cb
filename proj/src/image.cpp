#include "qarv/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "qarv/params.hpp"

namespace qarv::image {

namespace {

class PnmReader {
 public:
  PnmReader(std::span<const std::uint8_t> bytes, const std::string& label) : bytes_(bytes), label_(label) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(label_ + ": " + what);
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = char(bytes_[pos_]);
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number() {
    skip_space_and_comments();
    std::size_t v = 0, digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + std::size_t(bytes_[pos_++] - '0');
      if (++digits > 9) fail("header number too large");
    }
    if (digits == 0) fail("malformed header");
    return v;
  }

  std::string magic() {
    if (bytes_.size() < 2) fail("file too short");
    pos_ = 2;
    return std::string(bytes_.begin(), bytes_.begin() + 2);
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::span<const std::uint8_t> raster(std::size_t n) {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("malformed header");
    ++pos_;
    if (bytes_.size() - pos_ < n) fail("truncated pixel data");
    return bytes_.subspan(pos_, n);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string label_;
  std::size_t pos_ = 0;
};

std::uint8_t to_byte(float v) {
  return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image make_image(std::size_t width, std::size_t height) {
  Image img;
  img.width = width;
  img.height = height;
  img.data.assign(3 * width * height, 0.0f);
  return img;
}

Image decode_pnm(std::span<const std::uint8_t> bytes, const std::string& label) {
  PnmReader r(bytes, label);
  const std::string magic = r.magic();
  if (magic != "P6" && magic != "P5") r.fail("unsupported format '" + magic + "' (expected binary P6 or P5)");
  const std::size_t w = r.number(), h = r.number(), maxval = r.number();
  if (w == 0 || h == 0) r.fail("zero image size");
  if (maxval != 255) r.fail("maxval must be 255, got " + std::to_string(maxval));
  const bool rgb = magic == "P6";
  auto px = r.raster(w * h * (rgb ? 3 : 1));
  Image img = make_image(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = rgb ? (y * w + x) * 3 + c : y * w + x;
        img.at(c, y, x) = float(px[src]) / 255.0f;
      }
  return img;
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes, path.string());
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write image " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

Image quantize_8bit(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = float(to_byte(v)) / 255.0f;
  return out;
}

template <typename T>
nn::Tensor<T> to_tensor(const Image& img) {
  nn::Tensor<T> t(nn::Shape{1, 3, img.height, img.width});
  std::copy(img.data.begin(), img.data.end(), t.mutable_values().begin());
  return t;
}

template <typename T>
Image from_tensor(const nn::Tensor<T>& t, std::size_t index) {
  if (t.rank() != 4 || t.dim(1) != 3 || index >= t.dim(0))
    throw std::invalid_argument("from_tensor: expected (N, 3, H, W), got " + nn::shape_str(t.shape()));
  Image img = make_image(t.dim(3), t.dim(2));
  const std::size_t n = img.data.size();
  for (std::size_t i = 0; i < n; ++i) img.data[i] = float(t.values()[index * n + i]);
  return img;
}

std::vector<NamedImage> load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".ppm" || ext == ".pgm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ppm or .pgm images in " + dir.string());
  std::vector<NamedImage> out;
  for (const auto& f : files) out.push_back({f.stem().string(), read_pnm(f)});
  return out;
}

std::vector<NamedImage> synthetic_textures(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<NamedImage> out;
  out.reserve(count);
  nn::InitRng rng(seed);
  const double two_pi = 2 * std::numbers::pi;
  for (std::size_t n = 0; n < count; ++n) {
    Image img = make_image(size, size);
    double base[3], ramp[3][2];
    for (int c = 0; c < 3; ++c) {
      base[c] = 0.2 + 0.6 * rng.uniform();
      ramp[c][0] = (rng.uniform() - 0.5) * 0.6;
      ramp[c][1] = (rng.uniform() - 0.5) * 0.6;
    }
    struct Grating {
      double fx, fy, phase, amp[3];
    };
    std::vector<Grating> gratings(1 + std::size_t(rng.uniform() * 3));
    for (auto& g : gratings) {
      const double angle = rng.uniform() * std::numbers::pi;
      const double freq = (1.0 + rng.uniform() * 5.0) / double(size);
      g.fx = freq * std::cos(angle);
      g.fy = freq * std::sin(angle);
      g.phase = rng.uniform() * two_pi;
      for (double& a : g.amp) a = (rng.uniform() - 0.5) * 0.35;
    }
    struct Blob {
      double cx, cy, r, amp[3];
    };
    std::vector<Blob> blobs(std::size_t(rng.uniform() * 4));
    for (auto& b : blobs) {
      b.cx = rng.uniform() * double(size);
      b.cy = rng.uniform() * double(size);
      b.r = double(size) * (0.08 + 0.25 * rng.uniform());
      for (double& a : b.amp) a = (rng.uniform() - 0.5) * 0.8;
    }
    const double grain = 0.02 * rng.uniform();
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = double(x) / double(size) - 0.5, v = double(y) / double(size) - 0.5;
        double px[3];
        for (int c = 0; c < 3; ++c) px[c] = base[c] + ramp[c][0] * u + ramp[c][1] * v;
        for (const auto& g : gratings) {
          const double s = std::sin(two_pi * (g.fx * double(x) + g.fy * double(y)) + g.phase);
          for (int c = 0; c < 3; ++c) px[c] += g.amp[c] * s;
        }
        for (const auto& b : blobs) {
          const double dx = double(x) - b.cx, dy = double(y) - b.cy;
          const double w = std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
          for (int c = 0; c < 3; ++c) px[c] += b.amp[c] * w;
        }
        for (int c = 0; c < 3; ++c) {
          const double noisy = px[c] + grain * (rng.uniform() - 0.5) * 2;
          // Stored on the 8-bit grid so the set equals what a PPM would hold.
          img.at(std::size_t(c), y, x) = float(std::lround(std::clamp(noisy, 0.0, 1.0) * 255.0)) / 255.0f;
        }
      }
    char id[32];
    std::snprintf(id, sizeof id, "tex%05zu", n);
    out.push_back({id, std::move(img)});
  }
  return out;
}

template nn::Tensor<float> to_tensor(const Image&);
template nn::Tensor<double> to_tensor(const Image&);
template Image from_tensor(const nn::Tensor<float>&, std::size_t);
template Image from_tensor(const nn::Tensor<double>&, std::size_t);

}  // namespace qarv::image
