#pragma once

// 8-bit RGB images in binary PPM (P6) or PGM (P5, expanded to RGB), held as
// planar float32 in [0, 1], plus the seeded synthetic texture generator used
// as a stand-in training set.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qarv/tensor.hpp"

namespace qarv::image {

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<float> data;  // planar RGB, 3 * height * width

  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
};

Image make_image(std::size_t width, std::size_t height);

// Throws std::runtime_error naming the file on any format problem.
Image read_pnm(const std::filesystem::path& path);
Image decode_pnm(std::span<const std::uint8_t> bytes, const std::string& label = "<memory>");
// Writes P6 with values rounded to the nearest 8-bit level after clamping.
void write_ppm(const std::filesystem::path& path, const Image& img);
std::vector<std::uint8_t> encode_ppm(const Image& img);

// Clamp to [0, 1] and round to the 8-bit grid, as a written PPM would hold.
Image quantize_8bit(const Image& img);

// (1, 3, H, W) tensor and back.
template <typename T>
nn::Tensor<T> to_tensor(const Image& img);
template <typename T>
Image from_tensor(const nn::Tensor<T>& t, std::size_t index = 0);

struct NamedImage {
  std::string id;
  Image image;
};

// All *.ppm / *.pgm files of a directory, sorted by file name.
std::vector<NamedImage> load_directory(const std::filesystem::path& dir);

// Deterministic textures: oriented gratings, smooth colour ramps, soft
// blobs and a little grain, each image a random mixture.
std::vector<NamedImage> synthetic_textures(std::size_t count, std::size_t size, std::uint64_t seed);

}  // namespace qarv::image
