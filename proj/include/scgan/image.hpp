#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scgan {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interleaved H x W x C real image. Pixel values are nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  float at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image&) const = default;
};

// Binary H x W mask (0 or 1 per pixel).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

// 8-bit quantization used for every on-disk image: round(v*255), clamped.
std::uint8_t to_byte(float v);
inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

// Snaps every value onto the k/255 grid so an image survives a PNG round trip
// unchanged.
void quantize_to_bytes(Image& image);

// PNG I/O. Grayscale PNGs load as 1 channel, RGB/RGBA as 3 (alpha dropped).
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);

// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace scgan
