#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace aggpose {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rgb = std::array<double, 3>;  // components in [0, 1]

/// 8-bit interleaved RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  bool empty() const { return pixels.empty(); }
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const { return &pixels[(static_cast<std::size_t>(y) * width + x) * 3]; }
};

Image read_png(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_png(const Image& image, const std::filesystem::path& path);

/// Floating-point canvas used for anti-aliased drawing before quantization.
class Canvas {
 public:
  Canvas(int width, int height, Rgb fill = {0.0, 0.0, 0.0});

  int width() const { return width_; }
  int height() const { return height_; }
  Rgb get(int x, int y) const;
  void set(int x, int y, Rgb c);
  void blend(int x, int y, Rgb c, double alpha);

  /// Capsule of the given radius between two points, coverage-weighted.
  void draw_segment(double x0, double y0, double x1, double y1, double radius, Rgb color);
  void draw_disc(double cx, double cy, double radius, Rgb color);

  Image to_image() const;
  static Canvas from_image(const Image& image);

 private:
  int width_;
  int height_;
  std::vector<double> data_;
};

}  // namespace aggpose
