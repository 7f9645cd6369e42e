#include "aggpose/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <png.h>

#include "aggpose/fileutil.hpp"

namespace aggpose {

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("image dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read image '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw ImageIoError("cannot decode image '" + path.string() + "': " + msg);
  }
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (image.empty()) throw ImageIoError("refusing to write an empty image to '" + path.string() + "'");
  atomic_write(path, [&](const std::filesystem::path& tmp) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, tmp.c_str(), 0, image.pixels.data(), 0, nullptr)) {
      throw ImageIoError("cannot write image '" + path.string() + "': " + img.message);
    }
  });
}

Canvas::Canvas(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("canvas dimensions must be positive");
  data_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill[0];
    data_[i + 1] = fill[1];
    data_[i + 2] = fill[2];
  }
}

Rgb Canvas::get(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  return {data_[i], data_[i + 1], data_[i + 2]};
}

void Canvas::set(int x, int y, Rgb c) {
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  data_[i] = c[0];
  data_[i + 1] = c[1];
  data_[i + 2] = c[2];
}

void Canvas::blend(int x, int y, Rgb c, double alpha) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_ || alpha <= 0.0) return;
  alpha = std::min(alpha, 1.0);
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  for (int ch = 0; ch < 3; ++ch) data_[i + ch] = (1.0 - alpha) * data_[i + ch] + alpha * c[ch];
}

void Canvas::draw_segment(double x0, double y0, double x1, double y1, double radius, Rgb color) {
  const int xa = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - radius - 1)));
  const int xb = std::min(width_ - 1, static_cast<int>(std::ceil(std::max(x0, x1) + radius + 1)));
  const int ya = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - radius - 1)));
  const int yb = std::min(height_ - 1, static_cast<int>(std::ceil(std::max(y0, y1) + radius + 1)));
  const double dx = x1 - x0;
  const double dy = y1 - y0;
  const double len2 = dx * dx + dy * dy;
  for (int y = ya; y <= yb; ++y) {
    for (int x = xa; x <= xb; ++x) {
      const double px = x + 0.5 - x0;
      const double py = y + 0.5 - y0;
      const double t = len2 > 0.0 ? std::clamp((px * dx + py * dy) / len2, 0.0, 1.0) : 0.0;
      const double ex = px - t * dx;
      const double ey = py - t * dy;
      const double dist = std::sqrt(ex * ex + ey * ey);
      blend(x, y, color, radius + 0.5 - dist);
    }
  }
}

void Canvas::draw_disc(double cx, double cy, double radius, Rgb color) {
  draw_segment(cx, cy, cx, cy, radius, color);
}

Image Canvas::to_image() const {
  Image out(width_, height_);
  for (std::size_t i = 0; i < data_.size(); ++i) {
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(data_[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

Canvas Canvas::from_image(const Image& image) {
  Canvas c(image.width, image.height);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) c.data_[i] = image.pixels[i] / 255.0;
  return c;
}

}  // namespace aggpose
