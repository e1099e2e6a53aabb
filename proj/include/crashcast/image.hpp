#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace crashcast {

/// 8-bit RGB raster image, row-major, used for synthetic frames and plots.
/// Stored frames use binary PPM (P6), a lossless format readable everywhere.
class Image {
 public:
  Image() = default;
  Image(int width, int height, std::uint8_t fill = 0)
      : width_(width), height_(height),
        pixels_(static_cast<std::size_t>(width) * height * 3, fill) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("Image: non-positive size");
  }

  int width() const { return width_; }
  int height() const { return height_; }

  std::uint8_t& at(int x, int y, int c) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
  }

  void set_pixel(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    at(x, y, 0) = r;
    at(x, y, 1) = g;
    at(x, y, 2) = b;
  }

  /// Additive blend, saturating at 255. Overlapping bright shapes get
  /// brighter, which keeps collisions visually and photometrically distinct.
  void add_pixel(int x, int y, int r, int g, int b) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    for (int c = 0; c < 3; ++c) {
      const int v = static_cast<int>(at(x, y, c)) + (c == 0 ? r : c == 1 ? g : b);
      at(x, y, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
  }

  void fill_rect(double x1, double y1, double x2, double y2, std::uint8_t r, std::uint8_t g,
                 std::uint8_t b, bool additive = false) {
    const int ix1 = std::max(0, static_cast<int>(std::floor(x1)));
    const int iy1 = std::max(0, static_cast<int>(std::floor(y1)));
    const int ix2 = std::min(width_, static_cast<int>(std::ceil(x2)));
    const int iy2 = std::min(height_, static_cast<int>(std::ceil(y2)));
    for (int y = iy1; y < iy2; ++y)
      for (int x = ix1; x < ix2; ++x) {
        if (additive)
          add_pixel(x, y, r, g, b);
        else
          set_pixel(x, y, r, g, b);
      }
  }

  void draw_line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    // Bresenham.
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    int x = x0, y = y0;
    while (true) {
      set_pixel(x, y, r, g, b);
      if (x == x1 && y == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y += sy;
      }
    }
  }

  Image flipped_horizontal() const {
    Image out(width_, height_);
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = at(width_ - 1 - x, y, c);
    return out;
  }

  Image flipped_vertical() const {
    Image out(width_, height_);
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = at(x, height_ - 1 - y, c);
    return out;
  }

  /// Bilinear resize.
  Image resized(int new_width, int new_height) const {
    if (new_width <= 0 || new_height <= 0)
      throw std::invalid_argument("Image::resized: non-positive size");
    Image out(new_width, new_height);
    const double sx = static_cast<double>(width_) / new_width;
    const double sy = static_cast<double>(height_) / new_height;
    for (int y = 0; y < new_height; ++y) {
      const double fy = std::min((y + 0.5) * sy - 0.5, static_cast<double>(height_ - 1));
      const int y0 = std::max(0, static_cast<int>(std::floor(fy)));
      const int y1 = std::min(height_ - 1, y0 + 1);
      const double wy = std::max(0.0, fy - y0);
      for (int x = 0; x < new_width; ++x) {
        const double fx = std::min((x + 0.5) * sx - 0.5, static_cast<double>(width_ - 1));
        const int x0 = std::max(0, static_cast<int>(std::floor(fx)));
        const int x1 = std::min(width_ - 1, x0 + 1);
        const double wx = std::max(0.0, fx - x0);
        for (int c = 0; c < 3; ++c) {
          const double top = (1.0 - wx) * at(x0, y0, c) + wx * at(x1, y0, c);
          const double bot = (1.0 - wx) * at(x0, y1, c) + wx * at(x1, y1, c);
          out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1.0 - wy) * top + wy * bot));
        }
      }
    }
    return out;
  }

  void save_ppm(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("Image::save_ppm: cannot open " + path.string());
    out << "P6\n" << width_ << " " << height_ << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels_.data()),
              static_cast<std::streamsize>(pixels_.size()));
    if (!out) throw std::runtime_error("Image::save_ppm: write failed for " + path.string());
  }

  static Image load_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("Image::load_ppm: cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("Image::load_ppm: not a P6 file: " + path.string());
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255)
      throw std::runtime_error("Image::load_ppm: unsupported header in " + path.string());
    in.get();  // single whitespace after header
    Image img(w, h);
    in.read(reinterpret_cast<char*>(img.pixels_.data()),
            static_cast<std::streamsize>(img.pixels_.size()));
    if (!in) throw std::runtime_error("Image::load_ppm: truncated file " + path.string());
    return img;
  }

  const std::vector<std::uint8_t>& pixels() const { return pixels_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

}  // namespace crashcast
