#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crashcast/config.hpp"
#include "crashcast/image.hpp"

namespace crashcast::plot {

namespace detail {

// 3x5 bitmap glyphs for axis tick labels (digits plus '.').
inline int glyph_rows(char c, int row) {
  static const int digits[10][5] = {
      {0b111, 0b101, 0b101, 0b101, 0b111}, {0b010, 0b110, 0b010, 0b010, 0b111},
      {0b111, 0b001, 0b111, 0b100, 0b111}, {0b111, 0b001, 0b111, 0b001, 0b111},
      {0b101, 0b101, 0b111, 0b001, 0b001}, {0b111, 0b100, 0b111, 0b001, 0b111},
      {0b111, 0b100, 0b111, 0b101, 0b111}, {0b111, 0b001, 0b010, 0b010, 0b010},
      {0b111, 0b101, 0b111, 0b101, 0b111}, {0b111, 0b101, 0b111, 0b001, 0b111}};
  if (c >= '0' && c <= '9') return digits[c - '0'][row];
  if (c == '.') return row == 4 ? 0b010 : 0b000;
  return 0;
}

inline void draw_text(Image& img, int x, int y, const std::string& text) {
  for (std::size_t i = 0; i < text.size(); ++i)
    for (int r = 0; r < 5; ++r) {
      const int bits = glyph_rows(text[i], r);
      for (int cbit = 0; cbit < 3; ++cbit)
        if (bits & (1 << (2 - cbit)))
          img.set_pixel(x + static_cast<int>(i) * 4 + cbit, y + r, 30, 30, 30);
    }
}

inline std::string tick_label(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << v;
  return os.str();
}

}  // namespace detail

struct Series {
  std::vector<std::pair<double, double>> points;  // (x, y)
};

/// Renders one series into a fresh raster: light background, quarter grid,
/// tick labels, and the polyline.
inline Image render_xy(const Series& series, double x_min, double x_max, double y_min,
                       double y_max, int width = 640, int height = 480) {
  if (x_max <= x_min) x_max = x_min + 1.0;
  if (y_max <= y_min) y_max = y_min + 1.0;
  Image img(width, height, 250);
  const int ml = 48, mr = 16, mt = 16, mb = 32;  // margins
  const int px0 = ml, px1 = width - mr, py0 = height - mb, py1 = mt;
  auto to_px = [&](double x, double y) {
    const int px = px0 + static_cast<int>(std::lround((x - x_min) / (x_max - x_min) * (px1 - px0)));
    const int py = py0 - static_cast<int>(std::lround((y - y_min) / (y_max - y_min) * (py0 - py1)));
    return std::pair<int, int>{px, py};
  };
  for (int i = 0; i <= 4; ++i) {
    const double fx = x_min + (x_max - x_min) * i / 4.0;
    const double fy = y_min + (y_max - y_min) * i / 4.0;
    const auto [gx, gy0] = to_px(fx, y_min);
    const auto [gx1, gy] = to_px(x_max, fy);
    (void)gx1;
    img.draw_line(gx, py0, gx, py1, 210, 210, 210);
    img.draw_line(px0, gy, px1, gy, 210, 210, 210);
    detail::draw_text(img, gx - 7, py0 + 6, detail::tick_label(fx));
    detail::draw_text(img, px0 - 44, gy - 2, detail::tick_label(fy));
  }
  img.draw_line(px0, py0, px1, py0, 40, 40, 40);
  img.draw_line(px0, py0, px0, py1, 40, 40, 40);
  bool have_prev = false;
  std::pair<int, int> prev{0, 0};
  for (const auto& [x, y] : series.points) {
    if (!std::isfinite(x) || !std::isfinite(y)) {
      have_prev = false;
      continue;
    }
    const auto p = to_px(std::clamp(x, x_min, x_max), std::clamp(y, y_min, y_max));
    if (have_prev) img.draw_line(prev.first, prev.second, p.first, p.second, 40, 90, 200);
    img.set_pixel(p.first, p.second, 200, 60, 40);
    prev = p;
    have_prev = true;
  }
  return img;
}

struct CurveData {
  std::vector<double> theta, recall, precision, mean_toa;  // mean_toa may hold NaN
};

/// Reads the evaluation module's delimited curve export.
inline CurveData load_curve_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open curve file " + file.string());
  CurveData data;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = config::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ss(t);
    double th, r, p;
    std::string toa_tok;
    if (!(ss >> th >> r >> p >> toa_tok))
      throw std::runtime_error("malformed curve line in " + file.string() + ": " + t);
    data.theta.push_back(th);
    data.recall.push_back(r);
    data.precision.push_back(p);
    data.mean_toa.push_back(toa_tok == "nan" ? std::nan("") : std::stod(toa_tok));
  }
  if (data.theta.empty()) throw std::runtime_error("curve file has no data rows: " + file.string());
  return data;
}

/// Renders precision-recall and ToA-vs-recall images from a curve file.
inline void plot_curves(const std::filesystem::path& curve_file,
                        const std::filesystem::path& pr_out,
                        const std::filesystem::path& toa_out) {
  const CurveData data = load_curve_file(curve_file);
  Series pr;
  for (std::size_t i = 0; i < data.recall.size(); ++i)
    pr.points.emplace_back(data.recall[i], data.precision[i]);
  std::sort(pr.points.begin(), pr.points.end());
  render_xy(pr, 0.0, 1.0, 0.0, 1.0).save_ppm(pr_out);

  Series toa;
  double toa_max = 0.0;
  for (std::size_t i = 0; i < data.recall.size(); ++i) {
    toa.points.emplace_back(data.recall[i], data.mean_toa[i]);
    if (std::isfinite(data.mean_toa[i])) toa_max = std::max(toa_max, data.mean_toa[i]);
  }
  std::sort(toa.points.begin(), toa.points.end());
  render_xy(toa, 0.0, 1.0, 0.0, toa_max > 0.0 ? toa_max * 1.1 : 1.0).save_ppm(toa_out);
}

}  // namespace crashcast::plot
