#ifndef JOINTAD_PLOT_HPP
#define JOINTAD_PLOT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace jointad::plot {

// Minimal 24-bit BMP canvas for loss-curve plots.
class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3, 255) {}

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    std::size_t i = (static_cast<std::size_t>(y) * w_ + x) * 3;
    px_[i] = b;
    px_[i + 1] = g;
    px_[i + 2] = r;
  }

  void line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, r, g, b);
      if (x0 == x1 && y0 == y1) break;
      int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void save_bmp(const std::string& path) const {
    int row = ((w_ * 3 + 3) / 4) * 4;
    std::uint32_t data = static_cast<std::uint32_t>(row) * static_cast<std::uint32_t>(h_);
    std::uint32_t fsize = 54 + data;
    std::string b;
    auto u16 = [&b](std::uint16_t x) {
      b.push_back(static_cast<char>(x & 0xff));
      b.push_back(static_cast<char>(x >> 8));
    };
    auto u32 = [&b](std::uint32_t x) {
      for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
    };
    b += "BM";
    u32(fsize);
    u32(0);
    u32(54);
    u32(40);
    u32(static_cast<std::uint32_t>(w_));
    u32(static_cast<std::uint32_t>(h_));
    u16(1);
    u16(24);
    u32(0);
    u32(data);
    u32(2835);
    u32(2835);
    u32(0);
    u32(0);
    std::string pad(static_cast<std::size_t>(row - w_ * 3), '\0');
    for (int y = h_ - 1; y >= 0; --y) {  // BMP rows bottom-up
      b.append(reinterpret_cast<const char*>(px_.data() + static_cast<std::size_t>(y) * w_ * 3),
               static_cast<std::size_t>(w_) * 3);
      b += pad;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("plot: cannot open " + path);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!out) throw std::runtime_error("plot: short write to " + path);
  }

  int width() const { return w_; }
  int height() const { return h_; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

struct Series {
  std::string name;
  std::vector<double> values;
  std::uint8_t r = 0, g = 0, b = 0;
};

// Plots the series over a shared x (index) axis with a light grid.
inline void save_curves(const std::vector<Series>& series, const std::string& path, int w = 640,
                        int h = 400) {
  Canvas cv(w, h);
  const int ml = 40, mr = 10, mt = 10, mb = 25;
  double lo = 0.0, hi = 1e-9;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) hi = std::max(hi, v);
  }
  hi *= 1.05;
  for (int i = 0; i <= 4; ++i) {
    int y = mt + i * (h - mt - mb) / 4;
    cv.line(ml, y, w - mr, y, 220, 220, 220);
  }
  cv.line(ml, mt, ml, h - mb, 0, 0, 0);
  cv.line(ml, h - mb, w - mr, h - mb, 0, 0, 0);
  if (n < 2) n = 2;
  for (const auto& s : series) {
    int px = -1, py = -1;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      double v = s.values[i];
      if (!std::isfinite(v)) continue;
      int x = ml + static_cast<int>((w - ml - mr) * (static_cast<double>(i) / (n - 1)));
      int y = h - mb - static_cast<int>((h - mt - mb) * ((v - lo) / (hi - lo)));
      if (px >= 0) cv.line(px, py, x, y, s.r, s.g, s.b);
      px = x;
      py = y;
    }
  }
  cv.save_bmp(path);
}

}  // namespace jointad::plot

#endif  // JOINTAD_PLOT_HPP
