#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/events.hpp"
#include "deoe/geometry.hpp"
#include "deoe/infer.hpp"

namespace deoe {

// RGB8 image with binary PPM (P6) output.
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> rgb;  // 3 bytes per pixel, row-major

  static RasterImage black(int w, int h) {
    RasterImage img;
    img.width = w;
    img.height = h;
    img.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
    return img;
  }

  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || x >= width || y < 0 || y >= height) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }
};

inline void write_ppm(const std::string& path, const RasterImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline void draw_box_outline(RasterImage& img, const Box& box, unsigned char r,
                             unsigned char g, unsigned char b) {
  const int x0 = static_cast<int>(std::lround(box.x_min));
  const int y0 = static_cast<int>(std::lround(box.y_min));
  const int x1 = static_cast<int>(std::lround(box.x_max()));
  const int y1 = static_cast<int>(std::lround(box.y_max()));
  for (int x = x0; x <= x1; ++x) {
    img.set(x, y0, r, g, b);
    img.set(x, y1, r, g, b);
  }
  for (int y = y0; y <= y1; ++y) {
    img.set(x0, y, r, g, b);
    img.set(x1, y, r, g, b);
  }
}

// Event-count backdrop: positive polarity accumulates green, negative red,
// saturating. Detections are drawn cyan, GT boxes yellow.
inline RasterImage render_overlay(const EventStream& stream, std::int64_t t_a,
                                  std::int64_t t_b,
                                  const std::vector<Detection>& dets,
                                  const std::vector<Box>& gt = {}) {
  RasterImage img = RasterImage::black(stream.width, stream.height);
  for (const auto& e : window(stream, t_a, t_b)) {
    const std::size_t i =
        (static_cast<std::size_t>(e.y) * stream.width + e.x) * 3;
    const int channel = e.p ? 1 : 0;
    const int v = img.rgb[i + channel] + 64;
    img.rgb[i + channel] = static_cast<unsigned char>(std::min(v, 255));
  }
  for (const auto& b : gt) draw_box_outline(img, b, 255, 255, 0);
  for (const auto& d : dets) draw_box_outline(img, d.box, 0, 255, 255);
  return img;
}

}  // namespace deoe
