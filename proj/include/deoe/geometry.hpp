#pragma once

#include <algorithm>

namespace deoe {

// Axis-aligned box, corner form. w,h > 0 for any valid box.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x_max() const { return x_min + w; }
  double y_max() const { return y_min + h; }
  double area() const { return w * h; }
  double cx() const { return x_min + 0.5 * w; }
  double cy() const { return y_min + 0.5 * h; }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - 0.5 * w, cy - 0.5 * h, w, h};
  }

  Box clipped(double width, double height) const {
    const double x0 = std::max(0.0, x_min);
    const double y0 = std::max(0.0, y_min);
    const double x1 = std::min(width, x_max());
    const double y1 = std::min(height, y_max());
    return Box{x0, y0, std::max(0.0, x1 - x0), std::max(0.0, y1 - y0)};
  }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw =
      std::min(a.x_max(), b.x_max()) - std::max(a.x_min, b.x_min);
  const double ih =
      std::min(a.y_max(), b.y_max()) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

}  // namespace deoe
