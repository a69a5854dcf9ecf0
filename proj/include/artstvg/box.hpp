#pragma once

#include <array>

namespace artstvg {

/// Axis-aligned box in normalized image coordinates, center format.
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 0.0;
  double h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  std::array<double, 4> as_array() const { return {cx, cy, w, h}; }
  static Box from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
  static Box from_corners(double x1, double y1, double x2, double y2) {
    return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Inclusive frame-index interval [start, end].
struct Segment {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }
  bool contains(int frame) const { return frame >= start && frame <= end; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

}  // namespace artstvg
