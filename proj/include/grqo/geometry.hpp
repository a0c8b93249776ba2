#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace grqo {

// Normalized center-format box. Canonical representation everywhere; corner
// form is a derived view. Coordinates are dimensionless fractions of the
// image side. Treat instances as immutable once constructed.
struct Box {
  double cx, cy, w, h;

  Box(double cx_, double cy_, double w_, double h_)
      : cx(cx_), cy(cy_), w(w_), h(h_) {
    if (!(cx >= 0.0 && cx <= 1.0) || !(cy >= 0.0 && cy <= 1.0))
      throw std::invalid_argument("Box: center outside [0,1]: cx=" +
                                  std::to_string(cx_) + " cy=" + std::to_string(cy_));
    if (!(w > 1e-6) || !(h > 1e-6) || !(w <= 1.0) || !(h <= 1.0))
      throw std::invalid_argument("Box: degenerate or oversized extent: w=" +
                                  std::to_string(w_) + " h=" + std::to_string(h_));
  }
};

struct CornerBox {
  double x0, y0, x1, y1;
};

inline CornerBox to_corners(const Box& b) {
  return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

inline Box from_corners(const CornerBox& c) {
  return Box((c.x0 + c.x1) / 2.0, (c.y0 + c.y1) / 2.0, c.x1 - c.x0, c.y1 - c.y0);
}

inline double intersection_area(const CornerBox& a, const CornerBox& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const CornerBox ca = to_corners(a), cb = to_corners(b);
  const double inter = intersection_area(ca, cb);
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

// IoU minus the normalized dead area of the smallest enclosing rectangle.
inline double giou(const Box& a, const Box& b) {
  const CornerBox ca = to_corners(a), cb = to_corners(b);
  const double inter = intersection_area(ca, cb);
  const double uni = a.w * a.h + b.w * b.h - inter;
  const double hull_w = std::max(ca.x1, cb.x1) - std::min(ca.x0, cb.x0);
  const double hull_h = std::max(ca.y1, cb.y1) - std::min(ca.y0, cb.y0);
  const double hull = hull_w * hull_h;
  return inter / uni - (hull - uni) / hull;
}

// One annotated object: class index plus its tight box.
struct Instance {
  int class_id;
  Box box;
};

}  // namespace grqo
