#pragma once

#include <algorithm>

namespace miaod {

/// Axis-aligned box in pixel coordinates, corners (x_min, y_min, x_max, y_max).
struct Box {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }

    bool operator==(const Box&) const = default;
};

inline double compute_iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (ix <= 0.0 || iy <= 0.0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

}  // namespace miaod
