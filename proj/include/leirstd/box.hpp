#pragma once

#include <algorithm>
#include <cstddef>

namespace leirstd {

/// Axis-aligned box in pixel coordinates, corner form.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    static Box from_center(double cx, double cy, double w, double h) {
        return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    }

    double cx() const { return (x1 + x2) / 2; }
    double cy() const { return (y1 + y2) / 2; }
    double w() const { return x2 - x1; }
    double h() const { return y2 - y1; }
    double area() const { return std::max(0.0, w()) * std::max(0.0, h()); }
    bool valid() const { return x2 >= x1 && y2 >= y1; }
    bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }

    Box shifted(double dx, double dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }
    Box scaled(double s) const { return {x1 * s, y1 * s, x2 * s, y2 * s}; }
};

inline bool operator==(const Box& a, const Box& b) {
    return a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2;
}

/// Intersection over union; 0 when disjoint or when both boxes have zero area.
inline double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct Detection {
    std::size_t image = 0;
    std::size_t class_id = 0;
    double score = 0;
    Box box;
};

struct LabeledBox {
    std::size_t image = 0;
    std::size_t class_id = 0;
    Box box;
};

}  // namespace leirstd
