#pragma once

#include <array>

namespace tg {

/// Axis-aligned box in normalized [0,1] image coordinates, corner form.
struct Box {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
};

bool box_valid(const Box& b);
double box_area(const Box& b);

/// Intersection over union. Degenerate (zero-area) inputs score 0 with a
/// one-time warning on stderr rather than NaN.
double iou(const Box& a, const Box& b);

Box box_from_cxcywh(double cx, double cy, double w, double h);
std::array<double, 4> box_to_cxcywh(const Box& b);

}  // namespace tg
