#include "treeground/box.hpp"

#include <algorithm>
#include <cstdio>

namespace tg {

bool box_valid(const Box& b) { return b.x_min < b.x_max && b.y_min < b.y_max; }

double box_area(const Box& b) {
    return std::max(0.0, b.x_max - b.x_min) * std::max(0.0, b.y_max - b.y_min);
}

double iou(const Box& a, const Box& b) {
    const double area_a = box_area(a);
    const double area_b = box_area(b);
    if (area_a <= 0.0 || area_b <= 0.0) {
        static bool warned = false;
        if (!warned) {
            std::fputs("warning: iou on a zero-area box, defined as 0\n", stderr);
            warned = true;
        }
        return 0.0;
    }
    const double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = ix * iy;
    return inter / (area_a + area_b - inter);
}

Box box_from_cxcywh(double cx, double cy, double w, double h) {
    return Box{cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

std::array<double, 4> box_to_cxcywh(const Box& b) {
    return {(b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0, b.x_max - b.x_min, b.y_max - b.y_min};
}

}  // namespace tg
