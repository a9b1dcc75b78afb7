#pragma once

#include <array>
#include <string>
#include <vector>

namespace ctd {

/// Axis-aligned box, top-left corner plus size, continuous pixel
/// coordinates (0-indexed).
struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double area() const { return w * h; }
    double cx() const { return x + w / 2; }
    double cy() const { return y + h / 2; }
};

/// Intersection-over-union of two boxes; 0 when disjoint. Inputs are
/// assumed non-degenerate (validated at the API boundary in eval::iou).
inline double box_iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct PredBox {
    Box box;
    int tb_class = 0;  // 0 = active, 1 = latent
    double score = 0;
};

/// One image's prediction: 3-way class probabilities over
/// {healthy, sick_non_tb, tb} plus scored boxes.
struct ImagePrediction {
    std::string image_id;
    std::array<double, 3> class_probs{};
    std::vector<PredBox> boxes;
};

/// Greedy non-maximum suppression. `order` must list candidate indices
/// in descending score (ties already broken deterministically by the
/// caller); returns kept indices in that order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<int>& order,
                     double iou_thresh);

}  // namespace ctd
