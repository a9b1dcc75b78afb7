#include "ctd/anchors.hpp"

#include <algorithm>

#include "ctd/error.hpp"

namespace ctd {

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<int>& order,
                     double iou_thresh) {
    std::vector<int> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (size_t i = 0; i < order.size(); ++i) {
        const int idx = order[i];
        if (suppressed[static_cast<size_t>(idx)]) continue;
        kept.push_back(idx);
        for (size_t j = i + 1; j < order.size(); ++j) {
            const int other = order[j];
            if (suppressed[static_cast<size_t>(other)]) continue;
            if (box_iou(boxes[static_cast<size_t>(idx)], boxes[static_cast<size_t>(other)]) >
                iou_thresh)
                suppressed[static_cast<size_t>(other)] = 1;
        }
    }
    return kept;
}

}  // namespace ctd

namespace ctd::net {

std::vector<Box> generate_anchors(int level_index, int image_w, int image_h,
                                  const AnchorConfig& cfg) {
    check(level_index >= 1 && level_index <= 4, Error::Kind::config,
          "pyramid level index must be in 1..4");
    const int stride = level_stride(level_index);
    check(image_w % stride == 0 && image_h % stride == 0, Error::Kind::shape,
          "image size must be divisible by the level stride");
    const int grid_w = image_w / stride, grid_h = image_h / stride;
    const double base = cfg.base_factor * stride;

    // per-cell templates, ratio-major
    std::vector<Box> templates;
    for (double r : cfg.ratios) {
        for (double s : cfg.scales) {
            const double size = base * s;
            const double w = size / std::sqrt(r);
            const double h = size * std::sqrt(r);
            templates.push_back({-w / 2, -h / 2, w, h});
        }
    }

    std::vector<Box> anchors;
    anchors.reserve(static_cast<size_t>(grid_w) * grid_h * templates.size());
    for (int gy = 0; gy < grid_h; ++gy) {
        const double cy = (gy + 0.5) * stride;
        for (int gx = 0; gx < grid_w; ++gx) {
            const double cx = (gx + 0.5) * stride;
            for (const Box& t : templates)
                anchors.push_back({cx + t.x, cy + t.y, t.w, t.h});
        }
    }
    return anchors;
}

std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
    return {(target.cx() - anchor.cx()) / anchor.w, (target.cy() - anchor.cy()) / anchor.h,
            std::log(target.w / anchor.w), std::log(target.h / anchor.h)};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& delta, int image_w,
               int image_h) {
    const double cx = anchor.cx() + delta[0] * anchor.w;
    const double cy = anchor.cy() + delta[1] * anchor.h;
    const double w = anchor.w * std::exp(delta[2]);
    const double h = anchor.h * std::exp(delta[3]);
    double x0 = std::clamp(cx - w / 2, 0.0, static_cast<double>(image_w));
    double y0 = std::clamp(cy - h / 2, 0.0, static_cast<double>(image_h));
    double x1 = std::clamp(cx + w / 2, 0.0, static_cast<double>(image_w));
    double y1 = std::clamp(cy + h / 2, 0.0, static_cast<double>(image_h));
    return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace ctd::net
