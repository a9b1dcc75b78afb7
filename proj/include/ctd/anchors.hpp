#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ctd/boxes.hpp"

namespace ctd::net {

/// Anchor layout shared by the detection head and the target assigner.
/// Base size at pyramid level i (1-based, strides 4/8/16/32) is
/// `base_factor * stride`; per cell there is one anchor per
/// (ratio, scale) pair, centered on the cell center.
struct AnchorConfig {
    std::vector<double> ratios{0.5, 1.0, 2.0};
    std::vector<double> scales{1.0, std::pow(2.0, 1.0 / 3.0), std::pow(2.0, 2.0 / 3.0)};
    double base_factor = 4.0;

    int anchors_per_cell() const {
        return static_cast<int>(ratios.size() * scales.size());
    }
};

inline int level_stride(int level_index) { return 4 << (level_index - 1); }

/// All anchors of one pyramid level in (row, column, anchor) order —
/// the same order in which head outputs are flattened.
std::vector<Box> generate_anchors(int level_index, int image_w, int image_h,
                                  const AnchorConfig& cfg);

/// (tx, ty, tw, th) regression target turning `anchor` into `target`.
std::array<double, 4> encode_box(const Box& anchor, const Box& target);

/// Inverse of encode_box, clipped to the image bounds.
Box decode_box(const Box& anchor, const std::array<double, 4>& delta, int image_w,
               int image_h);

}  // namespace ctd::net
