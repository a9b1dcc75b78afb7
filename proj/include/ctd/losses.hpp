#pragma once

#include <cstdint>
#include <vector>

#include "ctd/tensor.hpp"

namespace ctd::train {

/// Per-anchor assignment state.
enum : int8_t { kNegative = 0, kPositive = 1, kIgnore = -1 };

/// Sigmoid focal loss over per-anchor two-class logits.
/// `logits` is [N,2]; positive anchors contribute a positive target on
/// their class slot and a negative target on the other; negative anchors
/// contribute negative targets on both; ignored anchors are skipped.
/// The sum is normalized by max(1, #positives). When `dlogits` is given
/// it receives the gradient of the normalized loss.
double focal_loss(const Tensor& logits, const std::vector<int8_t>& state,
                  const std::vector<int>& pos_class, double alpha, double gamma,
                  Tensor* dlogits);

/// Elementwise smooth-L1 with quadratic zone |d| < beta; returns the
/// loss value and writes d(loss)/d(diff) to `grad` when non-null.
double smooth_l1(double diff, double beta, double* grad);

/// Smooth-L1 box regression loss averaged over positive anchors (sum of
/// the four coordinate losses per anchor). `pred` and `target` are [P,4].
double box_regression_loss(const Tensor& pred, const Tensor& target, double beta,
                           Tensor* dpred);

/// 3-way softmax cross-entropy; writes softmax(logits) - onehot to
/// `dlogits` when non-null.
double cross_entropy3(const Tensor& logits, int label, Tensor* dlogits);

}  // namespace ctd::train
