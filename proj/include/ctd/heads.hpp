#pragma once

#include <vector>

#include "ctd/nn.hpp"

namespace ctd::net {

/// Anchor-based detection head with two parallel towers (box
/// classification and location regression), shared across pyramid
/// levels. Per cell it emits anchors_per_cell*2 class logits and
/// anchors_per_cell*4 box deltas.
class DetectionHead {
public:
    void init(nn::ParamRegistry& reg, int channels, int anchors_per_cell, int tower_depth,
              double prior_prob, Rng& rng);

    struct LevelCache {
        std::vector<nn::Conv2d::Cache> cls_tower, box_tower;
        std::vector<Tensor> cls_relu, box_relu;
        nn::Conv2d::Cache cls_pred, box_pred;
    };

    struct Output {
        Tensor cls_logits;  // [A*2, H, W]
        Tensor box_deltas;  // [A*4, H, W]
    };

    Output forward(const Tensor& level, LevelCache* cache) const;
    Tensor backward(const Tensor& dcls, const Tensor& dbox, const LevelCache& cache,
                    nn::Grads& grads) const;

    int anchors_per_cell() const { return anchors_per_cell_; }

private:
    int anchors_per_cell_ = 9;
    std::vector<nn::Conv2d> cls_tower_, box_tower_;
    nn::Conv2d cls_pred_, box_pred_;
};

/// Image-level classifier fed with the top pyramid level: a stack of
/// 3x3 convolutions with ReLU (the leading `pools` of them followed by
/// 2x2 max pooling), global average pooling and a 3-way linear layer.
struct ClsHeadConfig {
    int channels = 512;
    int convs = 5;
    int pools = 3;
};

class ClassificationHead {
public:
    void init(nn::ParamRegistry& reg, int in_channels, const ClsHeadConfig& cfg, Rng& rng);

    struct Cache {
        std::vector<nn::Conv2d::Cache> convs;
        std::vector<Tensor> relus;
        std::vector<nn::MaxPool2d::Cache> pools;
        std::vector<int> pre_gap_shape;
        nn::Linear::Cache fc;
    };

    /// Requires min(H, W) >= 2^pools so every pooling halves cleanly.
    Tensor forward(const Tensor& top_level, Cache* cache) const;
    void backward(const Tensor& dlogits, const Cache& cache, nn::Grads& grads) const;

    const ClsHeadConfig& config() const { return cfg_; }

private:
    ClsHeadConfig cfg_;
    std::vector<nn::Conv2d> convs_;
    nn::MaxPool2d pool_{2, 2, 0, /*ceil=*/false};
    nn::Linear fc_;
};

}  // namespace ctd::net
