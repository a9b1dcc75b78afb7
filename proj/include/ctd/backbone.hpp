#pragma once

#include <array>
#include <vector>

#include "ctd/nn.hpp"

namespace ctd::net {

/// Four-stage residual feature extractor emitting maps at strides
/// 4/8/16/32. Two presets: a small plain-residual network for desk-scale
/// experiments and a bottleneck layout structurally matching ResNet-50
/// (7x7 stem + max pool, stage widths 256/512/1024/2048, blocks 3/4/6/3)
/// so full-scale weights remain loadable.
struct BackboneConfig {
    int stem_channels = 16;
    std::array<int, 4> stage_channels{32, 64, 64, 64};
    std::array<int, 4> stage_blocks{1, 1, 1, 1};
    bool bottleneck = false;  // bottleneck blocks with per-channel affine norms
    bool deep_stem = false;   // 7x7 stride-2 stem followed by 3x3/2 max pool

    static BackboneConfig tiny() { return {}; }
    static BackboneConfig resnet50_compatible() {
        return {64, {256, 512, 1024, 2048}, {3, 4, 6, 3}, true, true};
    }
};

/// Per-channel scale and shift (the frozen-statistics form of batch
/// normalization used by detectors).
class AffineNorm {
public:
    void init(nn::ParamRegistry& reg, const std::string& name, int channels);

    struct Cache {
        Tensor input;
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache, nn::Grads& grads) const;

    nn::Param gamma, beta;
};

class ResidualBlock {
public:
    void init(nn::ParamRegistry& reg, const std::string& name, int in_ch, int out_ch,
              int stride, bool bottleneck, bool with_norm, Rng& rng);

    struct Cache {
        nn::Conv2d::Cache conv1, conv2, conv3, proj;
        AffineNorm::Cache norm1, norm2, norm3, norm_proj;
        Tensor relu1, relu2, out;
        Tensor input;
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache, nn::Grads& grads,
                    bool need_dx) const;

private:
    bool bottleneck_ = false, with_norm_ = false, has_proj_ = false;
    nn::Conv2d conv1_, conv2_, conv3_, proj_;
    AffineNorm norm1_, norm2_, norm3_, norm_proj_;
};

class Backbone {
public:
    void init(nn::ParamRegistry& reg, const BackboneConfig& cfg, Rng& rng);

    struct Cache {
        nn::Conv2d::Cache stem;
        AffineNorm::Cache stem_norm;
        Tensor stem_relu;
        nn::MaxPool2d::Cache stem_pool;
        std::array<std::vector<ResidualBlock::Cache>, 4> stages;
    };

    /// `x` is a [3,H,W] image; H and W must be multiples of 32.
    std::array<Tensor, 4> forward(const Tensor& x, Cache* cache) const;
    /// Backpropagates the per-stage gradients into the parameters
    /// (no input gradient — the image is the graph root).
    void backward(const std::array<Tensor, 4>& dstages, const Cache& cache,
                  nn::Grads& grads) const;

    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    nn::Conv2d stem_;
    AffineNorm stem_norm_;
    nn::MaxPool2d stem_pool_{3, 2, 1, /*ceil=*/false};
    std::array<std::vector<ResidualBlock>, 4> stages_;
};

/// Feature pyramid: 1x1 lateral projections, top-down nearest-neighbour
/// upsampling with elementwise addition, then a 3x3 smoothing
/// convolution per level.
class Fpn {
public:
    void init(nn::ParamRegistry& reg, const std::array<int, 4>& in_channels,
              int out_channels, Rng& rng);

    struct Cache {
        std::array<nn::Conv2d::Cache, 4> lateral, smooth;
    };

    std::array<Tensor, 4> forward(const std::array<Tensor, 4>& stages, Cache* cache) const;
    std::array<Tensor, 4> backward(const std::array<Tensor, 4>& dlevels, const Cache& cache,
                                   nn::Grads& grads) const;

    int out_channels() const { return out_channels_; }

private:
    int out_channels_ = 0;
    std::array<nn::Conv2d, 4> lateral_, smooth_;
};

}  // namespace ctd::net
