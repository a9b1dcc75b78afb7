#include "ctd/heads.hpp"

#include <cmath>

#include "ctd/error.hpp"

namespace ctd::net {

// ---- DetectionHead -----------------------------------------------------------

void DetectionHead::init(nn::ParamRegistry& reg, int channels, int anchors_per_cell,
                         int tower_depth, double prior_prob, Rng& rng) {
    anchors_per_cell_ = anchors_per_cell;
    cls_tower_.resize(static_cast<size_t>(tower_depth));
    box_tower_.resize(static_cast<size_t>(tower_depth));
    for (int i = 0; i < tower_depth; ++i) {
        cls_tower_[static_cast<size_t>(i)].init(reg, "det.cls_tower" + std::to_string(i + 1),
                                                channels, channels, 3, 1, 1, true,
                                                nn::Init::kaiming, rng);
        box_tower_[static_cast<size_t>(i)].init(reg, "det.box_tower" + std::to_string(i + 1),
                                                channels, channels, 3, 1, 1, true,
                                                nn::Init::kaiming, rng);
    }
    cls_pred_.init(reg, "det.cls_pred", channels, anchors_per_cell * 2, 3, 1, 1, true,
                   nn::Init::normal_001, rng);
    box_pred_.init(reg, "det.box_pred", channels, anchors_per_cell * 4, 3, 1, 1, true,
                   nn::Init::normal_001, rng);
    // prior-probability bias keeps initial foreground scores near prior_prob
    const double bias = -std::log((1.0 - prior_prob) / prior_prob);
    cls_pred_.b.value.fill(bias);
}

DetectionHead::Output DetectionHead::forward(const Tensor& level, LevelCache* cache) const {
    if (cache) {
        cache->cls_tower.resize(cls_tower_.size());
        cache->box_tower.resize(box_tower_.size());
        cache->cls_relu.resize(cls_tower_.size());
        cache->box_relu.resize(box_tower_.size());
    }
    Tensor t = level;
    for (size_t i = 0; i < cls_tower_.size(); ++i) {
        t = cls_tower_[i].forward(t, cache ? &cache->cls_tower[i] : nullptr);
        t = nn::relu(t);
        if (cache) cache->cls_relu[i] = t;
    }
    Tensor cls = cls_pred_.forward(t, cache ? &cache->cls_pred : nullptr);

    t = level;
    for (size_t i = 0; i < box_tower_.size(); ++i) {
        t = box_tower_[i].forward(t, cache ? &cache->box_tower[i] : nullptr);
        t = nn::relu(t);
        if (cache) cache->box_relu[i] = t;
    }
    Tensor box = box_pred_.forward(t, cache ? &cache->box_pred : nullptr);
    return {std::move(cls), std::move(box)};
}

Tensor DetectionHead::backward(const Tensor& dcls, const Tensor& dbox,
                               const LevelCache& cache, nn::Grads& grads) const {
    Tensor d = cls_pred_.backward(dcls, cache.cls_pred, grads);
    for (int i = static_cast<int>(cls_tower_.size()) - 1; i >= 0; --i) {
        d = nn::relu_backward(d, cache.cls_relu[static_cast<size_t>(i)]);
        d = cls_tower_[static_cast<size_t>(i)].backward(
            d, cache.cls_tower[static_cast<size_t>(i)], grads);
    }
    Tensor dlevel = std::move(d);

    d = box_pred_.backward(dbox, cache.box_pred, grads);
    for (int i = static_cast<int>(box_tower_.size()) - 1; i >= 0; --i) {
        d = nn::relu_backward(d, cache.box_relu[static_cast<size_t>(i)]);
        d = box_tower_[static_cast<size_t>(i)].backward(
            d, cache.box_tower[static_cast<size_t>(i)], grads);
    }
    dlevel.add_scaled(d);
    return dlevel;
}

// ---- ClassificationHead --------------------------------------------------------

void ClassificationHead::init(nn::ParamRegistry& reg, int in_channels,
                              const ClsHeadConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    check(cfg.pools <= cfg.convs, Error::Kind::config,
          "classification head cannot pool more often than it convolves");
    convs_.resize(static_cast<size_t>(cfg.convs));
    for (int i = 0; i < cfg.convs; ++i)
        convs_[static_cast<size_t>(i)].init(reg, "cls.conv" + std::to_string(i + 1),
                                            i == 0 ? in_channels : cfg.channels,
                                            cfg.channels, 3, 1, 1, true,
                                            nn::Init::kaiming, rng);
    fc_.init(reg, "cls.fc", cfg.channels, 3, nn::Init::kaiming, rng);
}

Tensor ClassificationHead::forward(const Tensor& top_level, Cache* cache) const {
    const int min_side = std::min(top_level.dim(1), top_level.dim(2));
    check(min_side >= (1 << cfg_.pools), Error::Kind::shape,
          "top-level map " + top_level.shape_str() + " too small for " +
              std::to_string(cfg_.pools) + " pooling steps");
    if (cache) {
        cache->convs.resize(convs_.size());
        cache->relus.resize(convs_.size());
        cache->pools.resize(static_cast<size_t>(cfg_.pools));
    }
    Tensor t = top_level;
    for (size_t i = 0; i < convs_.size(); ++i) {
        t = convs_[i].forward(t, cache ? &cache->convs[i] : nullptr);
        t = nn::relu(t);
        if (cache) cache->relus[i] = t;
        if (static_cast<int>(i) < cfg_.pools)
            t = pool_.forward(t, cache ? &cache->pools[i] : nullptr);
    }
    if (cache) cache->pre_gap_shape = t.shape();
    Tensor pooled = nn::global_avg_pool(t);
    return fc_.forward(pooled, cache ? &cache->fc : nullptr);
}

void ClassificationHead::backward(const Tensor& dlogits, const Cache& cache,
                                  nn::Grads& grads) const {
    Tensor d = fc_.backward(dlogits, cache.fc, grads);
    d = nn::global_avg_pool_backward(d, cache.pre_gap_shape[1], cache.pre_gap_shape[2]);
    for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
        if (i < cfg_.pools) d = pool_.backward(d, cache.pools[static_cast<size_t>(i)]);
        d = nn::relu_backward(d, cache.relus[static_cast<size_t>(i)]);
        // the trunk is frozen whenever this head trains, so stop at conv1
        d = convs_[static_cast<size_t>(i)].backward(d, cache.convs[static_cast<size_t>(i)],
                                                    grads, /*need_dx=*/i > 0);
    }
}

}  // namespace ctd::net
