#include "ctd/backbone.hpp"

#include "ctd/error.hpp"

namespace ctd::net {

// ---- AffineNorm --------------------------------------------------------------

void AffineNorm::init(nn::ParamRegistry& reg, const std::string& name, int channels) {
    reg.add(gamma, name + ".gamma", Tensor::full({channels}, 1.0));
    reg.add(beta, name + ".beta", Tensor({channels}));
}

Tensor AffineNorm::forward(const Tensor& x, Cache* cache) const {
    const int c_in = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor y = x;
    for (int c = 0; c < c_in; ++c) {
        const double g = gamma.value[c], b = beta.value[c];
        double* row = y.data() + static_cast<size_t>(c) * n;
        for (int i = 0; i < n; ++i) row[i] = g * row[i] + b;
    }
    if (cache) cache->input = x;
    return y;
}

Tensor AffineNorm::backward(const Tensor& dy, const Cache& cache, nn::Grads& grads) const {
    const Tensor& x = cache.input;
    const int c_in = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor& dg = grads.of(gamma);
    Tensor& db = grads.of(beta);
    Tensor dx(x.shape());
    for (int c = 0; c < c_in; ++c) {
        const double g = gamma.value[c];
        const double* dyr = dy.data() + static_cast<size_t>(c) * n;
        const double* xr = x.data() + static_cast<size_t>(c) * n;
        double* dxr = dx.data() + static_cast<size_t>(c) * n;
        double sg = 0.0, sb = 0.0;
        for (int i = 0; i < n; ++i) {
            sg += dyr[i] * xr[i];
            sb += dyr[i];
            dxr[i] = g * dyr[i];
        }
        dg[c] += sg;
        db[c] += sb;
    }
    return dx;
}

// ---- ResidualBlock -----------------------------------------------------------

void ResidualBlock::init(nn::ParamRegistry& reg, const std::string& name, int in_ch,
                         int out_ch, int stride, bool bottleneck, bool with_norm,
                         Rng& rng) {
    bottleneck_ = bottleneck;
    with_norm_ = with_norm;
    has_proj_ = stride != 1 || in_ch != out_ch;
    const bool conv_bias = !with_norm;
    if (bottleneck) {
        const int mid = out_ch / 4;
        conv1_.init(reg, name + ".conv1", in_ch, mid, 1, 1, 0, conv_bias,
                    nn::Init::kaiming, rng);
        conv2_.init(reg, name + ".conv2", mid, mid, 3, stride, 1, conv_bias,
                    nn::Init::kaiming, rng);
        conv3_.init(reg, name + ".conv3", mid, out_ch, 1, 1, 0, conv_bias,
                    nn::Init::kaiming, rng);
        if (with_norm) {
            norm1_.init(reg, name + ".norm1", mid);
            norm2_.init(reg, name + ".norm2", mid);
            norm3_.init(reg, name + ".norm3", out_ch);
        }
    } else {
        conv1_.init(reg, name + ".conv1", in_ch, out_ch, 3, stride, 1, conv_bias,
                    nn::Init::kaiming, rng);
        conv2_.init(reg, name + ".conv2", out_ch, out_ch, 3, 1, 1, conv_bias,
                    nn::Init::kaiming, rng);
        if (with_norm) {
            norm1_.init(reg, name + ".norm1", out_ch);
            norm2_.init(reg, name + ".norm2", out_ch);
        }
    }
    if (has_proj_) {
        proj_.init(reg, name + ".proj", in_ch, out_ch, 1, stride, 0, conv_bias,
                   nn::Init::kaiming, rng);
        if (with_norm) norm_proj_.init(reg, name + ".norm_proj", out_ch);
    }
}

Tensor ResidualBlock::forward(const Tensor& x, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.input = x;

    Tensor t = conv1_.forward(x, cache ? &c.conv1 : nullptr);
    if (with_norm_) t = norm1_.forward(t, cache ? &c.norm1 : nullptr);
    c.relu1 = nn::relu(t);
    t = conv2_.forward(c.relu1, cache ? &c.conv2 : nullptr);
    if (with_norm_) t = norm2_.forward(t, cache ? &c.norm2 : nullptr);
    if (bottleneck_) {
        c.relu2 = nn::relu(t);
        t = conv3_.forward(c.relu2, cache ? &c.conv3 : nullptr);
        if (with_norm_) t = norm3_.forward(t, cache ? &c.norm3 : nullptr);
    }
    Tensor skip = x;
    if (has_proj_) {
        skip = proj_.forward(x, cache ? &c.proj : nullptr);
        if (with_norm_) skip = norm_proj_.forward(skip, cache ? &c.norm_proj : nullptr);
    }
    t.add_scaled(skip);
    Tensor out = nn::relu(t);
    if (cache) c.out = out;
    return out;
}

Tensor ResidualBlock::backward(const Tensor& dy, const Cache& cache, nn::Grads& grads,
                               bool need_dx) const {
    Tensor d_sum = nn::relu_backward(dy, cache.out);

    // skip branch
    Tensor dx;
    if (has_proj_) {
        Tensor d_skip = d_sum;
        if (with_norm_) d_skip = norm_proj_.backward(d_skip, cache.norm_proj, grads);
        dx = proj_.backward(d_skip, cache.proj, grads, need_dx);
    } else if (need_dx) {
        dx = d_sum;
    }

    // main branch
    Tensor t = d_sum;
    if (bottleneck_) {
        if (with_norm_) t = norm3_.backward(t, cache.norm3, grads);
        t = conv3_.backward(t, cache.conv3, grads);
        t = nn::relu_backward(t, cache.relu2);
    }
    if (with_norm_) t = norm2_.backward(t, cache.norm2, grads);
    t = conv2_.backward(t, cache.conv2, grads);
    t = nn::relu_backward(t, cache.relu1);
    if (with_norm_) t = norm1_.backward(t, cache.norm1, grads);
    t = conv1_.backward(t, cache.conv1, grads, need_dx);
    if (!need_dx) return {};
    dx.add_scaled(t);
    return dx;
}

// ---- Backbone ----------------------------------------------------------------

void Backbone::init(nn::ParamRegistry& reg, const BackboneConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    const bool with_norm = cfg.bottleneck;
    if (cfg.deep_stem) {
        stem_.init(reg, "backbone.stem", 3, cfg.stem_channels, 7, 2, 3, !with_norm,
                   nn::Init::kaiming, rng);
    } else {
        stem_.init(reg, "backbone.stem", 3, cfg.stem_channels, 3, 2, 1, !with_norm,
                   nn::Init::kaiming, rng);
    }
    if (with_norm) stem_norm_.init(reg, "backbone.stem_norm", cfg.stem_channels);

    int in_ch = cfg.stem_channels;
    for (int s = 0; s < 4; ++s) {
        const int out_ch = cfg.stage_channels[static_cast<size_t>(s)];
        const int blocks = cfg.stage_blocks[static_cast<size_t>(s)];
        // the deep stem already pools to stride 4, so its first stage keeps stride 1
        const int stage_stride = (s == 0 && cfg.deep_stem) ? 1 : 2;
        auto& stage = stages_[static_cast<size_t>(s)];
        stage.resize(static_cast<size_t>(blocks));
        for (int bi = 0; bi < blocks; ++bi) {
            const std::string name = "backbone.stage" + std::to_string(s + 1) + ".block" +
                                     std::to_string(bi + 1);
            stage[static_cast<size_t>(bi)].init(reg, name, bi == 0 ? in_ch : out_ch, out_ch,
                                                bi == 0 ? stage_stride : 1, cfg.bottleneck,
                                                with_norm, rng);
        }
        in_ch = out_ch;
    }
}

std::array<Tensor, 4> Backbone::forward(const Tensor& x, Cache* cache) const {
    check(x.ndim() == 3 && x.dim(0) == 3, Error::Kind::shape,
          "backbone expects a [3,H,W] input");
    check(x.dim(1) % 32 == 0 && x.dim(2) % 32 == 0, Error::Kind::shape,
          "input height/width must be multiples of 32, got " + x.shape_str());

    Tensor t = stem_.forward(x, cache ? &cache->stem : nullptr);
    if (cfg_.bottleneck) t = stem_norm_.forward(t, cache ? &cache->stem_norm : nullptr);
    t = nn::relu(t);
    if (cache) cache->stem_relu = t;
    if (cfg_.deep_stem) t = stem_pool_.forward(t, cache ? &cache->stem_pool : nullptr);

    std::array<Tensor, 4> out;
    for (int s = 0; s < 4; ++s) {
        const auto& stage = stages_[static_cast<size_t>(s)];
        std::vector<ResidualBlock::Cache>* sc = nullptr;
        if (cache) {
            cache->stages[static_cast<size_t>(s)].resize(stage.size());
            sc = &cache->stages[static_cast<size_t>(s)];
        }
        for (size_t bi = 0; bi < stage.size(); ++bi)
            t = stage[bi].forward(t, sc ? &(*sc)[bi] : nullptr);
        out[static_cast<size_t>(s)] = t;
    }
    return out;
}

void Backbone::backward(const std::array<Tensor, 4>& dstages, const Cache& cache,
                        nn::Grads& grads) const {
    Tensor d;  // gradient flowing down toward the stem
    for (int s = 3; s >= 0; --s) {
        if (d.numel() == 0)
            d = dstages[static_cast<size_t>(s)];
        else
            d.add_scaled(dstages[static_cast<size_t>(s)]);
        const auto& stage = stages_[static_cast<size_t>(s)];
        const auto& sc = cache.stages[static_cast<size_t>(s)];
        for (int bi = static_cast<int>(stage.size()) - 1; bi >= 0; --bi)
            d = stage[static_cast<size_t>(bi)].backward(d, sc[static_cast<size_t>(bi)],
                                                        grads, /*need_dx=*/true);
    }
    if (cfg_.deep_stem) d = stem_pool_.backward(d, cache.stem_pool);
    d = nn::relu_backward(d, cache.stem_relu);
    if (cfg_.bottleneck) d = stem_norm_.backward(d, cache.stem_norm, grads);
    stem_.backward(d, cache.stem, grads, /*need_dx=*/false);
}

// ---- Fpn ---------------------------------------------------------------------

void Fpn::init(nn::ParamRegistry& reg, const std::array<int, 4>& in_channels,
               int out_channels, Rng& rng) {
    out_channels_ = out_channels;
    for (int i = 0; i < 4; ++i) {
        lateral_[static_cast<size_t>(i)].init(reg, "fpn.lateral" + std::to_string(i + 1),
                                              in_channels[static_cast<size_t>(i)],
                                              out_channels, 1, 1, 0, true,
                                              nn::Init::kaiming, rng);
        smooth_[static_cast<size_t>(i)].init(reg, "fpn.smooth" + std::to_string(i + 1),
                                             out_channels, out_channels, 3, 1, 1, true,
                                             nn::Init::kaiming, rng);
    }
}

std::array<Tensor, 4> Fpn::forward(const std::array<Tensor, 4>& stages, Cache* cache) const {
    std::array<Tensor, 4> merged;
    for (int i = 3; i >= 0; --i) {
        merged[static_cast<size_t>(i)] = lateral_[static_cast<size_t>(i)].forward(
            stages[static_cast<size_t>(i)], cache ? &cache->lateral[static_cast<size_t>(i)] : nullptr);
        if (i < 3)
            merged[static_cast<size_t>(i)].add_scaled(
                nn::upsample2x(merged[static_cast<size_t>(i + 1)]));
    }
    std::array<Tensor, 4> out;
    for (int i = 0; i < 4; ++i)
        out[static_cast<size_t>(i)] = smooth_[static_cast<size_t>(i)].forward(
            merged[static_cast<size_t>(i)], cache ? &cache->smooth[static_cast<size_t>(i)] : nullptr);
    return out;
}

std::array<Tensor, 4> Fpn::backward(const std::array<Tensor, 4>& dlevels, const Cache& cache,
                                    nn::Grads& grads) const {
    std::array<Tensor, 4> dmerged;
    for (int i = 0; i < 4; ++i)
        dmerged[static_cast<size_t>(i)] = smooth_[static_cast<size_t>(i)].backward(
            dlevels[static_cast<size_t>(i)], cache.smooth[static_cast<size_t>(i)], grads);
    // top-down additions become bottom-up gradient flow
    for (int i = 0; i < 3; ++i)
        dmerged[static_cast<size_t>(i + 1)].add_scaled(
            nn::upsample2x_backward(dmerged[static_cast<size_t>(i)]));
    std::array<Tensor, 4> dstages;
    for (int i = 0; i < 4; ++i)
        dstages[static_cast<size_t>(i)] = lateral_[static_cast<size_t>(i)].backward(
            dmerged[static_cast<size_t>(i)], cache.lateral[static_cast<size_t>(i)], grads);
    return dstages;
}

}  // namespace ctd::net
