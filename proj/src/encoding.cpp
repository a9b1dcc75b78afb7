#include "ctd/encoding.hpp"

#include <cmath>

#include "ctd/error.hpp"

namespace ctd::enc {

Tensor sinusoidal_encoding(int height, int width, int channels) {
    check(channels % 4 == 0, Error::Kind::shape,
          "encoding channels must be divisible by 4, got " + std::to_string(channels));
    const int half = channels / 2;  // channels per axis
    Tensor p({channels, height, width});
    for (int j = 0; j < half / 2; ++j) {
        const double freq = std::pow(10000.0, -2.0 * j / half);
        for (int y = 0; y < height; ++y) {
            const double sy = std::sin(y * freq), cy = std::cos(y * freq);
            for (int x = 0; x < width; ++x) {
                p.at(2 * j, y, x) = sy;
                p.at(2 * j + 1, y, x) = cy;
                p.at(half + 2 * j, y, x) = std::sin(x * freq);
                p.at(half + 2 * j + 1, y, x) = std::cos(x * freq);
            }
        }
    }
    return p;
}

// ---- SpatialTransformer -----------------------------------------------------

namespace {
inline double norm_coord(int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; }
inline double denorm_coord(double u, int n) { return n > 1 ? (u + 1.0) * (n - 1) / 2.0 : 0.0; }
}  // namespace

void SpatialTransformer::init(nn::ParamRegistry& reg, const std::string& name,
                              int channels, Rng& rng) {
    check(channels % 8 == 0, Error::Kind::config,
          "transformer channels must be divisible by 8");
    channels_ = channels;
    const int c1 = channels / 4, c2 = channels / 8;
    conv1_.init(reg, name + ".conv1", channels, c1, 3, 1, 1, true, nn::Init::kaiming, rng);
    conv2_.init(reg, name + ".conv2", c1, c2, 3, 1, 1, true, nn::Init::kaiming, rng);
    fc1_.init(reg, name + ".fc1", c2 * 8 * 8, 32, nn::Init::kaiming, rng);
    fc2_.init(reg, name + ".fc2", 32, 6, nn::Init::zeros, rng);
    // identity warp at initialization
    fc2_.b.value[0] = 1.0;
    fc2_.b.value[4] = 1.0;
}

std::array<double, 6> SpatialTransformer::predict_affine(const Tensor& x,
                                                         Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    Tensor t = pool_.forward(x, &c.pool1);
    t = conv1_.forward(t, &c.conv1);
    c.relu1 = nn::relu(t);
    t = pool_.forward(c.relu1, &c.pool2);
    t = conv2_.forward(t, &c.conv2);
    c.relu2 = nn::relu(t);
    t = pool8_.forward(c.relu2, &c.pool8);
    c.pooled_shape = t.shape();
    t.reshape({static_cast<int>(t.numel())});
    t = fc1_.forward(t, &c.fc1);
    c.hidden = nn::relu(t);
    Tensor theta = fc2_.forward(c.hidden, &c.fc2);
    std::array<double, 6> affine;
    for (int i = 0; i < 6; ++i) affine[static_cast<size_t>(i)] = theta[i];
    if (cache) cache->affine = affine;
    return affine;
}

Tensor SpatialTransformer::resample(const Tensor& x, const std::array<double, 6>& a) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y(x.shape());
    std::vector<double> vec(static_cast<size_t>(c_in));
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int oy = 0; oy < h; ++oy) {
        const double yn = norm_coord(oy, h);
        for (int ox = 0; ox < w; ++ox) {
            const double xn = norm_coord(ox, w);
            const double xs = a[0] * xn + a[1] * yn + a[2];
            const double ys = a[3] * xn + a[4] * yn + a[5];
            nn::sample_bilinear(x.data(), c_in, h, w, denorm_coord(ys, h),
                                denorm_coord(xs, w), vec.data());
            for (int c = 0; c < c_in; ++c) y[(c * plane) + oy * static_cast<int64_t>(w) + ox] = vec[c];
        }
    }
    return y;
}

Tensor SpatialTransformer::forward(const Tensor& x, Cache* cache) const {
    check(x.dim(0) == channels_, Error::Kind::shape, "transformer channel mismatch");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.input = x;
    auto affine = predict_affine(x, &c);
    return resample(x, affine);
}

Tensor SpatialTransformer::backward(const Tensor& dy, const Cache& cache,
                                    nn::Grads& grads, bool need_dx) const {
    const Tensor& x = cache.input;
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& a = cache.affine;
    const int64_t plane = static_cast<int64_t>(h) * w;

    Tensor dx = need_dx ? Tensor(x.shape()) : Tensor();
    std::array<double, 6> da{};
    std::vector<double> dvec(static_cast<size_t>(c_in));
    for (int oy = 0; oy < h; ++oy) {
        const double yn = norm_coord(oy, h);
        for (int ox = 0; ox < w; ++ox) {
            const double xn = norm_coord(ox, w);
            const double xs = a[0] * xn + a[1] * yn + a[2];
            const double ys = a[3] * xn + a[4] * yn + a[5];
            for (int c = 0; c < c_in; ++c)
                dvec[static_cast<size_t>(c)] = dy[(c * plane) + oy * static_cast<int64_t>(w) + ox];
            double d_ypix = 0.0, d_xpix = 0.0;
            nn::sample_bilinear_backward(x.data(), c_in, h, w, denorm_coord(ys, h),
                                         denorm_coord(xs, w), dvec.data(),
                                         need_dx ? dx.data() : nullptr, &d_ypix, &d_xpix);
            const double d_xs = w > 1 ? d_xpix * (w - 1) / 2.0 : 0.0;
            const double d_ys = h > 1 ? d_ypix * (h - 1) / 2.0 : 0.0;
            da[0] += d_xs * xn;
            da[1] += d_xs * yn;
            da[2] += d_xs;
            da[3] += d_ys * xn;
            da[4] += d_ys * yn;
            da[5] += d_ys;
        }
    }

    // localization-net backward
    Tensor dtheta({6});
    for (int i = 0; i < 6; ++i) dtheta[i] = da[static_cast<size_t>(i)];
    Tensor g = fc2_.backward(dtheta, cache.fc2, grads);
    g = nn::relu_backward(g, cache.hidden);
    g = fc1_.backward(g, cache.fc1, grads);
    g.reshape(cache.pooled_shape);
    g = pool8_.backward(g, cache.pool8);
    g = nn::relu_backward(g, cache.relu2);
    g = conv2_.backward(g, cache.conv2, grads);
    g = pool_.backward(g, cache.pool2);
    g = nn::relu_backward(g, cache.relu1);
    g = conv1_.backward(g, cache.conv1, grads, need_dx);
    if (!need_dx) return {};
    dx.add_scaled(pool_.backward(g, cache.pool1));
    return dx;
}

// ---- SymmetricEncoding ------------------------------------------------------

Tensor flip_x(const Tensor& x) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y(x.shape());
    for (int c = 0; c < c_in; ++c)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) y.at(c, iy, ix) = x.at(c, iy, w - 1 - ix);
    return y;
}

namespace {
Tensor take_cols(const Tensor& x, int x0, int x1) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    (void)w;
    Tensor y({c_in, h, x1 - x0});
    for (int c = 0; c < c_in; ++c)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = x0; ix < x1; ++ix) y.at(c, iy, ix - x0) = x.at(c, iy, ix);
    return y;
}

Tensor concat_cols(const Tensor& left, const Tensor& right) {
    const int c_in = left.dim(0), h = left.dim(1);
    Tensor y({c_in, h, left.dim(2) + right.dim(2)});
    for (int c = 0; c < c_in; ++c)
        for (int iy = 0; iy < h; ++iy) {
            for (int ix = 0; ix < left.dim(2); ++ix) y.at(c, iy, ix) = left.at(c, iy, ix);
            for (int ix = 0; ix < right.dim(2); ++ix)
                y.at(c, iy, left.dim(2) + ix) = right.at(c, iy, ix);
        }
    return y;
}
}  // namespace

void SymmetricEncoding::init(nn::ParamRegistry& reg, const std::string& name,
                             int channels, bool use_stn, SpeSide side, Rng& rng) {
    use_stn_ = use_stn;
    side_ = side;
    stn_.init(reg, name + ".stn", channels, rng);
}

Tensor SymmetricEncoding::forward(const Tensor& p, Cache* cache) const {
    check(p.dim(2) % 2 == 0, Error::Kind::shape,
          "symmetric encoding requires even width, got " + std::to_string(p.dim(2)));
    const int half = p.dim(2) / 2;
    if (cache) cache->in_shape = p.shape();
    if (side_ == SpeSide::right_to_left) {
        Tensor source = take_cols(p, half, p.dim(2));
        Tensor warped = use_stn_ ? stn_.forward(source, cache ? &cache->stn : nullptr)
                                 : source;
        return concat_cols(flip_x(warped), source);
    }
    Tensor source = take_cols(p, 0, half);
    Tensor warped =
        use_stn_ ? stn_.forward(source, cache ? &cache->stn : nullptr) : source;
    return concat_cols(source, flip_x(warped));
}

Tensor SymmetricEncoding::backward(const Tensor& dy, const Cache& cache,
                                   nn::Grads& grads, bool need_dx) const {
    const int w = cache.in_shape[2];
    const int half = w / 2;
    Tensor d_source;
    Tensor d_warped_flipped;
    if (side_ == SpeSide::right_to_left) {
        d_warped_flipped = take_cols(dy, 0, half);
        d_source = take_cols(dy, half, w);
    } else {
        d_source = take_cols(dy, 0, half);
        d_warped_flipped = take_cols(dy, half, w);
    }
    Tensor d_warped = flip_x(d_warped_flipped);
    Tensor d_source_from_warp;
    if (use_stn_) {
        d_source_from_warp = stn_.backward(d_warped, cache.stn, grads, need_dx);
    } else if (need_dx) {
        d_source_from_warp = d_warped;
    }
    if (!need_dx) return {};
    d_source.add_scaled(d_source_from_warp);
    Tensor dp(cache.in_shape);
    // scatter the source-half gradient back into the full-width map
    const int x0 = side_ == SpeSide::right_to_left ? half : 0;
    for (int c = 0; c < dp.dim(0); ++c)
        for (int iy = 0; iy < dp.dim(1); ++iy)
            for (int ix = 0; ix < half; ++ix) dp.at(c, iy, x0 + ix) = d_source.at(c, iy, ix);
    return dp;
}

Tensor recalibrate(const Tensor& feature, const Tensor& encoding) {
    check(feature.same_shape(encoding), Error::Kind::shape,
          "recalibrate shape mismatch: " + feature.shape_str() + " vs " +
              encoding.shape_str());
    Tensor y = feature;
    y.add_scaled(encoding);
    return y;
}

}  // namespace ctd::enc
