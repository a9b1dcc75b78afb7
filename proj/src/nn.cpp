#include "ctd/nn.hpp"

#include <algorithm>
#include <cmath>

#include "ctd/error.hpp"

namespace ctd::nn {

void Grads::add_scaled(const Grads& other, double scale) {
    if (other.slots_.size() > slots_.size()) slots_.resize(other.slots_.size());
    for (size_t i = 0; i < other.slots_.size(); ++i) {
        const Tensor& src = other.slots_[i];
        if (src.numel() == 0) continue;
        Tensor& dst = slots_[i];
        if (dst.numel() == 0) dst = Tensor(src.shape());
        dst.add_scaled(src, scale);
    }
}

double Grads::global_norm() const {
    double sq = 0.0;
    for (const Tensor& t : slots_)
        for (int64_t i = 0; i < t.numel(); ++i) sq += t[i] * t[i];
    return std::sqrt(sq);
}

void Grads::scale_all(double s) {
    for (Tensor& t : slots_) t.scale(s);
}

Tensor init_tensor(std::vector<int> shape, Init scheme, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    switch (scheme) {
        case Init::zeros:
            break;
        case Init::kaiming: {
            double bound = std::sqrt(6.0 / std::max(1, fan_in));
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
            break;
        }
        case Init::normal_001:
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 0.01);
            break;
    }
    return t;
}

// ---- Conv2d -----------------------------------------------------------------

namespace {

int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// cols layout: [in*k*k, out_h*out_w] row-major
void im2col(const Tensor& x, int k, int stride, int pad, int out_h, int out_w,
            std::vector<double>& cols) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int n = out_h * out_w;
    cols.assign(static_cast<size_t>(c_in) * k * k * n, 0.0);
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = cols.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * n;
                for (int oy = 0; oy < out_h; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* src_row = x.data() + (static_cast<size_t>(c) * h + iy) * w;
                    double* dst_row = dst + static_cast<size_t>(oy) * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst_row[ox] = src_row[ix];
                    }
                }
            }
        }
    }
}

void col2im(const std::vector<double>& cols, int c_in, int h, int w, int k, int stride,
            int pad, int out_h, int out_w, Tensor& dx) {
    const int n = out_h * out_w;
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = cols.data() + (static_cast<size_t>(c) * k * k + ky * k + kx) * n;
                for (int oy = 0; oy < out_h; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* dst_row = dx.data() + (static_cast<size_t>(c) * h + iy) * w;
                    const double* src_row = src + static_cast<size_t>(oy) * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst_row[ix] += src_row[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

void Conv2d::init(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch,
                  int ksize, int stride, int pad, bool bias, Init scheme, Rng& rng) {
    in_ch_ = in_ch;
    out_ch_ = out_ch;
    k_ = ksize;
    stride_ = stride;
    pad_ = pad;
    has_bias_ = bias;
    int fan_in = in_ch * ksize * ksize;
    reg.add(w, name + ".weight", init_tensor({out_ch, fan_in}, scheme, fan_in, rng));
    if (bias) reg.add(b, name + ".bias", Tensor({out_ch}));
}

Tensor Conv2d::forward(const Tensor& x, Cache* cache) const {
    check(x.ndim() == 3 && x.dim(0) == in_ch_, Error::Kind::shape,
          "conv input shape mismatch " + x.shape_str());
    const int out_h = conv_out(x.dim(1), k_, stride_, pad_);
    const int out_w = conv_out(x.dim(2), k_, stride_, pad_);
    check(out_h > 0 && out_w > 0, Error::Kind::shape, "conv output would be empty");
    const int n = out_h * out_w;

    Tensor y({out_ch_, out_h, out_w});
    if (k_ == 1 && stride_ == 1 && pad_ == 0) {
        gemm_nn(w.value.data(), x.data(), y.data(), out_ch_, in_ch_, n);
    } else {
        std::vector<double> cols;
        im2col(x, k_, stride_, pad_, out_h, out_w, cols);
        gemm_nn(w.value.data(), cols.data(), y.data(), out_ch_, in_ch_ * k_ * k_, n);
    }
    if (has_bias_) {
        for (int c = 0; c < out_ch_; ++c) {
            double bias = b.value[c];
            double* row = y.data() + static_cast<size_t>(c) * n;
            for (int i = 0; i < n; ++i) row[i] += bias;
        }
    }
    if (cache) {
        cache->input = x;
        cache->out_h = out_h;
        cache->out_w = out_w;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& dy, const Cache& cache, Grads& grads,
                        bool need_dx) const {
    const Tensor& x = cache.input;
    const int n = cache.out_h * cache.out_w;
    const int kk = in_ch_ * k_ * k_;

    Tensor& dw = grads.of(w);
    if (k_ == 1 && stride_ == 1 && pad_ == 0) {
        gemm_nt(dy.data(), x.data(), dw.data(), out_ch_, n, in_ch_, /*accumulate=*/true);
    } else {
        std::vector<double> cols;
        im2col(x, k_, stride_, pad_, cache.out_h, cache.out_w, cols);
        gemm_nt(dy.data(), cols.data(), dw.data(), out_ch_, n, kk, /*accumulate=*/true);
    }
    if (has_bias_) {
        Tensor& db = grads.of(b);
        for (int c = 0; c < out_ch_; ++c) {
            const double* row = dy.data() + static_cast<size_t>(c) * n;
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += row[i];
            db[c] += s;
        }
    }
    if (!need_dx) return {};

    Tensor dx(x.shape());
    if (k_ == 1 && stride_ == 1 && pad_ == 0) {
        gemm_tn(w.value.data(), dy.data(), dx.data(), in_ch_, out_ch_, n);
    } else {
        std::vector<double> dcols(static_cast<size_t>(kk) * n);
        gemm_tn(w.value.data(), dy.data(), dcols.data(), kk, out_ch_, n);
        col2im(dcols, in_ch_, x.dim(1), x.dim(2), k_, stride_, pad_, cache.out_h,
               cache.out_w, dx);
    }
    return dx;
}

// ---- Linear -----------------------------------------------------------------

void Linear::init(ParamRegistry& reg, const std::string& name, int in_dim, int out_dim,
                  Init scheme, Rng& rng) {
    in_dim_ = in_dim;
    out_dim_ = out_dim;
    reg.add(w, name + ".weight", init_tensor({out_dim, in_dim}, scheme, in_dim, rng));
    reg.add(b, name + ".bias", Tensor({out_dim}));
}

Tensor Linear::forward(const Tensor& x, Cache* cache) const {
    check(x.numel() == in_dim_, Error::Kind::shape, "linear input size mismatch");
    Tensor y({out_dim_});
    gemm_nn(w.value.data(), x.data(), y.data(), out_dim_, in_dim_, 1);
    for (int i = 0; i < out_dim_; ++i) y[i] += b.value[i];
    if (cache) cache->input = x;
    return y;
}

Tensor Linear::backward(const Tensor& dy, const Cache& cache, Grads& grads,
                        bool need_dx) const {
    Tensor& dw = grads.of(w);
    gemm_nt(dy.data(), cache.input.data(), dw.data(), out_dim_, 1, in_dim_, true);
    Tensor& db = grads.of(b);
    db.add_scaled(dy);
    if (!need_dx) return {};
    Tensor dx(cache.input.shape());
    gemm_tn(w.value.data(), dy.data(), dx.data(), in_dim_, out_dim_, 1);
    return dx;
}

// ---- MaxPool2d ---------------------------------------------------------------

Tensor MaxPool2d::forward(const Tensor& x, Cache* cache) const {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto out_size = [&](int in) {
        int eff = in + 2 * pad_ - k_;
        int o = ceil_ ? (eff + stride_ - 1) / stride_ + 1 : eff / stride_ + 1;
        return std::max(1, o);
    };
    const int out_h = out_size(h), out_w = out_size(w);
    Tensor y({c_in, out_h, out_w});
    std::vector<int64_t> argmax(static_cast<size_t>(c_in) * out_h * out_w);
    for (int c = 0; c < c_in; ++c) {
        for (int oy = 0; oy < out_h; ++oy) {
            for (int ox = 0; ox < out_w; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                int64_t best_idx = -1;
                for (int ky = 0; ky < k_; ++ky) {
                    int iy = oy * stride_ + ky - pad_;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < k_; ++kx) {
                        int ix = ox * stride_ + kx - pad_;
                        if (ix < 0 || ix >= w) continue;
                        double v = x.at(c, iy, ix);
                        if (v > best) {
                            best = v;
                            best_idx = (static_cast<int64_t>(c) * h + iy) * w + ix;
                        }
                    }
                }
                check(best_idx >= 0, Error::Kind::shape, "empty pooling window");
                y.at(c, oy, ox) = best;
                argmax[(static_cast<size_t>(c) * out_h + oy) * out_w + ox] = best_idx;
            }
        }
    }
    if (cache) {
        cache->argmax = std::move(argmax);
        cache->in_shape = x.shape();
    }
    return y;
}

Tensor MaxPool2d::backward(const Tensor& dy, const Cache& cache) const {
    Tensor dx(cache.in_shape);
    for (int64_t i = 0; i < dy.numel(); ++i) dx[cache.argmax[static_cast<size_t>(i)]] += dy[i];
    return dx;
}

// ---- AdaptiveAvgPool2d --------------------------------------------------------

Tensor AdaptiveAvgPool2d::forward(const Tensor& x, Cache* cache) const {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c_in, out_, out_});
    for (int c = 0; c < c_in; ++c) {
        for (int oy = 0; oy < out_; ++oy) {
            int y0 = oy * h / out_, y1 = ((oy + 1) * h + out_ - 1) / out_;
            for (int ox = 0; ox < out_; ++ox) {
                int x0 = ox * w / out_, x1 = ((ox + 1) * w + out_ - 1) / out_;
                double s = 0.0;
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix) s += x.at(c, iy, ix);
                y.at(c, oy, ox) = s / ((y1 - y0) * (x1 - x0));
            }
        }
    }
    if (cache) cache->in_shape = x.shape();
    return y;
}

Tensor AdaptiveAvgPool2d::backward(const Tensor& dy, const Cache& cache) const {
    const int c_in = cache.in_shape[0], h = cache.in_shape[1], w = cache.in_shape[2];
    Tensor dx(cache.in_shape);
    for (int c = 0; c < c_in; ++c) {
        for (int oy = 0; oy < out_; ++oy) {
            int y0 = oy * h / out_, y1 = ((oy + 1) * h + out_ - 1) / out_;
            for (int ox = 0; ox < out_; ++ox) {
                int x0 = ox * w / out_, x1 = ((ox + 1) * w + out_ - 1) / out_;
                double g = dy.at(c, oy, ox) / ((y1 - y0) * (x1 - x0));
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix) dx.at(c, iy, ix) += g;
            }
        }
    }
    return dx;
}

// ---- misc ---------------------------------------------------------------------

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (int64_t i = 0; i < y.numel(); ++i)
        if (y[i] < 0.0) y[i] = 0.0;
    return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& y) {
    Tensor dx = dy;
    for (int64_t i = 0; i < dx.numel(); ++i)
        if (y[i] <= 0.0) dx[i] = 0.0;
    return dx;
}

Tensor upsample2x(const Tensor& x) {
    const int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c_in, 2 * h, 2 * w});
    for (int c = 0; c < c_in; ++c)
        for (int iy = 0; iy < 2 * h; ++iy)
            for (int ix = 0; ix < 2 * w; ++ix) y.at(c, iy, ix) = x.at(c, iy / 2, ix / 2);
    return y;
}

Tensor upsample2x_backward(const Tensor& dy) {
    const int c_in = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2;
    Tensor dx({c_in, h, w});
    for (int c = 0; c < c_in; ++c)
        for (int iy = 0; iy < 2 * h; ++iy)
            for (int ix = 0; ix < 2 * w; ++ix) dx.at(c, iy / 2, ix / 2) += dy.at(c, iy, ix);
    return dx;
}

Tensor global_avg_pool(const Tensor& x) {
    const int c_in = x.dim(0);
    const int n = x.dim(1) * x.dim(2);
    Tensor y({c_in});
    for (int c = 0; c < c_in; ++c) {
        const double* row = x.data() + static_cast<size_t>(c) * n;
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += row[i];
        y[c] = s / n;
    }
    return y;
}

Tensor global_avg_pool_backward(const Tensor& dy, int h, int w) {
    const int c_in = dy.dim(0);
    Tensor dx({c_in, h, w});
    const double inv = 1.0 / (h * w);
    for (int c = 0; c < c_in; ++c) {
        double g = dy[c] * inv;
        double* row = dx.data() + static_cast<size_t>(c) * h * w;
        for (int i = 0; i < h * w; ++i) row[i] = g;
    }
    return dx;
}

// ---- bilinear sampling -----------------------------------------------------

void sample_bilinear(const double* map, int channels, int height, int width, double y,
                     double x, double* out) {
    std::fill(out, out + channels, 0.0);
    if (y <= -1.0 || y >= height || x <= -1.0 || x >= width) return;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    const int64_t plane = static_cast<int64_t>(height) * width;
    const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    for (int i = 0; i < 4; ++i) {
        if (ys[i] < 0 || ys[i] >= height || xs[i] < 0 || xs[i] >= width || wts[i] == 0.0)
            continue;
        const double* p = map + static_cast<int64_t>(ys[i]) * width + xs[i];
        for (int c = 0; c < channels; ++c) out[c] += wts[i] * p[c * plane];
    }
}

void sample_bilinear_backward(const double* map, int channels, int height, int width,
                              double y, double x, const double* dout, double* dmap,
                              double* dy_pos, double* dx_pos) {
    if (dy_pos) *dy_pos = 0.0;
    if (dx_pos) *dx_pos = 0.0;
    if (y <= -1.0 || y >= height || x <= -1.0 || x >= width) return;
    const int y0 = static_cast<int>(std::floor(y));
    const int x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    const int64_t plane = static_cast<int64_t>(height) * width;

    // corner values (zero outside) and validity
    double v[4] = {0, 0, 0, 0};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    // dw/dy and dw/dx per corner
    const double dw_dy[4] = {-(1 - fx), -fx, (1 - fx), fx};
    const double dw_dx[4] = {-(1 - fy), (1 - fy), -fy, fy};

    for (int i = 0; i < 4; ++i) {
        bool in = ys[i] >= 0 && ys[i] < height && xs[i] >= 0 && xs[i] < width;
        if (!in) continue;
        const int64_t base = static_cast<int64_t>(ys[i]) * width + xs[i];
        double dot = 0.0;
        for (int c = 0; c < channels; ++c) {
            double g = dout[c];
            if (dmap) dmap[base + c * plane] += wts[i] * g;
            dot += g * map[base + c * plane];
        }
        v[i] = dot;  // holds dout . value for position grads
    }
    if (dy_pos)
        *dy_pos = v[0] * dw_dy[0] + v[1] * dw_dy[1] + v[2] * dw_dy[2] + v[3] * dw_dy[3];
    if (dx_pos)
        *dx_pos = v[0] * dw_dx[0] + v[1] * dw_dx[1] + v[2] * dw_dx[2] + v[3] * dw_dx[3];
}

}  // namespace ctd::nn
