#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "ctd/rng.hpp"
#include "ctd/tensor.hpp"

namespace ctd::nn {

/// Trainable array. Parameters live inside their module; a ParamRegistry
/// assigns stable ids and keeps the canonical ordering used by the
/// optimizer, checkpoints and gradient buffers.
struct Param {
    std::string name;
    Tensor value;
    int id = -1;
};

class ParamRegistry {
public:
    void add(Param& p, std::string name, Tensor init) {
        p.name = std::move(name);
        p.value = std::move(init);
        p.id = static_cast<int>(params_.size());
        params_.push_back(&p);
    }
    int size() const { return static_cast<int>(params_.size()); }
    Param& at(int id) { return *params_[static_cast<size_t>(id)]; }
    const Param& at(int id) const { return *params_[static_cast<size_t>(id)]; }
    const std::vector<Param*>& all() const { return params_; }
    Param* find(const std::string& name) const {
        for (Param* p : params_)
            if (p->name == name) return p;
        return nullptr;
    }

private:
    std::vector<Param*> params_;
};

/// Per-backward-pass gradient sink, indexed by param id. Buffers are
/// allocated lazily so frozen parameters cost nothing.
class Grads {
public:
    Tensor& of(const Param& p) {
        if (p.id >= static_cast<int>(slots_.size())) slots_.resize(p.id + 1);
        Tensor& t = slots_[static_cast<size_t>(p.id)];
        if (t.numel() == 0 && p.value.numel() > 0) t = Tensor(p.value.shape());
        return t;
    }
    const Tensor* find(const Param& p) const {
        if (p.id < 0 || p.id >= static_cast<int>(slots_.size())) return nullptr;
        const Tensor& t = slots_[static_cast<size_t>(p.id)];
        return t.numel() > 0 ? &t : nullptr;
    }
    /// this += scale * other, in ascending id order (deterministic reduce).
    void add_scaled(const Grads& other, double scale = 1.0);
    void clear() { slots_.clear(); }
    double global_norm() const;
    void scale_all(double s);
    int capacity() const { return static_cast<int>(slots_.size()); }
    Tensor* slot(int id) {
        if (id < 0 || id >= static_cast<int>(slots_.size())) return nullptr;
        Tensor& t = slots_[static_cast<size_t>(id)];
        return t.numel() > 0 ? &t : nullptr;
    }

private:
    std::vector<Tensor> slots_;
};

enum class Init { zeros, kaiming, normal_001 };

Tensor init_tensor(std::vector<int> shape, Init scheme, int fan_in, Rng& rng);

// ---- layers ----------------------------------------------------------------

/// 2D convolution on [C,H,W] maps via im2col + GEMM.
class Conv2d {
public:
    void init(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch,
              int ksize, int stride, int pad, bool bias, Init scheme, Rng& rng);

    struct Cache {
        Tensor input;
        int out_h = 0, out_w = 0;
    };

    /// `cache == nullptr` runs in inference mode (no state kept).
    Tensor forward(const Tensor& x, Cache* cache) const;
    /// Returns dL/dx (empty tensor when `need_dx` is false).
    Tensor backward(const Tensor& dy, const Cache& cache, Grads& grads,
                    bool need_dx = true) const;

    int out_channels() const { return out_ch_; }
    int in_channels() const { return in_ch_; }

    Param w;  // [out, in*k*k]
    Param b;  // [out] (empty when bias disabled)

private:
    int in_ch_ = 0, out_ch_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
    bool has_bias_ = true;
};

/// Fully connected layer on flat vectors.
class Linear {
public:
    void init(ParamRegistry& reg, const std::string& name, int in_dim, int out_dim,
              Init scheme, Rng& rng);

    struct Cache {
        Tensor input;
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache, Grads& grads,
                    bool need_dx = true) const;

    Param w;  // [out, in]
    Param b;  // [out]

private:
    int in_dim_ = 0, out_dim_ = 0;
};

/// Max pooling with optional ceil-mode output sizing (used so 1-pixel
/// inputs survive the STN localization net).
class MaxPool2d {
public:
    MaxPool2d() = default;
    MaxPool2d(int ksize, int stride, int pad, bool ceil_mode)
        : k_(ksize), stride_(stride), pad_(pad), ceil_(ceil_mode) {}

    struct Cache {
        std::vector<int64_t> argmax;  // flat input index per output element
        std::vector<int> in_shape;
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache) const;

private:
    int k_ = 2, stride_ = 2, pad_ = 0;
    bool ceil_ = true;
};

/// Adaptive average pooling to a fixed grid (handles inputs smaller than
/// the grid by overlapping bins).
class AdaptiveAvgPool2d {
public:
    explicit AdaptiveAvgPool2d(int out = 8) : out_(out) {}

    struct Cache {
        std::vector<int> in_shape;
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache) const;

private:
    int out_ = 8;
};

Tensor relu(const Tensor& x);
/// dx = dy where y > 0 (subgradient 0 at the kink).
Tensor relu_backward(const Tensor& dy, const Tensor& y);

/// Nearest-neighbour 2x upsampling of [C,H,W].
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& dy);

Tensor global_avg_pool(const Tensor& x);                    // [C,H,W] -> [C]
Tensor global_avg_pool_backward(const Tensor& dy, int h, int w);

// ---- bilinear sampling ------------------------------------------------------

/// Bilinear interpolation of a [C,H,W] map at fractional (y, x).
/// Grid points outside [0,H-1]x[0,W-1] contribute zero.
void sample_bilinear(const double* map, int channels, int height, int width,
                     double y, double x, double* out);

/// Backward of sample_bilinear. `dmap` (same layout as map) may be null;
/// `dy_pos`/`dx_pos` receive the gradient w.r.t. the sample position.
void sample_bilinear_backward(const double* map, int channels, int height, int width,
                              double y, double x, const double* dout, double* dmap,
                              double* dy_pos, double* dx_pos);

}  // namespace ctd::nn
