#pragma once

#include <array>

#include "ctd/nn.hpp"

namespace ctd::enc {

/// Sinusoidal position map of shape [C,H,W]. The first C/2 channels
/// encode the row index, the rest the column index; within each half,
/// even channels carry sine and odd channels cosine at geometrically
/// spaced frequencies. Requires C divisible by 4.
Tensor sinusoidal_encoding(int height, int width, int channels);

/// Small conditional warp: a localization net predicts a 2x3 affine
/// matrix from the input map, which is then resampled under that matrix
/// in normalized [-1,1] coordinates (out-of-range samples are zero).
/// Freshly initialized, the predicted matrix is the identity for every
/// input, so forward() is an exact pass-through.
class SpatialTransformer {
public:
    void init(nn::ParamRegistry& reg, const std::string& name, int channels, Rng& rng);

    struct Cache {
        Tensor input;
        nn::MaxPool2d::Cache pool1, pool2;
        nn::Conv2d::Cache conv1, conv2;
        Tensor relu1, relu2;
        nn::AdaptiveAvgPool2d::Cache pool8;
        std::vector<int> pooled_shape;
        nn::Linear::Cache fc1, fc2;
        Tensor hidden;
        std::array<double, 6> affine{};
    };

    Tensor forward(const Tensor& x, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache, nn::Grads& grads,
                    bool need_dx = true) const;

    /// Affine coefficients [a, b, tx, c, d, ty] predicted for `x`.
    std::array<double, 6> predict_affine(const Tensor& x, Cache* cache) const;

    /// Resample `x` under a fixed affine matrix (shared with forward()).
    static Tensor resample(const Tensor& x, const std::array<double, 6>& affine);

private:
    int channels_ = 0;
    nn::MaxPool2d pool_{2, 2, 0, /*ceil=*/true};
    nn::AdaptiveAvgPool2d pool8_{8};
    nn::Conv2d conv1_, conv2_;
    nn::Linear fc1_, fc2_;
};

enum class SpeSide { right_to_left, left_to_right };

/// Horizontal mirror of a [C,H,W] map (exact involution).
Tensor flip_x(const Tensor& x);

/// Symmetrized positional encoding: one half of the input map is warped
/// by the SpatialTransformer, flipped, and concatenated back against the
/// untouched source half. With `use_stn == false` the warp is skipped.
class SymmetricEncoding {
public:
    void init(nn::ParamRegistry& reg, const std::string& name, int channels, bool use_stn,
              SpeSide side, Rng& rng);

    struct Cache {
        SpatialTransformer::Cache stn;
        std::vector<int> in_shape;
    };

    /// Requires even input width.
    Tensor forward(const Tensor& p, Cache* cache) const;
    /// Propagates into the transformer parameters; returns d input when
    /// `need_dx` (the encoding itself is constant during training).
    Tensor backward(const Tensor& dy, const Cache& cache, nn::Grads& grads,
                    bool need_dx = false) const;

    bool use_stn() const { return use_stn_; }
    SpeSide side() const { return side_; }
    SpatialTransformer& stn() { return stn_; }

private:
    SpatialTransformer stn_;
    bool use_stn_ = true;
    SpeSide side_ = SpeSide::right_to_left;
};

/// Elementwise sum of a feature map and its positional encoding
/// (shapes must match).
Tensor recalibrate(const Tensor& feature, const Tensor& encoding);

}  // namespace ctd::enc
