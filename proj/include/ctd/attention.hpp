#pragma once

#include <vector>

#include "ctd/encoding.hpp"
#include "ctd/nn.hpp"

namespace ctd::attn {

enum class AttentionKind { none, vanilla, symmetric };
enum class EncodingKind { none, ape, rpe, spe };

struct SasConfig {
    int channels = 256;
    int heads = 8;   // M
    int points = 4;  // K, sampling locations per head
    AttentionKind attention = AttentionKind::symmetric;
    EncodingKind encoding = EncodingKind::spe;
    bool spe_stn = true;
    enc::SpeSide spe_side = enc::SpeSide::right_to_left;
};

/// Reflection about the vertical center line of a grid of `width`
/// columns in continuous 0-indexed coordinates.
inline double mirror_coordinate(double x, int width) { return width - 1 - x; }

/// One attention block: positional recalibration, learned sampling
/// offsets/weights around the (mirrored) reference location, projection
/// with residual from the block input, and a per-position feed-forward
/// with a second residual. Freshly initialized it is an exact identity.
class SasBlock {
public:
    void init(nn::ParamRegistry& reg, const std::string& name, const SasConfig& cfg,
              Rng& rng);

    struct Cache {
        std::vector<int> in_shape;
        Tensor f_rec;              // [C,N]
        Tensor off_x, off_y;       // [M*K,N]
        Tensor att;                // [M*K,N] softmaxed over K
        Tensor value;              // [C,N]
        std::vector<double> sampled;  // [M*K][D][N]
        Tensor f_att;              // [C,N]
        Tensor f_hat_att;          // [C,N]
        Tensor hidden;             // [4C,N]
        enc::SymmetricEncoding::Cache spe;
    };

    Tensor forward(const Tensor& level, Cache* cache) const;
    Tensor backward(const Tensor& dy, const Cache& cache, nn::Grads& grads) const;

    /// Positional recalibration only (the input to the attention maps).
    Tensor recalibrated(const Tensor& level) const;
    /// Sampling offsets for a recalibrated map, shaped [M,K,H,W] each.
    std::pair<Tensor, Tensor> predict_offsets(const Tensor& f_rec) const;
    /// Attention weights for a recalibrated map, shaped [M,K,H,W],
    /// normalized over K.
    Tensor predict_attention(const Tensor& f_rec) const;

    const SasConfig& config() const { return cfg_; }
    enc::SymmetricEncoding& spe() { return spe_; }

    nn::Param wx, bx, wy, by;      // offset projections, zero-initialized
    nn::Param watt, batt;          // attention projection
    nn::Param wvalue, bvalue;      // value projection
    nn::Param wproj, bproj;        // output projection, zero-initialized
    nn::Param mlp_w1, mlp_b1;      // feed-forward C -> 4C
    nn::Param mlp_w2, mlp_b2;      // feed-forward 4C -> C, zero-initialized
    nn::Param rpe_bias;            // [M,K], only with EncodingKind::rpe

private:
    Tensor encoding_for(int height, int width,
                        enc::SymmetricEncoding::Cache* spe_cache) const;

    SasConfig cfg_;
    enc::SymmetricEncoding spe_;
    bool has_spe_ = false;
};

/// Applies one shared block to every pyramid level independently.
std::vector<Tensor> pyramid_forward(const SasBlock& block,
                                    const std::vector<Tensor>& levels,
                                    std::vector<SasBlock::Cache>* caches);

/// One row of the attention/encoding ablation grid.
struct AblationSpec {
    std::string name;
    AttentionKind attention;
    EncodingKind encoding;
    bool spe_stn;
    enc::SpeSide spe_side;
};

/// The 13-model grid: the plain baseline, then each attention variant
/// crossed with {APE, RPE, SPE with/without warp x transfer side}.
std::vector<AblationSpec> ablation_grid();

}  // namespace ctd::attn
