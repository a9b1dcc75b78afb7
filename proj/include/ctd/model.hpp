#pragma once

#include <filesystem>
#include <map>
#include <memory>

#include "ctd/anchors.hpp"
#include "ctd/attention.hpp"
#include "ctd/backbone.hpp"
#include "ctd/heads.hpp"
#include "ctd/json_util.hpp"

namespace ctd::net {

struct ModelConfig {
    BackboneConfig backbone;
    int fpn_channels = 256;
    attn::SasConfig sas;  // channel count follows fpn_channels
    AnchorConfig anchors;
    ClsHeadConfig cls_head;
    int tower_depth = 4;
    double prior_prob = 0.01;
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_detections = 100;

    /// Desk-scale preset: small residual backbone, 32 FPN channels, a
    /// light classification head that tolerates 2x2 top-level maps.
    static ModelConfig tiny();
    /// Full-scale preset matching the published configuration
    /// (ResNet-50-compatible backbone, C=256, 512-channel head).
    static ModelConfig full();

    Json to_json() const;
    static ModelConfig from_json(const Json& j);
};

struct RawOutputs {
    std::vector<Tensor> cls_logits;  // per level, [A*2, H', W']
    std::vector<Tensor> box_deltas;  // per level, [A*4, H', W']
    Tensor image_logits;             // [3]; empty when the head was skipped
};

enum class PredictMode { filtered, unfiltered };

/// Full detector+classifier. Parameters are owned by the contained
/// modules and indexed by an internal registry; the object is
/// non-copyable because the registry stores stable pointers.
class SymFormer {
public:
    SymFormer(const ModelConfig& cfg, uint64_t seed);
    SymFormer(const SymFormer&) = delete;
    SymFormer& operator=(const SymFormer&) = delete;

    struct Cache {
        Backbone::Cache backbone;
        Fpn::Cache fpn;
        std::vector<attn::SasBlock::Cache> sas;
        std::vector<DetectionHead::LevelCache> det;
        ClassificationHead::Cache cls;
        std::array<Tensor, 4> pyramid;   // FPN outputs
        std::array<Tensor, 4> enhanced;  // after the attention blocks
    };

    /// `image` is [1,H,W] grayscale in [0,1]; it is replicated to three
    /// channels and standardized internally. H, W must be multiples of 32.
    RawOutputs forward(const Tensor& image, Cache* cache, bool with_cls) const;

    void backward_detection(const std::vector<Tensor>& dcls,
                            const std::vector<Tensor>& dbox, const Cache& cache,
                            nn::Grads& grads) const;
    void backward_classification(const Tensor& dlogits, const Cache& cache,
                                 nn::Grads& grads) const;

    /// Enhanced top pyramid level, inference mode (stage-2 training and
    /// the classification head only need this slice of the network).
    Tensor enhanced_top(const Tensor& image) const;
    Tensor classify(const Tensor& top, ClassificationHead::Cache* cache) const;
    void backward_classify(const Tensor& dlogits, const ClassificationHead::Cache& cache,
                           nn::Grads& grads) const;

    nn::ParamRegistry& params() { return registry_; }
    const nn::ParamRegistry& params() const { return registry_; }
    const ModelConfig& config() const { return cfg_; }
    bool has_attention() const { return has_sas_; }
    attn::SasBlock& sas() { return sas_; }

    /// Parameter names owned by the image classification head (the only
    /// set trained in stage 2).
    std::vector<std::string> classification_param_names() const;

private:
    ModelConfig cfg_;
    nn::ParamRegistry registry_;
    Backbone backbone_;
    Fpn fpn_;
    attn::SasBlock sas_;
    bool has_sas_ = false;
    DetectionHead det_;
    ClassificationHead cls_;
};

/// Decode, threshold, per-class NMS and §-style filtering of one
/// image's raw outputs into a prediction.
ImagePrediction postprocess(const RawOutputs& raw, const ModelConfig& cfg,
                            PredictMode mode, int image_w, int image_h,
                            const std::string& image_id);

// ---- checkpoint container -----------------------------------------------------

struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors;
    Json extra;  // free-form metadata (stage, iteration, ...)
};

void save_checkpoint(const std::filesystem::path& path, const SymFormer& model,
                     const Json& extra = Json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint tensors into `model` (names and shapes must match).
void load_state(SymFormer& model, const Checkpoint& ckpt);

}  // namespace ctd::net
