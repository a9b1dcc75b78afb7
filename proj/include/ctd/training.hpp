#pragma once

#include <filesystem>

#include "ctd/dataset.hpp"
#include "ctd/losses.hpp"
#include "ctd/model.hpp"
#include "ctd/rng.hpp"

namespace ctd::train {

struct TrainConfig {
    int batch_size = 16;
    int epochs = 24;
    double lr = 1e-3;
    std::vector<int> lr_drop_epochs{16, 22};
    double lr_drop_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int input_size = 512;
    double flip_prob = 0.5;
    uint64_t seed = 0;
    /// When positive, run exactly this many iterations; the learning-rate
    /// schedule still follows the epoch grid derived from the dataset.
    int iterations = 0;
    int warmup_iters = 0;
    double warmup_factor = 1.0 / 3.0;
    double clip_norm = 35.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double smooth_l1_beta = 1.0 / 9.0;
    double pos_iou = 0.5;
    double neg_iou = 0.4;

    Json to_json() const;
    static TrainConfig from_json(const Json& j);
};

/// Stepped learning rate: cfg.lr scaled by cfg.lr_drop_factor once per
/// passed drop epoch. `epoch` must lie in [0, cfg.epochs).
double lr_at(const TrainConfig& cfg, int epoch);

struct AnchorTargets {
    std::vector<int8_t> state;  // kPositive / kNegative / kIgnore
    std::vector<int> gt_index;  // valid where state == kPositive
    int num_pos = 0;
};

/// IoU-based assignment: >= pos_iou positive (best-matching target),
/// < neg_iou negative, otherwise ignored; additionally every target
/// claims its highest-IoU anchor.
AnchorTargets assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                             double pos_iou = 0.5, double neg_iou = 0.4);

struct Sample {
    std::string image_id;
    Tensor image;  // [1,H,W] in [0,1]
    std::vector<data::TbBox> boxes;
    int label3 = 0;
    int orig_w = 0, orig_h = 0;
};

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

/// Random horizontal flip followed by a resize to the training size
/// (boxes move with the image).
Sample augment(const Sample& sample, int target_size, double flip_prob, Rng& rng);

struct LossRow {
    int iteration;
    int stage;
    double total, focal, box, cls;
};
std::string loss_rows_csv(const std::vector<LossRow>& rows);

/// Decodes every record's PNG into memory. Honors CTD_NUM_WORKERS for
/// the decode pool (default 1).
std::vector<Sample> load_images(const data::DatasetIndex& index,
                                const std::filesystem::path& images_root);

/// Stage 1: detection training (losses: focal + box regression) on the
/// typed-TB subset of `index`; updates everything except the image
/// classification head.
std::vector<LossRow> train_stage1(net::SymFormer& model, const data::DatasetIndex& index,
                                  const std::filesystem::path& images_root,
                                  const TrainConfig& cfg);

/// Stage 2: 3-way image classification on all records; updates only the
/// classification head, leaving every other parameter bit-identical.
std::vector<LossRow> train_stage2(net::SymFormer& model, const data::DatasetIndex& index,
                                  const std::filesystem::path& images_root,
                                  const TrainConfig& cfg);

/// Runs the model over a dataset; boxes are mapped back into original
/// image coordinates.
std::vector<ImagePrediction> predict_dataset(const net::SymFormer& model,
                                             const data::DatasetIndex& index,
                                             const std::filesystem::path& images_root,
                                             int input_size, net::PredictMode mode);

}  // namespace ctd::train
