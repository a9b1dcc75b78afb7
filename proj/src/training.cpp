#include "ctd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <thread>

#include "ctd/error.hpp"
#include "ctd/png_io.hpp"

namespace ctd::train {

// ---- TrainConfig ---------------------------------------------------------------

Json TrainConfig::to_json() const {
    return Json{{"batch_size", batch_size},
                {"epochs", epochs},
                {"lr", lr},
                {"lr_drop_epochs", lr_drop_epochs},
                {"lr_drop_factor", lr_drop_factor},
                {"momentum", momentum},
                {"weight_decay", weight_decay},
                {"input_size", input_size},
                {"flip_prob", flip_prob},
                {"seed", seed},
                {"iterations", iterations},
                {"warmup_iters", warmup_iters},
                {"warmup_factor", warmup_factor},
                {"clip_norm", clip_norm},
                {"focal_alpha", focal_alpha},
                {"focal_gamma", focal_gamma},
                {"smooth_l1_beta", smooth_l1_beta},
                {"pos_iou", pos_iou},
                {"neg_iou", neg_iou}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
    TrainConfig cfg;
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_drop_epochs = j.value("lr_drop_epochs", cfg.lr_drop_epochs);
    cfg.lr_drop_factor = j.value("lr_drop_factor", cfg.lr_drop_factor);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.input_size = j.value("input_size", cfg.input_size);
    cfg.flip_prob = j.value("flip_prob", cfg.flip_prob);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.warmup_iters = j.value("warmup_iters", cfg.warmup_iters);
    cfg.warmup_factor = j.value("warmup_factor", cfg.warmup_factor);
    cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    cfg.focal_alpha = j.value("focal_alpha", cfg.focal_alpha);
    cfg.focal_gamma = j.value("focal_gamma", cfg.focal_gamma);
    cfg.smooth_l1_beta = j.value("smooth_l1_beta", cfg.smooth_l1_beta);
    cfg.pos_iou = j.value("pos_iou", cfg.pos_iou);
    cfg.neg_iou = j.value("neg_iou", cfg.neg_iou);
    return cfg;
}

double lr_at(const TrainConfig& cfg, int epoch) {
    check(epoch >= 0 && epoch < cfg.epochs, Error::Kind::validation,
          "epoch " + std::to_string(epoch) + " outside [0," + std::to_string(cfg.epochs) +
              ")");
    double lr = cfg.lr;
    for (int drop : cfg.lr_drop_epochs)
        if (epoch >= drop) lr *= cfg.lr_drop_factor;
    return lr;
}

// ---- anchor assignment -----------------------------------------------------------

AnchorTargets assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                             double pos_iou, double neg_iou) {
    const size_t n = anchors.size();
    AnchorTargets t;
    t.state.assign(n, kNegative);
    t.gt_index.assign(n, -1);
    if (gts.empty()) return t;

    std::vector<double> best_gt_iou(gts.size(), -1.0);
    std::vector<size_t> best_gt_anchor(gts.size(), 0);
    for (size_t a = 0; a < n; ++a) {
        double best = 0.0;
        int best_idx = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            const double v = box_iou(anchors[a], gts[g]);
            if (v > best) {
                best = v;
                best_idx = static_cast<int>(g);
            }
            if (v > best_gt_iou[g]) {
                best_gt_iou[g] = v;
                best_gt_anchor[g] = a;
            }
        }
        if (best >= pos_iou) {
            t.state[a] = kPositive;
            t.gt_index[a] = best_idx;
        } else if (best >= neg_iou) {
            t.state[a] = kIgnore;
        }
    }
    // every target claims its best anchor, regardless of threshold
    for (size_t g = 0; g < gts.size(); ++g) {
        t.state[best_gt_anchor[g]] = kPositive;
        t.gt_index[best_gt_anchor[g]] = static_cast<int>(g);
    }
    for (int8_t s : t.state)
        if (s == kPositive) ++t.num_pos;
    return t;
}

// ---- augmentation -----------------------------------------------------------------

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
    const int c_in = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (h == out_h && w == out_w) return image;
    Tensor out({c_in, out_h, out_w});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int c = 0; c < c_in; ++c)
        for (int oy = 0; oy < out_h; ++oy) {
            double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, h - 1.0);
            const int y0 = std::min(static_cast<int>(fy), h - 2 >= 0 ? h - 2 : 0);
            const double ty = fy - y0;
            for (int ox = 0; ox < out_w; ++ox) {
                double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, w - 1.0);
                const int x0 = std::min(static_cast<int>(fx), w - 2 >= 0 ? w - 2 : 0);
                const double tx = fx - x0;
                const double v00 = image.at(c, y0, x0);
                const double v01 = image.at(c, y0, std::min(x0 + 1, w - 1));
                const double v10 = image.at(c, std::min(y0 + 1, h - 1), x0);
                const double v11 = image.at(c, std::min(y0 + 1, h - 1), std::min(x0 + 1, w - 1));
                out.at(c, oy, ox) = (1 - ty) * ((1 - tx) * v00 + tx * v01) +
                                    ty * ((1 - tx) * v10 + tx * v11);
            }
        }
    return out;
}

Sample augment(const Sample& sample, int target_size, double flip_prob, Rng& rng) {
    Sample out = sample;
    const int w = out.image.dim(2);
    if (rng.bernoulli(flip_prob)) {
        Tensor flipped(out.image.shape());
        const int h = out.image.dim(1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) flipped.at(0, y, x) = out.image.at(0, y, w - 1 - x);
        out.image = std::move(flipped);
        for (data::TbBox& b : out.boxes) b.x = w - b.x - b.w;
    }
    if (out.image.dim(1) != target_size || out.image.dim(2) != target_size) {
        const double sx = static_cast<double>(target_size) / out.image.dim(2);
        const double sy = static_cast<double>(target_size) / out.image.dim(1);
        out.image = resize_bilinear(out.image, target_size, target_size);
        for (data::TbBox& b : out.boxes) {
            b.x *= sx;
            b.w *= sx;
            b.y *= sy;
            b.h *= sy;
        }
    }
    return out;
}

// ---- dataset loading ---------------------------------------------------------------

std::vector<Sample> load_images(const data::DatasetIndex& index,
                                const std::filesystem::path& images_root) {
    std::vector<Sample> samples(index.records.size());
    int workers = 1;
    if (const char* env = std::getenv("CTD_NUM_WORKERS")) workers = std::max(1, std::atoi(env));
    workers = std::min<int>(workers, std::max<size_t>(1, samples.size()));

    auto decode_range = [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const data::CxrRecord& r = index.records[i];
            Sample& s = samples[i];
            s.image_id = r.image_id;
            s.image = image_to_tensor(read_gray_png(images_root / r.file_name));
            s.boxes = r.boxes;
            s.label3 = data::collapse3(r.image_class);
            s.orig_w = r.width;
            s.orig_h = r.height;
        }
    };
    if (workers <= 1) {
        decode_range(0, samples.size());
    } else {
        std::vector<std::thread> pool;
        const size_t chunk = (samples.size() + workers - 1) / workers;
        for (int t = 0; t < workers; ++t) {
            const size_t lo = std::min(samples.size(), static_cast<size_t>(t) * chunk);
            const size_t hi = std::min(samples.size(), lo + chunk);
            if (lo < hi) pool.emplace_back(decode_range, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    return samples;
}

// ---- shared trainer machinery --------------------------------------------------------

namespace {

std::vector<int> permutation(int n, Rng& rng) {
    std::vector<int> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(rng.uniform_int(0, i))]);
    return p;
}

/// Deterministic sample stream: epoch-wise shuffles consumed in order.
class SampleStream {
public:
    SampleStream(int n, Rng rng) : n_(n), rng_(rng) {}
    int next() {
        if (pos_ >= perm_.size()) {
            perm_ = permutation(n_, rng_);
            pos_ = 0;
        }
        return perm_[pos_++];
    }

private:
    int n_;
    Rng rng_;
    std::vector<int> perm_;
    size_t pos_ = 0;
};

struct Sgd {
    std::vector<Tensor> velocity;

    void step(net::SymFormer& model, nn::Grads& grads, const std::vector<char>& trained,
              double lr, double momentum, double weight_decay, double clip_norm) {
        auto& params = model.params();
        if (velocity.empty()) velocity.resize(static_cast<size_t>(params.size()));

        double sq = 0.0;
        for (int id = 0; id < params.size(); ++id) {
            if (!trained[static_cast<size_t>(id)]) continue;
            if (const Tensor* g = grads.slot(id))
                for (int64_t i = 0; i < g->numel(); ++i) sq += (*g)[i] * (*g)[i];
        }
        const double norm = std::sqrt(sq);
        const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;

        for (int id = 0; id < params.size(); ++id) {
            if (!trained[static_cast<size_t>(id)]) continue;
            nn::Param& p = params.at(id);
            Tensor* g = grads.slot(id);
            Tensor& v = velocity[static_cast<size_t>(id)];
            if (v.numel() == 0) v = Tensor(p.value.shape());
            for (int64_t i = 0; i < p.value.numel(); ++i) {
                const double grad = (g ? (*g)[i] * scale : 0.0) + weight_decay * p.value[i];
                v[i] = momentum * v[i] + grad;
                p.value[i] -= lr * v[i];
            }
        }
    }
};

std::vector<char> trained_mask(const net::SymFormer& model, bool classification_stage) {
    std::vector<char> mask(static_cast<size_t>(model.params().size()), 0);
    for (const nn::Param* p : model.params().all()) {
        const bool is_cls = p->name.rfind("cls.", 0) == 0;
        mask[static_cast<size_t>(p->id)] = classification_stage ? is_cls : !is_cls;
    }
    return mask;
}

double schedule_lr(const TrainConfig& cfg, int iteration, int iters_per_epoch) {
    const int epoch = std::min(iteration / std::max(1, iters_per_epoch), cfg.epochs - 1);
    double lr = lr_at(cfg, epoch);
    if (iteration < cfg.warmup_iters && cfg.warmup_iters > 0) {
        const double t = static_cast<double>(iteration) / cfg.warmup_iters;
        lr *= cfg.warmup_factor + (1.0 - cfg.warmup_factor) * t;
    }
    return lr;
}

}  // namespace

std::string loss_rows_csv(const std::vector<LossRow>& rows) {
    std::string out = "iteration,stage,total,focal,box,cls\n";
    char buf[256];
    for (const LossRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                      r.stage, r.total, r.focal, r.box, r.cls);
        out += buf;
    }
    return out;
}

// ---- stage 1 ---------------------------------------------------------------------

std::vector<LossRow> train_stage1(net::SymFormer& model, const data::DatasetIndex& index,
                                  const std::filesystem::path& images_root,
                                  const TrainConfig& cfg) {
    data::DatasetIndex subset;
    subset.split = index.split;
    for (const data::CxrRecord& r : index.records)
        if (data::has_typed_boxes(r.image_class)) subset.records.push_back(r);
    subset.recount();
    check(!subset.records.empty(), Error::Kind::validation,
          "stage 1 requires TB records with typed boxes");

    std::vector<Sample> samples = load_images(subset, images_root);
    const int n = static_cast<int>(samples.size());
    const int iters_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_iters =
        cfg.iterations > 0 ? cfg.iterations : cfg.epochs * iters_per_epoch;

    // per-level anchors for the training resolution
    std::vector<std::vector<Box>> anchors(4);
    std::vector<int> level_cells(4);
    const int per_cell = model.config().anchors.anchors_per_cell();
    int total_anchors = 0;
    for (int l = 0; l < 4; ++l) {
        anchors[static_cast<size_t>(l)] = net::generate_anchors(
            l + 1, cfg.input_size, cfg.input_size, model.config().anchors);
        level_cells[static_cast<size_t>(l)] =
            static_cast<int>(anchors[static_cast<size_t>(l)].size());
        total_anchors += level_cells[static_cast<size_t>(l)];
    }

    const std::vector<char> trained = trained_mask(model, /*classification_stage=*/false);
    Sgd sgd;
    SampleStream stream(n, Rng(cfg.seed).fork(11));
    const Rng aug_base = Rng(cfg.seed).fork(13);

    std::vector<LossRow> rows;
    rows.reserve(static_cast<size_t>(total_iters));
    for (int it = 0; it < total_iters; ++it) {
        nn::Grads grads;
        double sum_focal = 0, sum_box = 0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            Rng aug_rng = aug_base.fork(static_cast<uint64_t>(it) * cfg.batch_size +
                                        static_cast<uint64_t>(slot));
            const Sample aug =
                augment(samples[static_cast<size_t>(stream.next())], cfg.input_size,
                        cfg.flip_prob, aug_rng);

            net::SymFormer::Cache cache;
            net::RawOutputs raw = model.forward(aug.image, &cache, /*with_cls=*/false);

            // flatten anchors and logits over levels in (level, y, x, anchor) order
            std::vector<Box> gt_boxes;
            std::vector<int> gt_cls;
            for (const data::TbBox& b : aug.boxes) {
                gt_boxes.push_back({b.x, b.y, b.w, b.h});
                gt_cls.push_back(b.tb_class == data::TbClass::latent_tb ? 1 : 0);
            }
            std::vector<Box> all_anchors;
            all_anchors.reserve(static_cast<size_t>(total_anchors));
            for (int l = 0; l < 4; ++l)
                all_anchors.insert(all_anchors.end(), anchors[static_cast<size_t>(l)].begin(),
                                   anchors[static_cast<size_t>(l)].end());
            AnchorTargets targets =
                assign_anchors(all_anchors, gt_boxes, cfg.pos_iou, cfg.neg_iou);

            Tensor flat_logits({total_anchors, 2});
            {
                int base = 0;
                for (int l = 0; l < 4; ++l) {
                    const Tensor& lg = raw.cls_logits[static_cast<size_t>(l)];
                    const int gh = lg.dim(1), gw = lg.dim(2);
                    for (int gy = 0; gy < gh; ++gy)
                        for (int gx = 0; gx < gw; ++gx)
                            for (int a = 0; a < per_cell; ++a) {
                                const int i = base + (gy * gw + gx) * per_cell + a;
                                flat_logits.at(i, 0) = lg.at(a * 2 + 0, gy, gx);
                                flat_logits.at(i, 1) = lg.at(a * 2 + 1, gy, gx);
                            }
                    base += level_cells[static_cast<size_t>(l)];
                }
            }
            std::vector<int> pos_class(static_cast<size_t>(total_anchors), 0);
            for (int i = 0; i < total_anchors; ++i)
                if (targets.state[static_cast<size_t>(i)] == kPositive)
                    pos_class[static_cast<size_t>(i)] =
                        gt_cls[static_cast<size_t>(targets.gt_index[static_cast<size_t>(i)])];

            Tensor dflat;
            const double lf = focal_loss(flat_logits, targets.state, pos_class,
                                         cfg.focal_alpha, cfg.focal_gamma, &dflat);

            // box regression over positive anchors
            std::vector<int> pos_idx;
            for (int i = 0; i < total_anchors; ++i)
                if (targets.state[static_cast<size_t>(i)] == kPositive) pos_idx.push_back(i);
            Tensor pred_deltas({static_cast<int>(pos_idx.size()), 4});
            Tensor target_deltas({static_cast<int>(pos_idx.size()), 4});
            {
                int base = 0;
                std::vector<int> level_of(static_cast<size_t>(total_anchors));
                std::vector<int> offset_of(static_cast<size_t>(total_anchors));
                for (int l = 0; l < 4; ++l) {
                    for (int i = 0; i < level_cells[static_cast<size_t>(l)]; ++i) {
                        level_of[static_cast<size_t>(base + i)] = l;
                        offset_of[static_cast<size_t>(base + i)] = i;
                    }
                    base += level_cells[static_cast<size_t>(l)];
                }
                for (size_t p = 0; p < pos_idx.size(); ++p) {
                    const int i = pos_idx[p];
                    const int l = level_of[static_cast<size_t>(i)];
                    const int off = offset_of[static_cast<size_t>(i)];
                    const Tensor& bd = raw.box_deltas[static_cast<size_t>(l)];
                    const int gw = bd.dim(2);
                    const int cell = off / per_cell, a = off % per_cell;
                    const int gy = cell / gw, gx = cell % gw;
                    for (int c = 0; c < 4; ++c)
                        pred_deltas.at(static_cast<int>(p), c) = bd.at(a * 4 + c, gy, gx);
                    const auto enc = net::encode_box(
                        all_anchors[static_cast<size_t>(i)],
                        gt_boxes[static_cast<size_t>(
                            targets.gt_index[static_cast<size_t>(i)])]);
                    for (int c = 0; c < 4; ++c)
                        target_deltas.at(static_cast<int>(p), c) = enc[static_cast<size_t>(c)];
                }
            }
            Tensor dpred;
            const double lb =
                box_regression_loss(pred_deltas, target_deltas, cfg.smooth_l1_beta, &dpred);

            sum_focal += lf;
            sum_box += lb;

            // scatter gradients back into level-shaped tensors
            std::vector<Tensor> dcls, dbox;
            for (int l = 0; l < 4; ++l) {
                dcls.emplace_back(raw.cls_logits[static_cast<size_t>(l)].shape());
                dbox.emplace_back(raw.box_deltas[static_cast<size_t>(l)].shape());
            }
            {
                int base = 0;
                for (int l = 0; l < 4; ++l) {
                    Tensor& dl = dcls[static_cast<size_t>(l)];
                    const int gh = dl.dim(1), gw = dl.dim(2);
                    for (int gy = 0; gy < gh; ++gy)
                        for (int gx = 0; gx < gw; ++gx)
                            for (int a = 0; a < per_cell; ++a) {
                                const int i = base + (gy * gw + gx) * per_cell + a;
                                dl.at(a * 2 + 0, gy, gx) = dflat.at(i, 0);
                                dl.at(a * 2 + 1, gy, gx) = dflat.at(i, 1);
                            }
                    base += level_cells[static_cast<size_t>(l)];
                }
                int lvl_base[4];
                int acc = 0;
                for (int l = 0; l < 4; ++l) {
                    lvl_base[l] = acc;
                    acc += level_cells[static_cast<size_t>(l)];
                }
                for (size_t p = 0; p < pos_idx.size(); ++p) {
                    const int i = pos_idx[p];
                    int l = 3;
                    while (l > 0 && i < lvl_base[l]) --l;
                    const int off = i - lvl_base[l];
                    Tensor& dbl = dbox[static_cast<size_t>(l)];
                    const int gw = dbl.dim(2);
                    const int cell = off / per_cell, a = off % per_cell;
                    const int gy = cell / gw, gx = cell % gw;
                    for (int c = 0; c < 4; ++c)
                        dbl.at(a * 4 + c, gy, gx) = dpred.at(static_cast<int>(p), c);
                }
            }
            model.backward_detection(dcls, dbox, cache, grads);
        }

        grads.scale_all(1.0 / cfg.batch_size);
        const double lr = schedule_lr(cfg, it, iters_per_epoch);
        sgd.step(model, grads, trained, lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm);

        const double focal_mean = sum_focal / cfg.batch_size;
        const double box_mean = sum_box / cfg.batch_size;
        rows.push_back({it, 1, focal_mean + box_mean, focal_mean, box_mean, 0.0});
    }
    return rows;
}

// ---- stage 2 ---------------------------------------------------------------------

std::vector<LossRow> train_stage2(net::SymFormer& model, const data::DatasetIndex& index,
                                  const std::filesystem::path& images_root,
                                  const TrainConfig& cfg) {
    check(!index.records.empty(), Error::Kind::validation, "stage 2 requires records");
    std::vector<Sample> samples = load_images(index, images_root);
    const int n = static_cast<int>(samples.size());
    const int iters_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_iters =
        cfg.iterations > 0 ? cfg.iterations : cfg.epochs * iters_per_epoch;

    const std::vector<char> trained = trained_mask(model, /*classification_stage=*/true);
    Sgd sgd;
    SampleStream stream(n, Rng(cfg.seed).fork(17));
    const Rng aug_base = Rng(cfg.seed).fork(19);

    std::vector<LossRow> rows;
    rows.reserve(static_cast<size_t>(total_iters));
    for (int it = 0; it < total_iters; ++it) {
        nn::Grads grads;
        double sum_cls = 0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            Rng aug_rng = aug_base.fork(static_cast<uint64_t>(it) * cfg.batch_size +
                                        static_cast<uint64_t>(slot));
            const Sample aug =
                augment(samples[static_cast<size_t>(stream.next())], cfg.input_size,
                        cfg.flip_prob, aug_rng);
            // frozen trunk: inference-mode features, cache only in the head
            const Tensor top = model.enhanced_top(aug.image);
            net::ClassificationHead::Cache cache;
            const Tensor logits = model.classify(top, &cache);
            Tensor dlogits;
            sum_cls += cross_entropy3(logits, aug.label3, &dlogits);
            model.backward_classify(dlogits, cache, grads);
        }
        grads.scale_all(1.0 / cfg.batch_size);
        const double lr = schedule_lr(cfg, it, iters_per_epoch);
        sgd.step(model, grads, trained, lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm);
        const double cls_mean = sum_cls / cfg.batch_size;
        rows.push_back({it, 2, cls_mean, 0.0, 0.0, cls_mean});
    }
    return rows;
}

// ---- prediction ---------------------------------------------------------------------

std::vector<ImagePrediction> predict_dataset(const net::SymFormer& model,
                                             const data::DatasetIndex& index,
                                             const std::filesystem::path& images_root,
                                             int input_size, net::PredictMode mode) {
    std::vector<Sample> samples = load_images(index, images_root);
    std::vector<ImagePrediction> preds;
    preds.reserve(samples.size());
    for (const Sample& s : samples) {
        Tensor resized = resize_bilinear(s.image, input_size, input_size);
        net::RawOutputs raw = model.forward(resized, nullptr, /*with_cls=*/true);
        ImagePrediction pred =
            net::postprocess(raw, model.config(), mode, input_size, input_size, s.image_id);
        const double sx = static_cast<double>(s.orig_w) / input_size;
        const double sy = static_cast<double>(s.orig_h) / input_size;
        for (PredBox& b : pred.boxes) {
            b.box.x *= sx;
            b.box.w *= sx;
            b.box.y *= sy;
            b.box.h *= sy;
        }
        preds.push_back(std::move(pred));
    }
    return preds;
}

}  // namespace ctd::train
