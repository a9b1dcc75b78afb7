#include "ctd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ctd/error.hpp"

namespace ctd::net {

// ---- ModelConfig ---------------------------------------------------------------

ModelConfig ModelConfig::tiny() {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::tiny();
    cfg.fpn_channels = 32;
    cfg.sas.channels = 32;
    cfg.cls_head = {128, 5, 0};
    return cfg;
}

ModelConfig ModelConfig::full() {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::resnet50_compatible();
    cfg.fpn_channels = 256;
    cfg.sas.channels = 256;
    cfg.cls_head = {512, 5, 3};
    return cfg;
}

namespace {

std::string attention_name(attn::AttentionKind k) {
    switch (k) {
        case attn::AttentionKind::none: return "none";
        case attn::AttentionKind::vanilla: return "vanilla";
        case attn::AttentionKind::symmetric: return "symmetric";
    }
    return "?";
}

std::string encoding_name(attn::EncodingKind k) {
    switch (k) {
        case attn::EncodingKind::none: return "none";
        case attn::EncodingKind::ape: return "ape";
        case attn::EncodingKind::rpe: return "rpe";
        case attn::EncodingKind::spe: return "spe";
    }
    return "?";
}

attn::AttentionKind attention_from(const std::string& s) {
    if (s == "none") return attn::AttentionKind::none;
    if (s == "vanilla") return attn::AttentionKind::vanilla;
    if (s == "symmetric") return attn::AttentionKind::symmetric;
    throw Error(Error::Kind::config, "unknown attention kind: " + s);
}

attn::EncodingKind encoding_from(const std::string& s) {
    if (s == "none") return attn::EncodingKind::none;
    if (s == "ape") return attn::EncodingKind::ape;
    if (s == "rpe") return attn::EncodingKind::rpe;
    if (s == "spe") return attn::EncodingKind::spe;
    throw Error(Error::Kind::config, "unknown encoding kind: " + s);
}

}  // namespace

Json ModelConfig::to_json() const {
    Json j;
    j["backbone"] = {{"stem_channels", backbone.stem_channels},
                     {"stage_channels", backbone.stage_channels},
                     {"stage_blocks", backbone.stage_blocks},
                     {"bottleneck", backbone.bottleneck},
                     {"deep_stem", backbone.deep_stem}};
    j["fpn_channels"] = fpn_channels;
    j["sas"] = {{"heads", sas.heads},
                {"points", sas.points},
                {"attention", attention_name(sas.attention)},
                {"encoding", encoding_name(sas.encoding)},
                {"spe_stn", sas.spe_stn},
                {"spe_side", sas.spe_side == enc::SpeSide::right_to_left ? "right_to_left"
                                                                         : "left_to_right"}};
    j["anchors"] = {{"ratios", anchors.ratios},
                    {"scales", anchors.scales},
                    {"base_factor", anchors.base_factor}};
    j["cls_head"] = {{"channels", cls_head.channels},
                     {"convs", cls_head.convs},
                     {"pools", cls_head.pools}};
    j["tower_depth"] = tower_depth;
    j["prior_prob"] = prior_prob;
    j["score_thresh"] = score_thresh;
    j["nms_iou"] = nms_iou;
    j["max_detections"] = max_detections;
    return j;
}

ModelConfig ModelConfig::from_json(const Json& j) {
    ModelConfig cfg;
    const Json& b = j.at("backbone");
    cfg.backbone.stem_channels = b.at("stem_channels").get<int>();
    auto sc = b.at("stage_channels").get<std::vector<int>>();
    auto sb = b.at("stage_blocks").get<std::vector<int>>();
    check(sc.size() == 4 && sb.size() == 4, Error::Kind::config,
          "backbone needs exactly 4 stages");
    std::copy(sc.begin(), sc.end(), cfg.backbone.stage_channels.begin());
    std::copy(sb.begin(), sb.end(), cfg.backbone.stage_blocks.begin());
    cfg.backbone.bottleneck = b.at("bottleneck").get<bool>();
    cfg.backbone.deep_stem = b.at("deep_stem").get<bool>();
    cfg.fpn_channels = j.at("fpn_channels").get<int>();
    const Json& s = j.at("sas");
    cfg.sas.channels = cfg.fpn_channels;
    cfg.sas.heads = s.at("heads").get<int>();
    cfg.sas.points = s.at("points").get<int>();
    cfg.sas.attention = attention_from(s.at("attention").get<std::string>());
    cfg.sas.encoding = encoding_from(s.at("encoding").get<std::string>());
    cfg.sas.spe_stn = s.at("spe_stn").get<bool>();
    cfg.sas.spe_side = s.at("spe_side").get<std::string>() == "left_to_right"
                           ? enc::SpeSide::left_to_right
                           : enc::SpeSide::right_to_left;
    const Json& a = j.at("anchors");
    cfg.anchors.ratios = a.at("ratios").get<std::vector<double>>();
    cfg.anchors.scales = a.at("scales").get<std::vector<double>>();
    cfg.anchors.base_factor = a.at("base_factor").get<double>();
    const Json& c = j.at("cls_head");
    cfg.cls_head.channels = c.at("channels").get<int>();
    cfg.cls_head.convs = c.at("convs").get<int>();
    cfg.cls_head.pools = c.at("pools").get<int>();
    cfg.tower_depth = j.at("tower_depth").get<int>();
    cfg.prior_prob = j.at("prior_prob").get<double>();
    cfg.score_thresh = j.at("score_thresh").get<double>();
    cfg.nms_iou = j.at("nms_iou").get<double>();
    cfg.max_detections = j.at("max_detections").get<int>();
    return cfg;
}

// ---- SymFormer ------------------------------------------------------------------

SymFormer::SymFormer(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    check(cfg.fpn_channels % cfg.sas.heads == 0, Error::Kind::config,
          "FPN channels must be divisible by the head count");
    Rng rng(seed);
    backbone_.init(registry_, cfg.backbone, rng);
    fpn_.init(registry_, cfg.backbone.stage_channels, cfg.fpn_channels, rng);
    if (cfg.sas.attention != attn::AttentionKind::none) {
        has_sas_ = true;
        attn::SasConfig sc = cfg.sas;
        sc.channels = cfg.fpn_channels;
        sas_.init(registry_, "sas", sc, rng);
    }
    det_.init(registry_, cfg.fpn_channels, cfg.anchors.anchors_per_cell(), cfg.tower_depth,
              cfg.prior_prob, rng);
    cls_.init(registry_, cfg.fpn_channels, cfg.cls_head, rng);
}

RawOutputs SymFormer::forward(const Tensor& image, Cache* cache, bool with_cls) const {
    check(image.ndim() == 3 && image.dim(0) == 1, Error::Kind::shape,
          "expected a [1,H,W] grayscale image, got " + image.shape_str());
    const int h = image.dim(1), w = image.dim(2);

    // replicate to three standardized channels
    Tensor rgb({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h * w; ++i)
            rgb[static_cast<int64_t>(c) * h * w + i] = (image[i] - 0.5) / 0.25;

    auto stages = backbone_.forward(rgb, cache ? &cache->backbone : nullptr);
    auto pyramid = fpn_.forward(stages, cache ? &cache->fpn : nullptr);
    std::array<Tensor, 4> enhanced;
    if (has_sas_) {
        if (cache) cache->sas.resize(4);
        for (int i = 0; i < 4; ++i)
            enhanced[static_cast<size_t>(i)] = sas_.forward(
                pyramid[static_cast<size_t>(i)], cache ? &cache->sas[static_cast<size_t>(i)] : nullptr);
    } else {
        enhanced = pyramid;
    }

    RawOutputs raw;
    if (cache) cache->det.resize(4);
    for (int i = 0; i < 4; ++i) {
        auto out = det_.forward(enhanced[static_cast<size_t>(i)],
                                cache ? &cache->det[static_cast<size_t>(i)] : nullptr);
        raw.cls_logits.push_back(std::move(out.cls_logits));
        raw.box_deltas.push_back(std::move(out.box_deltas));
    }
    if (with_cls)
        raw.image_logits = cls_.forward(enhanced[3], cache ? &cache->cls : nullptr);
    if (cache) {
        cache->pyramid = std::move(pyramid);
        cache->enhanced = std::move(enhanced);
    }
    return raw;
}

void SymFormer::backward_detection(const std::vector<Tensor>& dcls,
                                   const std::vector<Tensor>& dbox, const Cache& cache,
                                   nn::Grads& grads) const {
    std::array<Tensor, 4> dlevels;
    for (int i = 0; i < 4; ++i)
        dlevels[static_cast<size_t>(i)] =
            det_.backward(dcls[static_cast<size_t>(i)], dbox[static_cast<size_t>(i)],
                          cache.det[static_cast<size_t>(i)], grads);
    if (has_sas_)
        for (int i = 0; i < 4; ++i)
            dlevels[static_cast<size_t>(i)] = sas_.backward(
                dlevels[static_cast<size_t>(i)], cache.sas[static_cast<size_t>(i)], grads);
    auto dstages = fpn_.backward(dlevels, cache.fpn, grads);
    backbone_.backward(dstages, cache.backbone, grads);
}

void SymFormer::backward_classification(const Tensor& dlogits, const Cache& cache,
                                        nn::Grads& grads) const {
    cls_.backward(dlogits, cache.cls, grads);
}

Tensor SymFormer::enhanced_top(const Tensor& image) const {
    check(image.ndim() == 3 && image.dim(0) == 1, Error::Kind::shape,
          "expected a [1,H,W] grayscale image");
    const int h = image.dim(1), w = image.dim(2);
    Tensor rgb({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h * w; ++i)
            rgb[static_cast<int64_t>(c) * h * w + i] = (image[i] - 0.5) / 0.25;
    auto stages = backbone_.forward(rgb, nullptr);
    auto pyramid = fpn_.forward(stages, nullptr);
    return has_sas_ ? sas_.forward(pyramid[3], nullptr) : pyramid[3];
}

Tensor SymFormer::classify(const Tensor& top, ClassificationHead::Cache* cache) const {
    return cls_.forward(top, cache);
}

void SymFormer::backward_classify(const Tensor& dlogits,
                                  const ClassificationHead::Cache& cache,
                                  nn::Grads& grads) const {
    cls_.backward(dlogits, cache, grads);
}

std::vector<std::string> SymFormer::classification_param_names() const {
    std::vector<std::string> names;
    for (const nn::Param* p : registry_.all())
        if (p->name.rfind("cls.", 0) == 0) names.push_back(p->name);
    return names;
}

// ---- postprocess ----------------------------------------------------------------

namespace {
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace

ImagePrediction postprocess(const RawOutputs& raw, const ModelConfig& cfg,
                            PredictMode mode, int image_w, int image_h,
                            const std::string& image_id) {
    check(raw.image_logits.numel() == 3, Error::Kind::shape,
          "postprocess requires image-level logits");

    struct Candidate {
        Box box;
        int tb_class;
        double score;
        int64_t order;  // deterministic tie-break key
    };
    std::vector<Candidate> candidates;

    const int per_cell = cfg.anchors.anchors_per_cell();
    int64_t running = 0;
    for (int level = 0; level < 4; ++level) {
        const Tensor& logits = raw.cls_logits[static_cast<size_t>(level)];
        const Tensor& deltas = raw.box_deltas[static_cast<size_t>(level)];
        const int grid_h = logits.dim(1), grid_w = logits.dim(2);
        auto anchors = generate_anchors(level + 1, image_w, image_h, cfg.anchors);
        for (int gy = 0; gy < grid_h; ++gy) {
            for (int gx = 0; gx < grid_w; ++gx) {
                for (int a = 0; a < per_cell; ++a) {
                    const size_t anchor_idx =
                        (static_cast<size_t>(gy) * grid_w + gx) * per_cell + a;
                    for (int c = 0; c < 2; ++c) {
                        const double score = sigmoid(logits.at(a * 2 + c, gy, gx));
                        ++running;
                        if (score < cfg.score_thresh) continue;
                        std::array<double, 4> d = {deltas.at(a * 4 + 0, gy, gx),
                                                   deltas.at(a * 4 + 1, gy, gx),
                                                   deltas.at(a * 4 + 2, gy, gx),
                                                   deltas.at(a * 4 + 3, gy, gx)};
                        candidates.push_back({decode_box(anchors[anchor_idx], d, image_w,
                                                         image_h),
                                              c, score, running});
                    }
                }
            }
        }
    }

    // score-descending order with a stable positional tie-break
    std::vector<int> order(candidates.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
        if (candidates[static_cast<size_t>(lhs)].score !=
            candidates[static_cast<size_t>(rhs)].score)
            return candidates[static_cast<size_t>(lhs)].score >
                   candidates[static_cast<size_t>(rhs)].score;
        return candidates[static_cast<size_t>(lhs)].order <
               candidates[static_cast<size_t>(rhs)].order;
    });

    // per-class NMS
    std::vector<int> kept_all;
    for (int c = 0; c < 2; ++c) {
        std::vector<Box> boxes;
        std::vector<int> cls_order, back;
        for (int idx : order) {
            if (candidates[static_cast<size_t>(idx)].tb_class != c) continue;
            cls_order.push_back(static_cast<int>(boxes.size()));
            boxes.push_back(candidates[static_cast<size_t>(idx)].box);
            back.push_back(idx);
        }
        for (int kept : nms(boxes, cls_order, cfg.nms_iou))
            kept_all.push_back(back[static_cast<size_t>(kept)]);
    }
    std::sort(kept_all.begin(), kept_all.end(), [&](int lhs, int rhs) {
        if (candidates[static_cast<size_t>(lhs)].score !=
            candidates[static_cast<size_t>(rhs)].score)
            return candidates[static_cast<size_t>(lhs)].score >
                   candidates[static_cast<size_t>(rhs)].score;
        return candidates[static_cast<size_t>(lhs)].order <
               candidates[static_cast<size_t>(rhs)].order;
    });
    if (static_cast<int>(kept_all.size()) > cfg.max_detections)
        kept_all.resize(static_cast<size_t>(cfg.max_detections));

    ImagePrediction pred;
    pred.image_id = image_id;
    // image-level probabilities
    double mx = std::max({raw.image_logits[0], raw.image_logits[1], raw.image_logits[2]});
    double denom = 0.0;
    for (int i = 0; i < 3; ++i) {
        pred.class_probs[static_cast<size_t>(i)] = std::exp(raw.image_logits[i] - mx);
        denom += pred.class_probs[static_cast<size_t>(i)];
    }
    for (auto& p : pred.class_probs) p /= denom;

    const int arg = static_cast<int>(std::max_element(pred.class_probs.begin(),
                                                      pred.class_probs.end()) -
                                     pred.class_probs.begin());
    if (mode == PredictMode::filtered && arg != 2) return pred;  // boxes discarded

    for (int idx : kept_all) {
        const Candidate& c = candidates[static_cast<size_t>(idx)];
        pred.boxes.push_back({c.box, c.tb_class, c.score});
    }
    return pred;
}

// ---- checkpoint ------------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'C', 'T', 'D', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const SymFormer& model,
                     const Json& extra) {
    Json header;
    header["format_version"] = 1;
    header["model_config"] = model.config().to_json();
    header["extra"] = extra;
    Json params = Json::array();
    int64_t offset = 0;
    for (const nn::Param* p : model.params().all()) {
        params.push_back({{"name", p->name},
                          {"shape", p->value.shape()},
                          {"offset", offset},
                          {"count", p->value.numel()}});
        offset += p->value.numel();
    }
    header["params"] = std::move(params);
    const std::string header_str = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    check(f.good(), Error::Kind::io, "cannot write " + path.string());
    f.write(kMagic, 8);
    uint64_t hlen = header_str.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const nn::Param* p : model.params().all())
        f.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    check(f.good(), Error::Kind::io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), Error::Kind::io, "cannot open checkpoint " + path.string());
    char magic[8];
    f.read(magic, 8);
    check(f.good() && std::memcmp(magic, kMagic, 8) == 0, Error::Kind::parse,
          path.string() + ": not a checkpoint file");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header_str(hlen, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(hlen));
    check(f.good(), Error::Kind::parse, "truncated checkpoint header");
    Json header;
    try {
        header = Json::parse(header_str);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Error::Kind::parse, path.string() + ": bad header: " + e.what());
    }
    check(header.at("format_version").get<int>() == 1, Error::Kind::parse,
          "unsupported checkpoint version");

    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_json(header.at("model_config"));
    ckpt.extra = header.value("extra", Json::object());
    for (const Json& p : header.at("params")) {
        Tensor t(p.at("shape").get<std::vector<int>>());
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(double)));
        check(f.good(), Error::Kind::parse, "truncated checkpoint data");
        ckpt.tensors.emplace(p.at("name").get<std::string>(), std::move(t));
    }
    return ckpt;
}

void load_state(SymFormer& model, const Checkpoint& ckpt) {
    for (nn::Param* p : model.params().all()) {
        auto it = ckpt.tensors.find(p->name);
        check(it != ckpt.tensors.end(), Error::Kind::validation,
              "checkpoint missing parameter " + p->name);
        check(it->second.same_shape(p->value), Error::Kind::validation,
              "checkpoint shape mismatch for " + p->name);
        p->value = it->second;
    }
}

}  // namespace ctd::net
