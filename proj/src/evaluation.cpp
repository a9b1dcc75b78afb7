#include "ctd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "ctd/error.hpp"

namespace ctd::eval {

double iou(const Box& a, const Box& b) {
    check(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0, Error::Kind::validation,
          "degenerate box in IoU");
    return box_iou(a, b);
}

// ---- classification metrics -----------------------------------------------------

namespace {

int argmax3(const std::array<double, 3>& p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

ClassificationMetrics classification_metrics(const std::vector<ImagePrediction>& preds,
                                             const data::DatasetIndex& gts) {
    check(preds.size() == gts.records.size(), Error::Kind::validation,
          "prediction/ground-truth count mismatch");
    std::map<std::string, const ImagePrediction*> by_id;
    for (const ImagePrediction& p : preds) {
        check(by_id.emplace(p.image_id, &p).second, Error::Kind::validation,
              "duplicate prediction for image " + p.image_id);
    }

    int correct = 0;
    int confusion_pred[3] = {0, 0, 0};  // predicted-as counts
    int confusion_tp[3] = {0, 0, 0};
    int gt_count[3] = {0, 0, 0};
    int tb_correct = 0, nontb_correct = 0, tb_total = 0, nontb_total = 0;
    std::vector<std::pair<double, int>> scored;  // (p_tb, is_tb)

    for (const data::CxrRecord& r : gts.records) {
        auto it = by_id.find(r.image_id);
        check(it != by_id.end(), Error::Kind::validation,
              "missing prediction for image " + r.image_id);
        const int label = data::collapse3(r.image_class);
        const int pred = argmax3(it->second->class_probs);
        ++gt_count[label];
        ++confusion_pred[pred];
        if (pred == label) {
            ++correct;
            ++confusion_tp[label];
        }
        if (label == 2) {
            ++tb_total;
            if (pred == 2) ++tb_correct;
        } else {
            ++nontb_total;
            if (pred != 2) ++nontb_correct;
        }
        scored.push_back({it->second->class_probs[2], label == 2 ? 1 : 0});
    }

    ClassificationMetrics m;
    const int n = static_cast<int>(gts.records.size());
    m.accuracy = n > 0 ? 100.0 * correct / n : 0.0;
    m.sensitivity = tb_total > 0 ? 100.0 * tb_correct / tb_total : 0.0;
    m.specificity = nontb_total > 0 ? 100.0 * nontb_correct / nontb_total : 0.0;

    // AUC over the TB probability, rank-based with half credit for ties
    if (tb_total > 0 && nontb_total > 0) {
        std::sort(scored.begin(), scored.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        double rank_sum_pos = 0.0;
        size_t i = 0;
        while (i < scored.size()) {
            size_t j = i;
            while (j < scored.size() && scored[j].first == scored[i].first) ++j;
            const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
            for (size_t k = i; k < j; ++k)
                if (scored[k].second) rank_sum_pos += avg_rank;
            i = j;
        }
        const double u = rank_sum_pos - 0.5 * tb_total * (tb_total + 1.0);
        m.auc_tb = 100.0 * u / (static_cast<double>(tb_total) * nontb_total);
    } else {
        m.auc_tb = 50.0;  // undefined without both outcomes present
    }

    double ap = 0, ar = 0;
    for (int c = 0; c < 3; ++c) {
        ap += confusion_pred[c] > 0 ? static_cast<double>(confusion_tp[c]) / confusion_pred[c]
                                    : 0.0;
        ar += gt_count[c] > 0 ? static_cast<double>(confusion_tp[c]) / gt_count[c] : 0.0;
    }
    m.ap = 100.0 * ap / 3.0;
    m.ar = 100.0 * ar / 3.0;
    return m;
}

// ---- detection scene -------------------------------------------------------------

namespace {

struct Det {
    Box box;
    double score;
    int image;     // scene image index
    int64_t key;   // canonical tie-break (construction order)
};

struct Scene {
    std::vector<std::vector<Box>> gts;  // per image
    std::vector<Det> dets;              // unsorted; key ascending
    int total_gts = 0;
};

bool image_in_mode(const data::CxrRecord& r, EvalMode mode) {
    return mode == EvalMode::all || data::has_boxes(r.image_class);
}

bool image_in_view(const data::CxrRecord& r, CategoryView view) {
    // per-class views exclude uncertain-TB images entirely
    return view == CategoryView::category_agnostic ||
           r.image_class != data::ImageClass::tb_uncertain;
}

bool gt_in_view(const data::TbBox& b, CategoryView view) {
    switch (view) {
        case CategoryView::category_agnostic: return true;
        case CategoryView::active_tb:
            return b.tb_class.has_value() && *b.tb_class == data::TbClass::active_tb;
        case CategoryView::latent_tb:
            return b.tb_class.has_value() && *b.tb_class == data::TbClass::latent_tb;
    }
    return false;
}

bool det_in_view(const PredBox& b, CategoryView view) {
    switch (view) {
        case CategoryView::category_agnostic: return true;
        case CategoryView::active_tb: return b.tb_class == 0;
        case CategoryView::latent_tb: return b.tb_class == 1;
    }
    return false;
}

Scene build_scene(const std::vector<ImagePrediction>& preds, const data::DatasetIndex& gts,
                  CategoryView view, EvalMode mode) {
    std::map<std::string, const ImagePrediction*> by_id;
    for (const ImagePrediction& p : preds)
        check(by_id.emplace(p.image_id, &p).second, Error::Kind::validation,
              "duplicate prediction for image " + p.image_id);

    Scene scene;
    int64_t key = 0;
    for (const data::CxrRecord& r : gts.records) {
        if (!image_in_mode(r, mode) || !image_in_view(r, view)) continue;
        const int image = static_cast<int>(scene.gts.size());
        scene.gts.emplace_back();
        for (const data::TbBox& b : r.boxes)
            if (gt_in_view(b, view)) scene.gts.back().push_back({b.x, b.y, b.w, b.h});
        scene.total_gts += static_cast<int>(scene.gts.back().size());
        auto it = by_id.find(r.image_id);
        if (it == by_id.end()) continue;
        for (const PredBox& b : it->second->boxes)
            if (det_in_view(b, view)) scene.dets.push_back({b.box, b.score, image, key++});
    }
    return scene;
}

std::vector<int> canonical_order(const Scene& scene) {
    std::vector<int> order(scene.dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scene.dets[static_cast<size_t>(a)].score !=
            scene.dets[static_cast<size_t>(b)].score)
            return scene.dets[static_cast<size_t>(a)].score >
                   scene.dets[static_cast<size_t>(b)].score;
        return scene.dets[static_cast<size_t>(a)].key < scene.dets[static_cast<size_t>(b)].key;
    });
    return order;
}

/// Greedy matching at one IoU threshold; returns per-detection match
/// flags aligned with `order`.
std::vector<char> match_at(const Scene& scene, const std::vector<int>& order,
                           double thresh) {
    std::vector<std::vector<char>> gt_used(scene.gts.size());
    for (size_t i = 0; i < scene.gts.size(); ++i) gt_used[i].assign(scene.gts[i].size(), 0);
    std::vector<char> matched(order.size(), 0);
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const Det& d = scene.dets[static_cast<size_t>(order[oi])];
        const auto& boxes = scene.gts[static_cast<size_t>(d.image)];
        double best = 0.0;
        int best_g = -1;
        for (size_t g = 0; g < boxes.size(); ++g) {
            if (gt_used[static_cast<size_t>(d.image)][g]) continue;
            const double v = box_iou(d.box, boxes[g]);
            if (v > best) {
                best = v;
                best_g = static_cast<int>(g);
            }
        }
        if (best_g >= 0 && best >= thresh) {
            matched[oi] = 1;
            gt_used[static_cast<size_t>(d.image)][static_cast<size_t>(best_g)] = 1;
        }
    }
    return matched;
}

/// 101-point interpolated precision from ordered match flags.
PrCurve interpolated_curve(const std::vector<char>& matched, int total_gts) {
    PrCurve curve;
    if (total_gts <= 0) return curve;
    const size_t n = matched.size();
    std::vector<double> precision(n), recall(n);
    int tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += matched[i] ? 1 : 0;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / total_gts;
    }
    // envelope: running max from the high-recall end
    for (size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    size_t k = 0;
    for (int j = 0; j <= 100; ++j) {
        const double r = j / 100.0;
        while (k < n && recall[k] < r) ++k;
        curve.precision[static_cast<size_t>(j)] = k < n ? precision[k] : 0.0;
    }
    return curve;
}

double average_precision(const Scene& scene, const std::vector<int>& order, double thresh) {
    if (scene.total_gts == 0) return 0.0;
    const PrCurve curve = interpolated_curve(match_at(scene, order, thresh), scene.total_gts);
    double s = 0;
    for (double p : curve.precision) s += p;
    return s / 101.0;
}

}  // namespace

DetCell detection_ap(const std::vector<ImagePrediction>& preds,
                     const data::DatasetIndex& gts, CategoryView view, EvalMode mode) {
    const Scene scene = build_scene(preds, gts, view, mode);
    const std::vector<int> order = canonical_order(scene);
    DetCell cell;
    double sum = 0;
    for (int t = 0; t < 10; ++t) {
        const double thresh = 0.5 + 0.05 * t;
        const double ap = average_precision(scene, order, thresh);
        if (t == 0) cell.ap50 = 100.0 * ap;
        sum += ap;
    }
    cell.ap = 100.0 * sum / 10.0;
    return cell;
}

ErrorAnalysis error_analysis(const std::vector<ImagePrediction>& preds,
                             const data::DatasetIndex& gts, EvalMode mode) {
    const Scene scene = build_scene(preds, gts, CategoryView::category_agnostic, mode);
    const std::vector<int> order = canonical_order(scene);

    ErrorAnalysis ea;
    ea.c75 = interpolated_curve(match_at(scene, order, 0.75), scene.total_gts);
    ea.c50 = interpolated_curve(match_at(scene, order, 0.50), scene.total_gts);
    const std::vector<char> loc_matched = match_at(scene, order, 0.10);
    ea.loc = interpolated_curve(loc_matched, scene.total_gts);

    // background false positives removed: keep matched detections only
    std::vector<char> bg_flags;
    for (char m : loc_matched)
        if (m) bg_flags.push_back(1);
    ea.bg = interpolated_curve(bg_flags, scene.total_gts);

    // undetected targets patched with unit-score pseudo-detections
    std::vector<char> fn_flags(static_cast<size_t>(scene.total_gts), 1);
    ea.fn = interpolated_curve(fn_flags, scene.total_gts);
    if (scene.total_gts == 0) {
        // degenerate scene: keep all-zero curves
        ea.fn = PrCurve{};
    }
    return ea;
}

// ---- report ---------------------------------------------------------------------

namespace {
Json curve_json(const PrCurve& c) {
    Json arr = Json::array();
    for (double p : c.precision) arr.push_back(p);
    return arr;
}
}  // namespace

Json EvalReport::to_json() const {
    Json j;
    j["classification"] = {{"accuracy", classification.accuracy},
                           {"auc_tb", classification.auc_tb},
                           {"sensitivity", classification.sensitivity},
                           {"specificity", classification.specificity},
                           {"ap", classification.ap},
                           {"ar", classification.ar}};
    Json det = Json::object();
    for (const auto& [mode, views] : detection) {
        Json vm = Json::object();
        for (const auto& [view, cell] : views)
            vm[view] = {{"ap50", cell.ap50}, {"ap", cell.ap}};
        det[mode] = std::move(vm);
    }
    j["detection"] = std::move(det);
    Json ea = Json::object();
    for (const auto& [mode, curves] : error_analysis)
        ea[mode] = {{"c75", curve_json(curves.c75)},
                    {"c50", curve_json(curves.c50)},
                    {"loc", curve_json(curves.loc)},
                    {"bg", curve_json(curves.bg)},
                    {"fn", curve_json(curves.fn)}};
    j["error_analysis"] = std::move(ea);
    return j;
}

std::string EvalReport::classification_csv() const {
    char buf[256];
    std::string out = "accuracy,auc_tb,sensitivity,specificity,ap,ar\n";
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  classification.accuracy, classification.auc_tb,
                  classification.sensitivity, classification.specificity, classification.ap,
                  classification.ar);
    return out + buf;
}

std::string EvalReport::detection_csv() const {
    std::string out =
        "mode,category_agnostic_ap50,category_agnostic_ap,active_tb_ap50,active_tb_ap,"
        "latent_tb_ap50,latent_tb_ap\n";
    char buf[512];
    for (const auto& [mode, views] : detection) {
        const DetCell& ag = views.at("category_agnostic");
        const DetCell& ac = views.at("active_tb");
        const DetCell& la = views.at("latent_tb");
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n", mode.c_str(),
                      ag.ap50, ag.ap, ac.ap50, ac.ap, la.ap50, la.ap);
        out += buf;
    }
    return out;
}

// ---- predictions file -------------------------------------------------------------

std::vector<ImagePrediction> load_predictions(const std::filesystem::path& path) {
    const Json j = load_json(path);
    std::vector<ImagePrediction> preds;
    std::set<std::string> seen;
    try {
        for (const Json& p : j.at("predictions")) {
            ImagePrediction ip;
            ip.image_id = p.at("image_id").get<std::string>();
            check(seen.insert(ip.image_id).second, Error::Kind::validation,
                  "duplicate image_id in predictions: " + ip.image_id);
            auto probs = p.at("class_probs").get<std::vector<double>>();
            check(probs.size() == 3, Error::Kind::parse, "class_probs must have 3 entries");
            std::copy(probs.begin(), probs.end(), ip.class_probs.begin());
            const double sum = ip.class_probs[0] + ip.class_probs[1] + ip.class_probs[2];
            check(std::fabs(sum - 1.0) <= 1e-6, Error::Kind::validation,
                  ip.image_id + ": class_probs must sum to 1");
            for (const Json& b : p.at("boxes")) {
                auto bbox = b.at("bbox").get<std::vector<double>>();
                check(bbox.size() == 4, Error::Kind::parse, "bbox must have 4 entries");
                PredBox pb;
                pb.box = {bbox[0], bbox[1], bbox[2], bbox[3]};
                pb.tb_class =
                    data::tb_class_from(b.at("tb_class").get<std::string>()) ==
                            data::TbClass::latent_tb
                        ? 1
                        : 0;
                pb.score = b.at("score").get<double>();
                check(pb.score >= 0.0 && pb.score <= 1.0, Error::Kind::validation,
                      ip.image_id + ": score outside [0,1]");
                ip.boxes.push_back(pb);
            }
            preds.push_back(std::move(ip));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Error::Kind::parse, path.string() + ": " + e.what());
    }
    return preds;
}

void save_predictions(const std::filesystem::path& path,
                      const std::vector<ImagePrediction>& preds) {
    Json arr = Json::array();
    for (const ImagePrediction& p : preds) {
        Json boxes = Json::array();
        for (const PredBox& b : p.boxes)
            boxes.push_back({{"bbox", {b.box.x, b.box.y, b.box.w, b.box.h}},
                             {"tb_class", b.tb_class == 1 ? "latent_tb" : "active_tb"},
                             {"score", b.score}});
        arr.push_back({{"image_id", p.image_id},
                       {"class_probs", p.class_probs},
                       {"boxes", std::move(boxes)}});
    }
    save_json(path, Json{{"predictions", std::move(arr)}});
}

// ---- evaluate --------------------------------------------------------------------

namespace {

void assert_filtered(const std::vector<ImagePrediction>& preds) {
    for (const ImagePrediction& p : preds)
        if (argmax3(p.class_probs) != 2 && !p.boxes.empty())
            throw Error(Error::Kind::protocol,
                        "all-mode evaluation requires filtered predictions, but image " +
                            p.image_id + " is classified non-TB and still carries boxes");
}

std::vector<ImagePrediction> apply_filter(std::vector<ImagePrediction> preds) {
    for (ImagePrediction& p : preds)
        if (argmax3(p.class_probs) != 2) p.boxes.clear();
    return preds;
}

void fill_mode(EvalReport& report, const std::vector<ImagePrediction>& preds,
               const data::DatasetIndex& gts, EvalMode mode) {
    const std::string name = mode == EvalMode::all ? "all" : "only_tb";
    auto& views = report.detection[name];
    views["category_agnostic"] = detection_ap(preds, gts, CategoryView::category_agnostic, mode);
    views["active_tb"] = detection_ap(preds, gts, CategoryView::active_tb, mode);
    views["latent_tb"] = detection_ap(preds, gts, CategoryView::latent_tb, mode);
    report.error_analysis[name] = error_analysis(preds, gts, mode);
}

}  // namespace

EvalReport evaluate(const std::vector<ImagePrediction>& preds,
                    const data::DatasetIndex& gts, ModeFlag mode) {
    EvalReport report;
    report.classification = classification_metrics(preds, gts);
    switch (mode) {
        case ModeFlag::all:
            assert_filtered(preds);
            fill_mode(report, preds, gts, EvalMode::all);
            break;
        case ModeFlag::only_tb:
            fill_mode(report, preds, gts, EvalMode::only_tb);
            break;
        case ModeFlag::both: {
            fill_mode(report, apply_filter(preds), gts, EvalMode::all);
            fill_mode(report, preds, gts, EvalMode::only_tb);
            break;
        }
    }
    return report;
}

EvalReport evaluate_run(const std::filesystem::path& predictions_path,
                        const std::filesystem::path& annotations_path, ModeFlag mode) {
    const auto preds = load_predictions(predictions_path);
    const auto gts = data::load_dataset(annotations_path);
    return evaluate(preds, gts, mode);
}

// ---- SVG plot ---------------------------------------------------------------------

std::string pr_curves_svg(const ErrorAnalysis& ea, const std::string& title) {
    const int width = 480, height = 380;
    const int x0 = 56, y0 = 36, pw = 380, ph = 280;
    const struct {
        const char* name;
        const char* color;
        const PrCurve* curve;
    } series[5] = {{"C75", "#c0392b", &ea.c75},
                   {"C50", "#e67e22", &ea.c50},
                   {"Loc", "#27ae60", &ea.loc},
                   {"BG", "#2980b9", &ea.bg},
                   {"FN", "#8e44ad", &ea.fn}};

    std::string svg;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n",
                  width, height);
    svg += buf;
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\">%s"
                  "</text>\n",
                  x0, title.c_str());
    svg += buf;
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                  "stroke=\"#333\"/>\n",
                  x0, y0, pw, ph);
    svg += buf;
    for (int g = 0; g <= 4; ++g) {
        const double frac = g / 4.0;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"10\" "
                      "text-anchor=\"middle\">%.2f</text>\n",
                      x0 + static_cast<int>(frac * pw), y0 + ph + 14, frac);
        svg += buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"10\" "
                      "text-anchor=\"end\">%.2f</text>\n",
                      x0 - 4, y0 + ph - static_cast<int>(frac * ph) + 4, frac);
        svg += buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                  "text-anchor=\"middle\">recall</text>\n",
                  x0 + pw / 2, y0 + ph + 30);
    svg += buf;
    for (int s = 0; s < 5; ++s) {
        std::string points;
        for (int j = 0; j <= 100; ++j) {
            const double x = x0 + pw * (j / 100.0);
            const double y = y0 + ph * (1.0 - series[s].curve->precision[static_cast<size_t>(j)]);
            std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", x, y);
            points += buf;
        }
        std::snprintf(buf, sizeof(buf),
                      "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" "
                      "stroke-width=\"1.5\"/>\n",
                      points.c_str(), series[s].color);
        svg += buf;
        std::snprintf(buf, sizeof(buf),
                      "<text x=\"%d\" y=\"%d\" font-family=\"sans-serif\" font-size=\"11\" "
                      "fill=\"%s\">%s: %.3f</text>\n",
                      x0 + pw - 90, y0 + 16 + 14 * s, series[s].color, series[s].name,
                      series[s].curve->mean());
        svg += buf;
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace ctd::eval
