// Command-line entry point for the chest X-ray TB analysis toolkit:
// dataset synthesis/validation, two-stage training, prediction,
// benchmark evaluation, error-analysis plots, and the ablation grid.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ctd/error.hpp"
#include "ctd/evaluation.hpp"
#include "ctd/synthetic.hpp"
#include "ctd/training.hpp"

namespace fs = std::filesystem;
using ctd::Error;
using ctd::Json;

namespace {

// ---- config handling ------------------------------------------------------------

Json default_config() {
    Json synth_counts = {{"healthy", 200},          {"sick_non_tb", 200},
                         {"tb_active", 150},        {"tb_latent", 30},
                         {"tb_active_latent", 20},  {"tb_uncertain", 0}};
    return Json{
        {"seed", 0},
        {"synth",
         {{"image_size", 64},
          {"lesion_count", {1, 3}},
          {"lesion_size", {10.0, 22.0}},
          {"lesion_contrast", {0.30, 0.55}},
          {"background_amplitude", 0.45},
          {"jitter_px", 1.5},
          {"splits",
           {{"train", synth_counts},
            {"val",
             {{"healthy", 60},        {"sick_non_tb", 60},      {"tb_active", 45},
              {"tb_latent", 10},      {"tb_active_latent", 5},  {"tb_uncertain", 0}}},
            {"test",
             {{"healthy", 60},        {"sick_non_tb", 60},      {"tb_active", 45},
              {"tb_latent", 10},      {"tb_active_latent", 5},  {"tb_uncertain", 4}}}}}}},
        {"model",
         {{"preset", "tiny"},
          {"sas",
           {{"attention", "symmetric"},
            {"encoding", "spe"},
            {"spe_stn", true},
            {"spe_side", "right_to_left"},
            {"heads", 8},
            {"points", 4}}}}},
        {"train",
         {{"input_size", 64},
          {"batch_size", 16},
          {"epochs", 24},
          {"lr", 1e-3},
          {"warmup_iters", 50},
          {"stages", {1, 2}},
          {"stage1", {{"iterations", 500}}},
          {"stage2", {{"iterations", 200}}}}},
        {"data", {{"dir", "data"}, {"train", "train"}, {"val", "val"}, {"test", "test"}}},
        {"ablate", {{"iterations", 60}, {"eval_split", "val"}}},
    };
}

// key paths accepted in config files and --set overrides
const std::vector<std::string> kAllowedKeys = {
    "seed",
    "synth.image_size", "synth.lesion_count", "synth.lesion_size",
    "synth.lesion_contrast", "synth.background_amplitude", "synth.jitter_px",
    "synth.splits.*.healthy", "synth.splits.*.sick_non_tb", "synth.splits.*.tb_active",
    "synth.splits.*.tb_latent", "synth.splits.*.tb_active_latent",
    "synth.splits.*.tb_uncertain",
    "model.preset", "model.fpn_channels", "model.tower_depth", "model.prior_prob",
    "model.score_thresh", "model.nms_iou", "model.max_detections",
    "model.sas.attention", "model.sas.encoding", "model.sas.spe_stn", "model.sas.spe_side",
    "model.sas.heads", "model.sas.points",
    "model.cls_head.channels", "model.cls_head.convs", "model.cls_head.pools",
    "model.anchors.ratios", "model.anchors.scales", "model.anchors.base_factor",
    "train.input_size", "train.batch_size", "train.epochs", "train.lr",
    "train.lr_drop_epochs", "train.lr_drop_factor", "train.momentum",
    "train.weight_decay", "train.flip_prob", "train.warmup_iters", "train.warmup_factor",
    "train.clip_norm", "train.focal_alpha", "train.focal_gamma", "train.smooth_l1_beta",
    "train.pos_iou", "train.neg_iou", "train.stages", "train.stage1_checkpoint",
    "train.stage1.iterations", "train.stage2.iterations",
    "data.dir", "data.train", "data.val", "data.test",
    "ablate.iterations", "ablate.eval_split",
};

bool path_allowed(const std::string& path) {
    for (const std::string& pattern : kAllowedKeys) {
        // '*' matches one path segment
        size_t pi = 0, si = 0;
        bool ok = true;
        while (ok && pi < pattern.size()) {
            if (pattern[pi] == '*') {
                while (si < path.size() && path[si] != '.') ++si;
                ++pi;
            } else if (si < path.size() && pattern[pi] == path[si]) {
                ++pi;
                ++si;
            } else {
                ok = false;
            }
        }
        if (ok && si == path.size() && pi == pattern.size()) return true;
    }
    return false;
}

void collect_leaf_paths(const Json& j, const std::string& prefix,
                        std::vector<std::string>* out) {
    if (!j.is_object()) {
        out->push_back(prefix);
        return;
    }
    for (const auto& [key, value] : j.items())
        collect_leaf_paths(value, prefix.empty() ? key : prefix + "." + key, out);
}

void check_known_keys(const Json& cfg) {
    std::vector<std::string> paths;
    collect_leaf_paths(cfg, "", &paths);
    for (const std::string& p : paths)
        if (!path_allowed(p))
            throw CLI::ValidationError("unknown config key: " + p);
}

void deep_merge(Json& base, const Json& overlay) {
    for (const auto& [key, value] : overlay.items()) {
        if (value.is_object() && base.contains(key) && base[key].is_object())
            deep_merge(base[key], value);
        else
            base[key] = value;
    }
}

void set_dotted(Json& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw CLI::ValidationError("--set expects key=value, got: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    if (!path_allowed(path)) throw CLI::ValidationError("unknown config key: " + path);
    Json value;
    try {
        value = Json::parse(raw);
    } catch (...) {
        value = raw;  // plain string
    }
    Json* node = &cfg;
    size_t start = 0;
    while (true) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "out";
    int64_t seed = -1;  // -1: use config seed

    Json resolve(const std::string& command) const {
        Json cfg = default_config();
        if (!config_path.empty()) {
            Json file = ctd::load_json(config_path);
            check_known_keys(file);
            deep_merge(cfg, file);
        }
        for (const std::string& s : sets) set_dotted(cfg, s);
        if (seed >= 0) cfg["seed"] = seed;
        check_known_keys(cfg);
        Json snapshot;
        snapshot["command"] = command;
        snapshot["config"] = cfg;
        ctd::save_json(fs::path(out_dir) / "resolved_config.json", snapshot);
        return cfg;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "JSON configuration file");
    app->add_option("--set", c.sets, "dotted key=value config override")->take_all();
    app->add_option("--out", c.out_dir, "output directory");
    app->add_option("--seed", c.seed, "seed override");
}

// ---- config -> objects -----------------------------------------------------------

ctd::data::SynthConfig synth_config(const Json& cfg, const std::string& split,
                                    uint64_t seed) {
    const Json& s = cfg.at("synth");
    ctd::data::SynthConfig sc;
    sc.image_size = s.at("image_size").get<int>();
    sc.lesion_count_min = s.at("lesion_count")[0].get<int>();
    sc.lesion_count_max = s.at("lesion_count")[1].get<int>();
    sc.lesion_size_min = s.at("lesion_size")[0].get<double>();
    sc.lesion_size_max = s.at("lesion_size")[1].get<double>();
    sc.lesion_contrast_min = s.at("lesion_contrast")[0].get<double>();
    sc.lesion_contrast_max = s.at("lesion_contrast")[1].get<double>();
    sc.background_amplitude = s.at("background_amplitude").get<double>();
    sc.jitter_px = s.at("jitter_px").get<double>();
    sc.split = split;
    sc.seed = seed;
    const Json& counts = s.at("splits").at(split);
    for (const auto& [name, n] : counts.items())
        sc.counts[ctd::data::image_class_from(name)] = n.get<int>();
    return sc;
}

ctd::net::ModelConfig model_config(const Json& cfg) {
    const Json& m = cfg.at("model");
    const std::string preset = m.value("preset", "tiny");
    ctd::net::ModelConfig mc;
    if (preset == "tiny")
        mc = ctd::net::ModelConfig::tiny();
    else if (preset == "full")
        mc = ctd::net::ModelConfig::full();
    else
        throw Error(Error::Kind::config, "unknown model preset: " + preset);
    // apply overrides through the JSON round trip
    Json j = mc.to_json();
    Json overlay = m;
    overlay.erase("preset");
    deep_merge(j, overlay);
    return ctd::net::ModelConfig::from_json(j);
}

ctd::train::TrainConfig train_config(const Json& cfg, int stage, uint64_t seed) {
    Json t = cfg.at("train");
    Json stage_overrides =
        t.value(stage == 1 ? "stage1" : "stage2", Json::object());
    t.erase("stages");
    t.erase("stage1");
    t.erase("stage2");
    t.erase("stage1_checkpoint");
    deep_merge(t, stage_overrides);
    ctd::train::TrainConfig tc = ctd::train::TrainConfig::from_json(t);
    tc.seed = seed + static_cast<uint64_t>(stage);
    return tc;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    ctd::check(f.good(), Error::Kind::io, "cannot write " + path.string());
    f << text;
    ctd::check(f.good(), Error::Kind::io, "write failed for " + path.string());
}

ctd::eval::ModeFlag mode_flag_from(const std::string& s) {
    if (s == "all") return ctd::eval::ModeFlag::all;
    if (s == "only_tb") return ctd::eval::ModeFlag::only_tb;
    if (s == "both") return ctd::eval::ModeFlag::both;
    throw CLI::ValidationError("unknown evaluation mode: " + s);
}

// ---- subcommand bodies -------------------------------------------------------------

int run_synth(const Common& common) {
    const Json cfg = common.resolve("synth");
    const uint64_t seed = cfg.at("seed").get<uint64_t>();
    const fs::path out = common.out_dir;
    for (const auto& [split, counts] : cfg.at("synth").at("splits").items()) {
        (void)counts;
        auto sc = synth_config(cfg, split, seed);
        auto index = ctd::data::generate_synthetic(sc, out);
        std::printf("synth: wrote %zu records to %s\n", index.records.size(),
                    (out / (split + ".json")).string().c_str());
    }
    return 0;
}

int run_validate(const Common& common, const std::string& ann_path) {
    common.resolve("validate");
    auto index = ctd::data::load_dataset(ann_path);
    auto stats = ctd::data::split_stats(index);
    std::printf("valid: %d records in split '%s'\n", stats.total, index.split.c_str());
    for (const auto& [cls, n] : stats.per_class)
        std::printf("  %-18s %d\n", ctd::data::to_string(cls), n);
    return 0;
}

int run_train(const Common& common) {
    const Json cfg = common.resolve("train");
    const uint64_t seed = cfg.at("seed").get<uint64_t>();
    const fs::path out = common.out_dir;
    const fs::path data_dir = cfg.at("data").at("dir").get<std::string>();
    const std::string train_split = cfg.at("data").at("train").get<std::string>();
    auto index = ctd::data::load_dataset(data_dir / (train_split + ".json"), train_split);

    auto model = std::make_unique<ctd::net::SymFormer>(model_config(cfg), seed);
    const auto stages = cfg.at("train").at("stages").get<std::vector<int>>();
    const bool do_stage1 = std::count(stages.begin(), stages.end(), 1) > 0;
    const bool do_stage2 = std::count(stages.begin(), stages.end(), 2) > 0;

    if (!do_stage1) {
        const std::string ckpt_path =
            cfg.at("train").value("stage1_checkpoint", (out / "stage1.ckpt").string());
        auto ckpt = ctd::net::load_checkpoint(ckpt_path);
        ctd::net::load_state(*model, ckpt);
        std::printf("train: loaded stage-1 checkpoint %s\n", ckpt_path.c_str());
    } else {
        auto rows = ctd::train::train_stage1(*model, index, data_dir,
                                             train_config(cfg, 1, seed));
        write_text(out / "loss_stage1.csv", ctd::train::loss_rows_csv(rows));
        ctd::net::save_checkpoint(out / "stage1.ckpt", *model,
                                  Json{{"stage", 1}, {"seed", seed}});
        std::printf("train: stage 1 done (%zu iterations), final loss %.4f\n", rows.size(),
                    rows.empty() ? 0.0 : rows.back().total);
    }
    if (do_stage2) {
        auto rows = ctd::train::train_stage2(*model, index, data_dir,
                                             train_config(cfg, 2, seed));
        write_text(out / "loss_stage2.csv", ctd::train::loss_rows_csv(rows));
        ctd::net::save_checkpoint(out / "stage2.ckpt", *model,
                                  Json{{"stage", 2}, {"seed", seed}});
        std::printf("train: stage 2 done (%zu iterations), final loss %.4f\n", rows.size(),
                    rows.empty() ? 0.0 : rows.back().total);
    }
    return 0;
}

int run_predict(const Common& common, const std::string& ckpt_path,
                const std::string& ann_path, const std::string& images_root,
                const std::string& mode) {
    const Json cfg = common.resolve("predict");
    ctd::net::PredictMode pm;
    if (mode == "filtered")
        pm = ctd::net::PredictMode::filtered;
    else if (mode == "unfiltered")
        pm = ctd::net::PredictMode::unfiltered;
    else
        throw CLI::ValidationError("--mode must be filtered or unfiltered");

    auto ckpt = ctd::net::load_checkpoint(ckpt_path);
    auto model = std::make_unique<ctd::net::SymFormer>(ckpt.config, /*seed=*/0);
    ctd::net::load_state(*model, ckpt);
    auto index = ctd::data::load_dataset(ann_path);
    const fs::path root =
        images_root.empty() ? fs::path(ann_path).parent_path() : fs::path(images_root);
    const int input_size = cfg.at("train").at("input_size").get<int>();
    auto preds = ctd::train::predict_dataset(*model, index, root, input_size, pm);
    const fs::path out = fs::path(common.out_dir) / "predictions.json";
    ctd::eval::save_predictions(out, preds);
    std::printf("predict: wrote %zu predictions to %s\n", preds.size(), out.string().c_str());
    return 0;
}

int run_evaluate(const Common& common, const std::string& pred_path,
                 const std::string& ann_path, const std::string& mode, bool with_plots) {
    common.resolve(with_plots ? "analyze" : "evaluate");
    const auto flag = mode_flag_from(mode);
    auto report = ctd::eval::evaluate_run(pred_path, ann_path, flag);
    const fs::path out = common.out_dir;
    ctd::save_json(out / "report.json", report.to_json());
    write_text(out / "classification.csv", report.classification_csv());
    write_text(out / "detection.csv", report.detection_csv());
    for (const auto& [mode_name, ea] : report.error_analysis)
        write_text(out / ("error_analysis_" + mode_name + ".svg"),
                   ctd::eval::pr_curves_svg(ea, "TB detection error analysis (" +
                                                    mode_name + ")"));
    std::printf("evaluate: accuracy %.2f, AUC %.2f; report under %s\n",
                report.classification.accuracy, report.classification.auc_tb,
                out.string().c_str());
    return 0;
}

int run_ablate(const Common& common) {
    const Json cfg = common.resolve("ablate");
    const uint64_t seed = cfg.at("seed").get<uint64_t>();
    const fs::path out = common.out_dir;
    const fs::path data_dir = cfg.at("data").at("dir").get<std::string>();
    const std::string train_split = cfg.at("data").at("train").get<std::string>();
    const std::string eval_split = cfg.at("ablate").at("eval_split").get<std::string>();
    auto train_index = ctd::data::load_dataset(data_dir / (train_split + ".json"));
    auto eval_index = ctd::data::load_dataset(data_dir / (eval_split + ".json"));

    ctd::train::TrainConfig tc = train_config(cfg, 1, seed);
    tc.iterations = cfg.at("ablate").at("iterations").get<int>();

    Json table = Json::array();
    std::string csv = "name,attention,encoding,spe_stn,spe_side,ap50,ap\n";
    for (const auto& spec : ctd::attn::ablation_grid()) {
        ctd::net::ModelConfig mc = model_config(cfg);
        mc.sas.attention = spec.attention;
        mc.sas.encoding = spec.encoding;
        mc.sas.spe_stn = spec.spe_stn;
        mc.sas.spe_side = spec.spe_side;
        auto model = std::make_unique<ctd::net::SymFormer>(mc, seed);
        ctd::train::train_stage1(*model, train_index, data_dir, tc);
        auto preds = ctd::train::predict_dataset(*model, eval_index, data_dir,
                                                 tc.input_size,
                                                 ctd::net::PredictMode::unfiltered);
        auto cell = ctd::eval::detection_ap(preds, eval_index,
                                            ctd::eval::CategoryView::category_agnostic,
                                            ctd::eval::EvalMode::only_tb);
        const char* side = spec.spe_side == ctd::enc::SpeSide::right_to_left
                               ? "right_to_left"
                               : "left_to_right";
        table.push_back({{"name", spec.name},
                         {"attention", static_cast<int>(spec.attention)},
                         {"encoding", static_cast<int>(spec.encoding)},
                         {"spe_stn", spec.spe_stn},
                         {"spe_side", side},
                         {"ap50", cell.ap50},
                         {"ap", cell.ap}});
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%s,%.4f,%.4f\n", spec.name.c_str(),
                      static_cast<int>(spec.attention), static_cast<int>(spec.encoding),
                      spec.spe_stn ? 1 : 0, side, cell.ap50, cell.ap);
        csv += buf;
        std::printf("ablate: %-22s AP50 %.2f  AP %.2f\n", spec.name.c_str(), cell.ap50,
                    cell.ap);
    }
    ctd::save_json(out / "ablation.json", table);
    write_text(out / "ablation.csv", csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chest X-ray TB detection and classification toolkit"};
    app.require_subcommand(1);

    Common common;
    std::string ann_path, pred_path, ckpt_path, images_root;
    std::string predict_mode = "filtered", eval_mode = "both";

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic dataset");
    add_common(synth, common);

    CLI::App* validate = app.add_subcommand("validate", "validate an annotation file");
    add_common(validate, common);
    validate->add_option("--ann", ann_path, "annotation JSON")->required();

    CLI::App* train = app.add_subcommand("train", "two-stage training");
    add_common(train, common);

    CLI::App* predict = app.add_subcommand("predict", "run a checkpoint over a dataset");
    add_common(predict, common);
    predict->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    predict->add_option("--ann", ann_path, "annotation JSON")->required();
    predict->add_option("--images", images_root, "image root (default: beside --ann)");
    predict->add_option("--mode", predict_mode, "filtered|unfiltered");

    CLI::App* evaluate = app.add_subcommand("evaluate", "score predictions");
    add_common(evaluate, common);
    evaluate->add_option("--pred", pred_path, "predictions JSON")->required();
    evaluate->add_option("--ann", ann_path, "annotation JSON")->required();
    evaluate->add_option("--mode", eval_mode, "all|only_tb|both");

    CLI::App* analyze = app.add_subcommand("analyze", "error-analysis curves and plots");
    add_common(analyze, common);
    analyze->add_option("--pred", pred_path, "predictions JSON")->required();
    analyze->add_option("--ann", ann_path, "annotation JSON")->required();
    analyze->add_option("--mode", eval_mode, "all|only_tb|both");

    CLI::App* ablate = app.add_subcommand("ablate", "run the 13-model ablation grid");
    add_common(ablate, common);

    try {
        app.parse(argc, argv);
        if (synth->parsed()) return run_synth(common);
        if (validate->parsed()) return run_validate(common, ann_path);
        if (train->parsed()) return run_train(common);
        if (predict->parsed())
            return run_predict(common, ckpt_path, ann_path, images_root, predict_mode);
        if (evaluate->parsed()) return run_evaluate(common, pred_path, ann_path, eval_mode, false);
        if (analyze->parsed()) return run_evaluate(common, pred_path, ann_path, eval_mode, true);
        if (ablate->parsed()) return run_ablate(common);
        return 2;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        Json err{{"error", {{"kind", "usage"}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 2;
    } catch (const Error& e) {
        Json err{{"error", {{"kind", e.kind_name()}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        Json err{{"error", {{"kind", "internal"}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
