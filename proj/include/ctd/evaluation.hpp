#pragma once

#include <array>
#include <filesystem>
#include <map>

#include "ctd/boxes.hpp"
#include "ctd/dataset.hpp"
#include "ctd/json_util.hpp"

namespace ctd::eval {

/// Intersection-over-union; degenerate boxes (w or h <= 0) are an error.
double iou(const Box& a, const Box& b);

// All metric values below are percentages in [0, 100].

struct ClassificationMetrics {
    double accuracy = 0, auc_tb = 0, sensitivity = 0, specificity = 0, ap = 0, ar = 0;
};

/// Six-metric summary over collapsed {healthy, sick_non_tb, tb} classes.
/// Requires exactly one prediction per annotated image.
ClassificationMetrics classification_metrics(const std::vector<ImagePrediction>& preds,
                                             const data::DatasetIndex& gts);

enum class CategoryView { category_agnostic, active_tb, latent_tb };
enum class EvalMode { all, only_tb };

struct DetCell {
    double ap = 0;    // averaged over IoU 0.50:0.05:0.95
    double ap50 = 0;  // at IoU 0.50
};

/// COCO-style 101-point interpolated average precision.
///
/// Matching order is canonical so independent implementations can agree
/// bit-for-bit: detections are processed in descending score, ties broken
/// by (annotation-index image order, box insertion order); each detection
/// greedily takes the unmatched ground-truth box of highest IoU (first on
/// ties) when that IoU reaches the threshold.
///
/// The per-class views exclude uncertain-TB images entirely; the
/// category-agnostic view merges both TB classes and includes them.
/// `only_tb` mode restricts the image set to TB images.
DetCell detection_ap(const std::vector<ImagePrediction>& preds,
                     const data::DatasetIndex& gts, CategoryView view, EvalMode mode);

/// Interpolated precision at recalls {0.00, 0.01, ..., 1.00}.
struct PrCurve {
    std::array<double, 101> precision{};
    double mean() const {
        double s = 0;
        for (double p : precision) s += p;
        return s / 101.0;
    }
};

/// Category-agnostic PR curves: strict/standard/lenient IoU (0.75, 0.5,
/// 0.1), then the lenient curve with background false positives removed,
/// then additionally with undetected targets patched by unit-score
/// pseudo-detections (reaching recall 1 at precision 1).
struct ErrorAnalysis {
    PrCurve c75, c50, loc, bg, fn;
};

ErrorAnalysis error_analysis(const std::vector<ImagePrediction>& preds,
                             const data::DatasetIndex& gts, EvalMode mode);

struct EvalReport {
    ClassificationMetrics classification;
    std::map<std::string, std::map<std::string, DetCell>> detection;  // mode -> view
    std::map<std::string, ErrorAnalysis> error_analysis;              // mode
    Json to_json() const;
    std::string classification_csv() const;
    std::string detection_csv() const;
};

enum class ModeFlag { all, only_tb, both };

std::vector<ImagePrediction> load_predictions(const std::filesystem::path& path);
void save_predictions(const std::filesystem::path& path,
                      const std::vector<ImagePrediction>& preds);

/// Scores a prediction set against annotations.
/// - `all`: the file must already respect the classification filter
///   (zero boxes on images whose class argmax is not TB) — a violation
///   is a protocol error; fills the all-mode cells.
/// - `only_tb`: scores the file as-is over TB images only.
/// - `both`: expects unfiltered predictions, applies the filter
///   internally for the all-mode cells and uses the raw boxes for
///   only_tb (filling all six detection cells).
EvalReport evaluate(const std::vector<ImagePrediction>& preds,
                    const data::DatasetIndex& gts, ModeFlag mode);
EvalReport evaluate_run(const std::filesystem::path& predictions_path,
                        const std::filesystem::path& annotations_path, ModeFlag mode);

/// Standalone SVG line plot of the five curves.
std::string pr_curves_svg(const ErrorAnalysis& ea, const std::string& title);

}  // namespace ctd::eval
