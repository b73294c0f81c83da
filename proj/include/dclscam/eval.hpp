// eval.hpp: tie-aware Spearman correlation, alignment scoring against
// reference heatmaps, and report emission (CSV plus a formatted table).

#pragma once

#include <span>
#include <string>
#include <vector>

#include "dclscam/cam.hpp"
#include "dclscam/datakit.hpp"
#include "dclscam/zoo.hpp"

namespace dclscam {

enum class CamMethod { gradcam, threshold_gradcam };

const char* method_name(CamMethod m);
CamMethod parse_method(const std::string& name);  // accepts gradcam / tgradcam / threshold_gradcam

struct SpearmanResult {
    double rho = 0.0;
    bool degenerate = false;  // a constant input has no rank information; rho is pinned to 0
};

// Pearson correlation of average ranks; ties receive the mean of their rank
// range. Requires equal lengths >= 2.
SpearmanResult spearman(std::span<const float> a, std::span<const float> b);

struct ScoreOptions {
    float threshold = kDefaultCamThreshold;  // threshold_gradcam only
    bool use_predicted_class = false;        // default: CAM on the ground-truth label class
    bool softmax_target = false;
    float blur_sigma = 0.0f;  // optional blur of model heatmaps before scoring; off by default
    int threads = 0;          // 0 = hardware concurrency
};

struct AlignmentReport {
    std::string model_id;
    CamMethod method = CamMethod::gradcam;
    std::vector<double> per_image_scores;  // in dataset order, each in [-1,1]
    double mean_score = 0.0;
    double top1_accuracy = 0.0;
    std::int64_t parameter_count = 0;
    int degenerate_count = 0;
};

// Per image: CAM heatmap for the scored class, resized to the reference
// resolution, rank-correlated with the reference. Degenerate heatmaps score 0
// and are counted. Images fan out across threads over per-thread model clones;
// assembly preserves dataset order.
AlignmentReport score_model(const Model& model, const Dataset& dataset, CamMethod method,
                            const ScoreOptions& options = {}, const std::string& model_id = "");

// One row of the CSV schema: model,method,top1,mean_score,n_images,n_degenerate,params
struct ReportRow {
    std::string model_id;
    std::string method;
    double top1 = 0.0;
    double mean_score = 0.0;
    int n_images = 0;
    int n_degenerate = 0;
    std::int64_t params = 0;
};

struct ReportBundle {
    std::string csv;    // stable bytes, 4-decimal scores, rows in input order
    std::string table;  // one row per model: Top1-accuracy | Grad-CAM score | Threshold-Grad-CAM score
};

ReportRow to_row(const AlignmentReport& report);
ReportBundle emit_report(std::span<const AlignmentReport> reports);
ReportBundle emit_report_rows(std::span<const ReportRow> rows);

// Parse CSV text produced by emit_report; throws on schema mismatch.
std::vector<ReportRow> parse_report_csv(const std::string& text);

}  // namespace dclscam
