#include "dclscam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

namespace dclscam {

const char* method_name(CamMethod m) {
    return m == CamMethod::gradcam ? "gradcam" : "threshold_gradcam";
}

CamMethod parse_method(const std::string& name) {
    if (name == "gradcam") return CamMethod::gradcam;
    if (name == "tgradcam" || name == "threshold_gradcam") return CamMethod::threshold_gradcam;
    throw std::invalid_argument("unknown method '" + name + "' (expected gradcam or tgradcam)");
}

// ---- spearman -------------------------------------------------------------------

namespace {

// Average ranks, 1-based; tied values share the mean of their rank range.
std::vector<double> average_ranks(std::span<const float> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

SpearmanResult spearman(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("spearman: length mismatch " + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()));
    if (a.size() < 2) throw std::invalid_argument("spearman: need at least 2 values");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;  // both rank vectors share this mean
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - mean;
        const double db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) return {0.0, true};
    return {cov / std::sqrt(va * vb), false};
}

// ---- scoring --------------------------------------------------------------------

AlignmentReport score_model(const Model& model, const Dataset& dataset, CamMethod method,
                            const ScoreOptions& options, const std::string& model_id) {
    const int n = static_cast<int>(dataset.samples.size());
    if (n == 0) throw std::invalid_argument("score_model: empty dataset");

    AlignmentReport report;
    report.model_id = model_id;
    report.method = method;
    report.per_image_scores.assign(static_cast<std::size_t>(n), 0.0);
    std::vector<char> degenerate(static_cast<std::size_t>(n), 0);

    CamOptions cam_opts;
    cam_opts.softmax_target = options.softmax_target;

    auto score_range = [&](const Model& m, int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
            const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
            const Tensor image = image_to_tensor(s.image);
            int cls = s.label;
            if (options.use_predicted_class) {
                const auto scores = predict(m, image);
                cls = static_cast<int>(std::max_element(scores.begin(), scores.end()) -
                                       scores.begin());
            }
            Heatmap hm = method == CamMethod::gradcam
                             ? gradcam(m, image, cls, cam_opts)
                             : threshold_gradcam(m, image, cls, options.threshold, cam_opts);
            if (hm.height != s.heatmap.height || hm.width != s.heatmap.width)
                hm = resize_heatmap(hm, s.heatmap.height, s.heatmap.width);
            if (options.blur_sigma > 0.0f)
                gaussian_blur(hm.values, hm.height, hm.width, options.blur_sigma);
            if (hm.degenerate) {
                degenerate[static_cast<std::size_t>(i)] = 1;
                continue;  // scored 0 by convention
            }
            const SpearmanResult r = spearman(hm.values, s.heatmap.values);
            if (r.degenerate) {
                degenerate[static_cast<std::size_t>(i)] = 1;
                continue;
            }
            report.per_image_scores[static_cast<std::size_t>(i)] = r.rho;
        }
    };

    int threads = options.threads > 0 ? options.threads
                                      : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, std::max(1, n));
    if (threads == 1) {
        score_range(model, 0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + threads - 1) / threads;
        std::vector<Model> clones;
        clones.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) clones.push_back(model.clone());
        for (int t = 0; t < threads; ++t) {
            const int lo = t * chunk, hi = std::min(n, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back([&, t, lo, hi] { score_range(clones[static_cast<std::size_t>(t)], lo, hi); });
        }
        for (auto& th : pool) th.join();
    }

    double sum = 0.0;
    for (double v : report.per_image_scores) sum += v;
    report.mean_score = sum / n;
    report.degenerate_count = static_cast<int>(std::count(degenerate.begin(), degenerate.end(), 1));
    report.top1_accuracy = top1(model, to_trainset(dataset));
    report.parameter_count = model.parameter_count();
    return report;
}

// ---- reports --------------------------------------------------------------------

namespace {

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string fmt_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
    return buf;
}

constexpr const char* kCsvHeader = "model,method,top1,mean_score,n_images,n_degenerate,params";

}  // namespace

ReportRow to_row(const AlignmentReport& report) {
    ReportRow row;
    row.model_id = report.model_id;
    row.method = method_name(report.method);
    row.top1 = report.top1_accuracy;
    row.mean_score = report.mean_score;
    row.n_images = static_cast<int>(report.per_image_scores.size());
    row.n_degenerate = report.degenerate_count;
    row.params = report.parameter_count;
    return row;
}

ReportBundle emit_report_rows(std::span<const ReportRow> rows) {
    ReportBundle out;
    std::ostringstream csv;
    csv << kCsvHeader << "\n";
    for (const auto& r : rows) {
        csv << r.model_id << "," << r.method << "," << fmt4(r.top1) << "," << fmt4(r.mean_score)
            << "," << r.n_images << "," << r.n_degenerate << "," << r.params << "\n";
    }
    out.csv = csv.str();

    // Table-1-shaped view: one row per model, both method scores as columns.
    std::vector<std::string> models;
    for (const auto& r : rows)
        if (std::find(models.begin(), models.end(), r.model_id) == models.end())
            models.push_back(r.model_id);
    std::size_t name_w = std::string("Model").size();
    for (const auto& m : models) name_w = std::max(name_w, m.size());

    std::ostringstream tbl;
    auto pad = [&](const std::string& s, std::size_t w) {
        tbl << s << std::string(w > s.size() ? w - s.size() : 1, ' ');
    };
    pad("Model", name_w + 2);
    pad("Top1-accuracy", 16);
    pad("Grad-CAM score", 17);
    tbl << "Threshold-Grad-CAM score\n";
    for (const auto& m : models) {
        std::string top1_cell = "-", grad_cell = "-", thr_cell = "-";
        for (const auto& r : rows) {
            if (r.model_id != m) continue;
            top1_cell = fmt_pct(r.top1);
            if (r.method == "gradcam") grad_cell = fmt4(r.mean_score);
            if (r.method == "threshold_gradcam") thr_cell = fmt4(r.mean_score);
        }
        pad(m, name_w + 2);
        pad(top1_cell, 16);
        pad(grad_cell, 17);
        tbl << thr_cell << "\n";
    }
    out.table = tbl.str();
    return out;
}

ReportBundle emit_report(std::span<const AlignmentReport> reports) {
    std::vector<ReportRow> rows;
    rows.reserve(reports.size());
    for (const auto& r : reports) rows.push_back(to_row(r));
    return emit_report_rows(rows);
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("report csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader)
        throw std::runtime_error("report csv: schema mismatch, expected '" +
                                 std::string(kCsvHeader) + "', got '" + line + "'");
    std::vector<ReportRow> rows;
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 7)
            throw std::runtime_error("report csv line " + std::to_string(line_no) +
                                     ": expected 7 fields, got " + std::to_string(fields.size()));
        ReportRow r;
        try {
            r.model_id = fields[0];
            r.method = fields[1];
            r.top1 = std::stod(fields[2]);
            r.mean_score = std::stod(fields[3]);
            r.n_images = std::stoi(fields[4]);
            r.n_degenerate = std::stoi(fields[5]);
            r.params = std::stoll(fields[6]);
        } catch (const std::exception&) {
            throw std::runtime_error("report csv line " + std::to_string(line_no) +
                                     ": malformed numeric field");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace dclscam
