// dclscam: generate synthetic shape data, train the model zoo, explain
// predictions with Grad-CAM / Threshold-Grad-CAM, and score heatmap alignment.
//
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dclscam/cam.hpp"
#include "dclscam/datakit.hpp"
#include "dclscam/eval.hpp"
#include "dclscam/zoo.hpp"

namespace fs = std::filesystem;
using namespace dclscam;

namespace {

struct GenArgs {
    int n = 100;
    int size = 32;
    int classes = 3;
    std::uint32_t seed = 7;
    std::string out;
};

struct TrainArgs {
    std::string arch = "baseline";
    std::string data;
    std::string config_path;
    std::string out;
    TrainConfig cfg;
    double val_frac = 0.1;
    CLI::Option* opt_arch = nullptr;
    CLI::Option* opt_epochs = nullptr;
    CLI::Option* opt_batch = nullptr;
    CLI::Option* opt_lr = nullptr;
    CLI::Option* opt_pos = nullptr;
    CLI::Option* opt_interp = nullptr;
    CLI::Option* opt_kernel = nullptr;
    CLI::Option* opt_elems = nullptr;
    CLI::Option* opt_seed = nullptr;
    std::string interp = "bilinear";
};

struct ExplainArgs {
    std::string ckpt;
    std::string image;
    int class_index = 0;
    std::string method = "gradcam";
    float threshold = kDefaultCamThreshold;
    float alpha = 0.5f;
    bool softmax_target = false;
    std::string out = "explain";
};

struct ScoreArgs {
    std::string ckpt;
    std::string data;
    std::string method = "tgradcam";
    float threshold = kDefaultCamThreshold;
    std::string out;
    std::string model_id;
    std::string class_policy = "label";
    float blur_sigma = 0.0f;
    int threads = 0;
    int offset = 0;
    int limit = -1;
    bool softmax_target = false;
};

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
    std::string csv_out;
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << text;
    if (!os) throw std::runtime_error("failed writing: " + path);
}

Dataset load_range(const std::string& manifest, int offset, int limit) {
    Dataset ds = load_dataset(manifest);
    const int n = static_cast<int>(ds.samples.size());
    if (offset < 0 || offset > n)
        throw std::invalid_argument("--offset " + std::to_string(offset) + " out of range for " +
                                    std::to_string(n) + " samples");
    const int count = limit < 0 ? n - offset : std::min(limit, n - offset);
    Dataset out;
    out.classes = ds.classes;
    out.samples.assign(std::make_move_iterator(ds.samples.begin() + offset),
                       std::make_move_iterator(ds.samples.begin() + offset + count));
    return out;
}

int run_gen(const GenArgs& a) {
    GenerateOptions opt;
    opt.count = a.n;
    opt.size = a.size;
    opt.classes = a.classes;
    opt.seed = a.seed;
    const std::string manifest = generate_shapes(opt, a.out);
    std::printf("n=%d\nsize=%d\nclasses=%d\nmanifest=%s\n", a.n, a.size, a.classes,
                manifest.c_str());
    return 0;
}

int run_train(TrainArgs& a) {
    TrainConfig cfg;
    if (!a.config_path.empty()) {
        std::ifstream is(a.config_path);
        if (!is) throw std::runtime_error("cannot open config: " + a.config_path);
        std::stringstream ss;
        ss << is.rdbuf();
        cfg = TrainConfig::from_json(ss.str());
    }
    // flags override the config file
    if (a.opt_arch->count() || a.config_path.empty()) cfg.arch = parse_arch(a.arch);
    if (a.opt_epochs->count() || a.config_path.empty()) cfg.epochs = a.cfg.epochs;
    if (a.opt_batch->count() || a.config_path.empty()) cfg.batch_size = a.cfg.batch_size;
    if (a.opt_lr->count() || a.config_path.empty()) cfg.lr = a.cfg.lr;
    if (a.opt_pos->count() || a.config_path.empty()) cfg.pos_lr_mult = a.cfg.pos_lr_mult;
    if (a.opt_interp->count() || a.config_path.empty()) cfg.interp = parse_interp(a.interp);
    if (a.opt_kernel->count() || a.config_path.empty()) cfg.kernel_size = a.cfg.kernel_size;
    if (a.opt_elems->count() || a.config_path.empty()) cfg.dcls_elements = a.cfg.dcls_elements;
    if (a.opt_seed->count() || a.config_path.empty()) cfg.seed = a.cfg.seed;
    if (cfg.arch == Arch::rigged_cancellation)
        throw std::invalid_argument("arch rigged_cancellation is a test fixture, not trainable");

    Dataset ds = load_dataset(a.data);
    if (ds.samples.empty()) throw std::invalid_argument("dataset is empty: " + a.data);
    cfg.classes = ds.classes;
    cfg.image_size = ds.samples[0].image.height;

    TrainSet all = to_trainset(ds);
    const int n_val = static_cast<int>(static_cast<double>(all.count) * a.val_frac);
    const int n_train = all.count - n_val;
    if (n_train < 1) throw std::invalid_argument("validation split leaves no training data");
    const std::int64_t plane = static_cast<std::int64_t>(all.channels) * all.height * all.width;

    TrainSet train_set;
    train_set.count = n_train;
    train_set.channels = all.channels;
    train_set.height = all.height;
    train_set.width = all.width;
    train_set.pixels.assign(all.pixels.begin(), all.pixels.begin() + n_train * plane);
    train_set.labels.assign(all.labels.begin(), all.labels.begin() + n_train);

    TrainSet val_set;
    val_set.count = n_val;
    val_set.channels = all.channels;
    val_set.height = all.height;
    val_set.width = all.width;
    val_set.pixels.assign(all.pixels.begin() + n_train * plane, all.pixels.end());
    val_set.labels.assign(all.labels.begin() + n_train, all.labels.end());

    Model model = build(cfg);
    const TrainLog log = train(model, train_set, cfg);
    save_checkpoint(a.out, model, cfg);

    std::ostringstream csv;
    csv << "epoch,loss,train_acc\n";
    for (const auto& e : log.epochs) {
        char row[96];
        std::snprintf(row, sizeof row, "%d,%.6f,%.6f\n", e.epoch, e.loss, e.train_accuracy);
        csv << row;
    }
    write_text(a.out + ".log.csv", csv.str());

    const double train_top1 = top1(model, train_set);
    const double val_top1 = n_val > 0 ? top1(model, val_set) : train_top1;
    std::printf("arch=%s\nparams=%lld\ntrain_top1=%.4f\nval_top1=%.4f\nckpt=%s\n",
                arch_name(cfg.arch).c_str(),
                static_cast<long long>(model.parameter_count()), train_top1, val_top1,
                a.out.c_str());
    return 0;
}

int run_explain(const ExplainArgs& a) {
    Checkpoint ck = load_checkpoint(a.ckpt);
    const ImageU8 image = read_image(a.image);
    const Tensor input = image_to_tensor(image);
    const CamMethod method = parse_method(a.method);
    CamOptions opts;
    opts.softmax_target = a.softmax_target;

    const Heatmap hm = method == CamMethod::gradcam
                           ? gradcam(ck.model, input, a.class_index, opts)
                           : threshold_gradcam(ck.model, input, a.class_index, a.threshold, opts);
    const std::string pgm_path = a.out + "_heatmap.pgm";
    const std::string png_path = a.out + "_overlay.png";
    write_pgm16(pgm_path, hm);
    write_png(png_path, overlay(image, hm, a.alpha));
    std::printf("method=%s\nclass=%d\nthreshold=%.4f\ndegenerate=%d\nheatmap=%s\noverlay=%s\n",
                method_name(method), a.class_index,
                method == CamMethod::gradcam ? 0.0 : static_cast<double>(a.threshold),
                hm.degenerate ? 1 : 0, pgm_path.c_str(), png_path.c_str());
    return 0;
}

int run_score(const ScoreArgs& a) {
    Checkpoint ck = load_checkpoint(a.ckpt);
    Dataset ds = load_range(a.data, a.offset, a.limit);
    if (ds.samples.empty()) throw std::invalid_argument("no samples selected from " + a.data);
    ScoreOptions opts;
    opts.threshold = a.threshold;
    opts.blur_sigma = a.blur_sigma;
    opts.threads = a.threads;
    opts.softmax_target = a.softmax_target;
    if (a.class_policy == "predicted")
        opts.use_predicted_class = true;
    else if (a.class_policy != "label")
        throw std::invalid_argument("--class-policy must be label or predicted");

    const std::string id = a.model_id.empty() ? arch_name(ck.config.arch) : a.model_id;
    const AlignmentReport report =
        score_model(ck.model, ds, parse_method(a.method), opts, id);
    std::vector<AlignmentReport> reports{report};
    write_text(a.out, emit_report(reports).csv);
    std::printf("model=%s\nmethod=%s\nn_images=%d\nmean_score=%.4f\ntop1=%.4f\nn_degenerate=%d\ncsv=%s\n",
                id.c_str(), method_name(report.method),
                static_cast<int>(report.per_image_scores.size()), report.mean_score,
                report.top1_accuracy, report.degenerate_count, a.out.c_str());
    return 0;
}

int run_report(const ReportArgs& a) {
    std::vector<ReportRow> rows;
    for (const auto& path : a.inputs) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open report csv: " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        auto part = parse_report_csv(ss.str());
        rows.insert(rows.end(), part.begin(), part.end());
    }
    const ReportBundle bundle = emit_report_rows(rows);
    if (a.out.empty()) {
        std::fputs(bundle.table.c_str(), stderr);
    } else {
        write_text(a.out, bundle.table);
    }
    if (!a.csv_out.empty()) write_text(a.csv_out, bundle.csv);
    std::printf("rows=%d\n%s", static_cast<int>(rows.size()),
                a.out.empty() ? "" : ("table=" + a.out + "\n").c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DCLS training, CAM explanations and heatmap-alignment scoring"};
    app.require_subcommand(1);

    GenArgs gen_args;
    auto* gen = app.add_subcommand("gen", "Generate the synthetic shapes dataset");
    gen->add_option("--n", gen_args.n, "Number of samples");
    gen->add_option("--size", gen_args.size, "Square image size (>= 16)");
    gen->add_option("--classes", gen_args.classes, "Number of shape classes (2..5)");
    gen->add_option("--seed", gen_args.seed, "Generator seed");
    gen->add_option("--out", gen_args.out, "Output directory")->required();

    TrainArgs train_args;
    train_args.cfg = TrainConfig{};
    auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
    train_args.opt_arch = tr->add_option("--arch", train_args.arch,
                                         "baseline|dcls|starrelu|starrelu_dcls");
    tr->add_option("--data", train_args.data, "Manifest path")->required();
    train_args.opt_epochs = tr->add_option("--epochs", train_args.cfg.epochs, "Training epochs");
    train_args.opt_batch = tr->add_option("--batch", train_args.cfg.batch_size, "Batch size");
    train_args.opt_lr = tr->add_option("--lr", train_args.cfg.lr, "Learning rate");
    train_args.opt_pos = tr->add_option("--pos-lr-mult", train_args.cfg.pos_lr_mult,
                                        "Learning-rate multiplier for DCLS positions/sigma");
    train_args.opt_interp = tr->add_option("--interp", train_args.interp, "bilinear|gaussian");
    train_args.opt_kernel = tr->add_option("--kernel-size", train_args.cfg.kernel_size,
                                           "Depthwise kernel support K");
    train_args.opt_elems = tr->add_option("--elements", train_args.cfg.dcls_elements,
                                          "DCLS elements per channel (m)");
    train_args.opt_seed = tr->add_option("--seed", train_args.cfg.seed, "Training seed");
    tr->add_option("--val-frac", train_args.val_frac, "Held-out fraction (taken from the tail)");
    tr->add_option("--config", train_args.config_path, "JSON TrainConfig (flags override)");
    tr->add_option("--out", train_args.out, "Checkpoint output path")->required();

    ExplainArgs ex_args;
    auto* ex = app.add_subcommand("explain", "Write a CAM heatmap and overlay for one image");
    ex->add_option("--ckpt", ex_args.ckpt, "Checkpoint path")->required();
    ex->add_option("--image", ex_args.image, "Input image (.ppm/.png)")->required();
    ex->add_option("--class", ex_args.class_index, "Target class index")->required();
    ex->add_option("--method", ex_args.method, "gradcam|tgradcam");
    ex->add_option("--threshold", ex_args.threshold, "Threshold t for tgradcam (default 0.3)");
    ex->add_option("--alpha", ex_args.alpha, "Overlay blend factor");
    ex->add_flag("--softmax-target", ex_args.softmax_target,
                 "Differentiate the post-softmax probability instead of the raw logit");
    ex->add_option("--out", ex_args.out, "Output prefix (writes <out>_heatmap.pgm, <out>_overlay.png)");

    ScoreArgs sc_args;
    auto* sc = app.add_subcommand("score", "Score heatmap alignment against references");
    sc->add_option("--ckpt", sc_args.ckpt, "Checkpoint path")->required();
    sc->add_option("--data", sc_args.data, "Manifest path")->required();
    sc->add_option("--method", sc_args.method, "gradcam|tgradcam");
    sc->add_option("--threshold", sc_args.threshold, "Threshold t for tgradcam (default 0.3)");
    sc->add_option("--model-id", sc_args.model_id, "Row label (default: architecture tag)");
    sc->add_option("--class-policy", sc_args.class_policy,
                   "CAM class: label (ground truth) or predicted");
    sc->add_option("--blur", sc_args.blur_sigma, "Gaussian blur sigma applied before scoring");
    sc->add_option("--threads", sc_args.threads, "Worker threads (0 = auto)");
    sc->add_option("--offset", sc_args.offset, "Skip this many leading samples");
    sc->add_option("--limit", sc_args.limit, "Score at most this many samples");
    sc->add_flag("--softmax-target", sc_args.softmax_target, "Use the post-softmax target");
    sc->add_option("--out", sc_args.out, "Output CSV path")->required();

    ReportArgs rp_args;
    auto* rp = app.add_subcommand("report", "Merge score CSVs into the summary table");
    rp->add_option("--in", rp_args.inputs, "Input CSV paths")->required()->expected(-1);
    rp->add_option("--out", rp_args.out, "Table output path (stderr when omitted)");
    rp->add_option("--csv-out", rp_args.csv_out, "Also write the merged CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return run_gen(gen_args);
        if (tr->parsed()) return run_train(train_args);
        if (ex->parsed()) return run_explain(ex_args);
        if (sc->parsed()) return run_score(sc_args);
        if (rp->parsed()) return run_report(rp_args);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
