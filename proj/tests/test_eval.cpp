#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dclscam/eval.hpp"
#include "test_support.hpp"

using namespace dclscam;

namespace {

// Brute-force oracle: average ranks by counting, then Pearson, all in double.
double oracle_spearman(const std::vector<float>& a, const std::vector<float>& b) {
    auto ranks = [](const std::vector<float>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            int less = 0, equal = 0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                if (v[j] < v[i]) ++less;
                if (v[j] == v[i]) ++equal;
            }
            r[i] = less + (equal + 1) / 2.0;  // mean of the tied rank range
        }
        return r;
    };
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) { ma += ra[i]; mb += rb[i]; }
    ma /= n; mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

Dataset self_scored_dataset(const Model& model, int n, int size, std::uint32_t seed) {
    std::mt19937 rng(seed);
    Dataset ds;
    ds.classes = model.classes();
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.image.height = size;
        s.image.width = size;
        s.image.rgb.resize(static_cast<std::size_t>(size) * size * 3);
        for (auto& b : s.image.rgb) b = static_cast<std::uint8_t>(rng() % 256);
        s.label = i % model.classes();
        s.heatmap = threshold_gradcam(model, image_to_tensor(s.image), s.label, 0.3f);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace

TEST_CASE("spearman basics") {
    CHECK(spearman(std::vector<float>{1, 2, 3}, std::vector<float>{1, 2, 3}).rho ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(spearman(std::vector<float>{1, 2, 3}, std::vector<float>{3, 2, 1}).rho ==
          doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("spearman worked tie case") {
    const auto r = spearman(std::vector<float>{1, 2, 2, 3}, std::vector<float>{1, 2, 3, 4});
    CHECK_FALSE(r.degenerate);
    CHECK(r.rho == doctest::Approx(4.5 / std::sqrt(4.5 * 5.0)).epsilon(1e-12));
    CHECK(std::fabs(r.rho - 0.9487) < 1e-4);
}

TEST_CASE("constant input is degenerate and scores zero") {
    const auto r = spearman(std::vector<float>{2, 2, 2, 2}, std::vector<float>{1, 2, 3, 4});
    CHECK(r.degenerate);
    CHECK(r.rho == 0.0);
}

TEST_CASE("spearman input validation") {
    CHECK_THROWS_AS(spearman(std::vector<float>{1, 2}, std::vector<float>{1, 2, 3}),
                    std::invalid_argument);
    CHECK_THROWS_AS(spearman(std::vector<float>{1}, std::vector<float>{1}), std::invalid_argument);
}

TEST_CASE("no-ties spearman matches the closed form to 1e-12") {
    std::mt19937 rng(13);
    for (int n = 3; n <= 8; ++n) {
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<float> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
            std::iota(a.begin(), a.end(), 1.0f);
            std::iota(b.begin(), b.end(), 1.0f);
            std::shuffle(a.begin(), a.end(), rng);
            std::shuffle(b.begin(), b.end(), rng);
            double d2 = 0.0;
            for (int i = 0; i < n; ++i)
                d2 += (static_cast<double>(a[static_cast<std::size_t>(i)]) - b[static_cast<std::size_t>(i)]) *
                      (static_cast<double>(a[static_cast<std::size_t>(i)]) - b[static_cast<std::size_t>(i)]);
            const double closed = 1.0 - 6.0 * d2 / (n * (static_cast<double>(n) * n - 1.0));
            CHECK(std::fabs(spearman(a, b).rho - closed) < 1e-12);
        }
    }
}

TEST_CASE("tie-aware spearman matches the brute-force oracle") {
    std::mt19937 rng(14);
    std::uniform_int_distribution<int> val(0, 6);  // heavy ties
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 4 + static_cast<int>(rng() % 30);
        std::vector<float> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
        for (auto& v : a) v = static_cast<float>(val(rng));
        for (auto& v : b) v = static_cast<float>(val(rng));
        const auto r = spearman(a, b);
        if (r.degenerate) continue;
        CHECK(std::fabs(r.rho - oracle_spearman(a, b)) < 1e-10);
    }
}

TEST_CASE("spearman symmetry and monotone-transform invariance") {
    std::mt19937 rng(15);
    auto a = testsup::random_values(rng, 40, -2.0f, 2.0f);
    auto b = testsup::random_values(rng, 40, -2.0f, 2.0f);
    CHECK(spearman(a, b).rho == doctest::Approx(spearman(b, a).rho).epsilon(1e-15));
    CHECK(spearman(a, a).rho == doctest::Approx(1.0).epsilon(1e-12));

    // strictly increasing transform leaves ranks (hence rho) untouched
    std::vector<float> fa(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) fa[i] = 3.0f * a[i] + 7.0f;
    CHECK(spearman(fa, b).rho == doctest::Approx(spearman(a, b).rho).epsilon(1e-12));

    std::vector<float> na(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) na[i] = -a[i];
    CHECK(spearman(na, b).rho == doctest::Approx(-spearman(a, b).rho).epsilon(1e-12));
}

TEST_CASE("score_model returns mean 1.0 when references equal the model's own heatmaps") {
    TrainConfig cfg;
    cfg.arch = Arch::baseline;
    cfg.classes = 3;
    cfg.image_size = 16;
    cfg.seed = 21;
    auto model = build(cfg);
    auto ds = self_scored_dataset(model, 6, 16, 22);
    ScoreOptions opts;
    opts.threads = 1;
    auto report = score_model(model, ds, CamMethod::threshold_gradcam, opts, "self");
    CHECK(report.mean_score == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.degenerate_count == 0);
    CHECK(static_cast<int>(report.per_image_scores.size()) == 6);
    CHECK(report.parameter_count == model.parameter_count());
}

TEST_CASE("score_model is deterministic across thread counts") {
    TrainConfig cfg;
    cfg.arch = Arch::baseline;
    cfg.classes = 3;
    cfg.image_size = 16;
    cfg.seed = 23;
    auto model = build(cfg);
    auto ds = self_scored_dataset(model, 5, 16, 24);
    ScoreOptions one;
    one.threads = 1;
    ScoreOptions four;
    four.threads = 4;
    auto a = score_model(model, ds, CamMethod::gradcam, one, "m");
    auto b = score_model(model, ds, CamMethod::gradcam, four, "m");
    REQUIRE(a.per_image_scores.size() == b.per_image_scores.size());
    for (std::size_t i = 0; i < a.per_image_scores.size(); ++i)
        CHECK(a.per_image_scores[i] == b.per_image_scores[i]);
    CHECK(a.mean_score == b.mean_score);
}

TEST_CASE("all-degenerate heatmaps score zero and are counted") {
    TrainConfig cfg;
    cfg.arch = Arch::rigged_cancellation;
    auto model = build(cfg);
    Dataset ds;
    ds.classes = 2;
    std::mt19937 rng(25);
    for (int i = 0; i < 4; ++i) {
        Sample s;
        s.image.height = 2;
        s.image.width = 2;
        s.image.rgb.resize(12);
        for (auto& b : s.image.rgb) b = static_cast<std::uint8_t>(rng() % 256);
        s.label = 1;  // the zero-gradient class: every heatmap degenerates
        s.heatmap = Heatmap::zero(2, 2, false);
        s.heatmap.values = {0.1f, 0.2f, 0.3f, 0.4f};
        ds.samples.push_back(std::move(s));
    }
    ScoreOptions opts;
    opts.threads = 1;
    auto report = score_model(model, ds, CamMethod::gradcam, opts, "rigged");
    CHECK(report.mean_score == 0.0);
    CHECK(report.degenerate_count == 4);
}

TEST_CASE("permuted references decorrelate to near zero") {
    TrainConfig cfg;
    cfg.arch = Arch::baseline;
    cfg.classes = 3;
    cfg.image_size = 16;
    cfg.seed = 26;
    auto model = build(cfg);
    auto ds = self_scored_dataset(model, 100, 16, 27);
    std::mt19937 rng(28);
    for (auto& s : ds.samples)
        std::shuffle(s.heatmap.values.begin(), s.heatmap.values.end(), rng);
    ScoreOptions opts;
    opts.threads = 1;
    auto report = score_model(model, ds, CamMethod::threshold_gradcam, opts, "null");
    CHECK(std::fabs(report.mean_score) < 0.05);
}

TEST_CASE("emit_report CSV shape and determinism") {
    CHECK(emit_report({}).csv == "model,method,top1,mean_score,n_images,n_degenerate,params\n");

    AlignmentReport r1;
    r1.model_id = "baseline";
    r1.method = CamMethod::gradcam;
    r1.per_image_scores = {0.5, 0.7};
    r1.mean_score = 0.6;
    r1.top1_accuracy = 0.9533;
    r1.parameter_count = 38643;
    r1.degenerate_count = 0;
    AlignmentReport r2 = r1;
    r2.method = CamMethod::threshold_gradcam;
    r2.mean_score = 0.73115;

    std::vector<AlignmentReport> reports{r1, r2};
    auto bundle = emit_report(reports);
    CHECK(bundle.csv ==
          "model,method,top1,mean_score,n_images,n_degenerate,params\n"
          "baseline,gradcam,0.9533,0.6000,2,0,38643\n"
          "baseline,threshold_gradcam,0.9533,0.7311,2,0,38643\n");
    CHECK(emit_report(reports).csv == bundle.csv);  // stable bytes

    CHECK(bundle.table.find("Top1-accuracy") != std::string::npos);
    CHECK(bundle.table.find("Grad-CAM score") != std::string::npos);
    CHECK(bundle.table.find("Threshold-Grad-CAM score") != std::string::npos);
    CHECK(bundle.table.find("0.7311") != std::string::npos);
    CHECK(bundle.table.find("95.33") != std::string::npos);

    auto rows = parse_report_csv(bundle.csv);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].model_id == "baseline");
    CHECK(rows[0].method == "gradcam");
    CHECK(rows[1].mean_score == doctest::Approx(0.7311));
    CHECK(rows[1].params == 38643);

    CHECK_THROWS_AS(parse_report_csv("model,method\nbaseline,gradcam\n"), std::runtime_error);
}

TEST_CASE("method names parse both spellings") {
    CHECK(parse_method("gradcam") == CamMethod::gradcam);
    CHECK(parse_method("tgradcam") == CamMethod::threshold_gradcam);
    CHECK(parse_method("threshold_gradcam") == CamMethod::threshold_gradcam);
    CHECK_THROWS_AS(parse_method("lime"), std::invalid_argument);
}
