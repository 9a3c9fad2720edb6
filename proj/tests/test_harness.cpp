#include "gradtrim/harness.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace gradtrim;

namespace {

// small/fast config used throughout: moons + mlp + iforest
PipelineConfig quick_config() {
    PipelineConfig cfg;
    cfg.dataset.source = "moons";
    cfg.dataset.n_train = 60;
    cfg.dataset.n_test = 20;
    cfg.dataset.flips_per_class = 3;
    cfg.model.arch = "mlp";
    cfg.model.h1 = 8;
    cfg.model.h2 = 8;
    cfg.train = default_train_config("mlp");
    cfg.train.epochs = 80;
    cfg.budget.count = 6;
    cfg.seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("detection metrics: perfect plan and empty plan") {
    std::vector<bool> mask(250, false);
    for (int i = 0; i < 20; ++i) mask[static_cast<std::size_t>(i)] = true;

    Vector scores = Vector::Zero(250);
    for (int i = 0; i < 20; ++i) scores(i) = 1.0;
    const auto perfect = detection_metrics(select_outliers(scores, 20), mask);
    REQUIRE(perfect.accuracy == 1.0);
    REQUIRE(perfect.precision == 1.0);
    REQUIRE(perfect.recall == 1.0);

    const auto empty = detection_metrics(select_outliers(scores, 0), mask);
    REQUIRE(empty.accuracy == Catch::Approx(230.0 / 250.0));
    REQUIRE(empty.recall == 0.0);

    REQUIRE_THROWS_AS(detection_metrics(select_outliers(scores, 5), std::vector<bool>{}),
                      ConfigError);
}

TEST_CASE("budget resolution") {
    REQUIRE(resolve_budget(BudgetConfig{0.05, -1}, 50000) == 2500);
    REQUIRE(resolve_budget(BudgetConfig{0.001, -1}, 100) == 1);  // minimum one
    REQUIRE(resolve_budget(BudgetConfig{0.5, 20}, 100) == 20);   // count wins
    REQUIRE(resolve_budget(BudgetConfig{0.5, 500}, 100) == 100); // clamped
    REQUIRE_THROWS_AS(resolve_budget(BudgetConfig{1.5, -1}, 100), ConfigError);
    REQUIRE_THROWS_AS(resolve_budget(BudgetConfig{0.0, -1}, 100), ConfigError);
}

TEST_CASE("pipeline: zero budget leaves test accuracy unchanged") {
    PipelineConfig cfg = quick_config();
    cfg.budget.count = 0;
    const auto rep = run_pipeline(cfg);
    REQUIRE(rep.flagged.empty());
    REQUIRE(rep.survivors == 60);
    REQUIRE(rep.test_accuracy_after == rep.test_accuracy_before);
}

TEST_CASE("pipeline reports are reproducible modulo timings") {
    PipelineConfig cfg = quick_config();
    const auto a = to_json(run_pipeline(cfg), false).dump();
    const auto b = to_json(run_pipeline(cfg), false).dump();
    REQUIRE(a == b);
}

TEST_CASE("pipeline report reconciles the trim plan") {
    PipelineConfig cfg = quick_config();
    const auto rep = run_pipeline(cfg);
    REQUIRE(rep.budget_k == 6);
    REQUIRE(static_cast<Eigen::Index>(rep.flagged.size()) == 6);
    REQUIRE(rep.survivors == 60 - 6);
    REQUIRE(rep.detection.has_value());
    REQUIRE(rep.detection->accuracy >= 0.0);
    REQUIRE(rep.detection->accuracy <= 1.0);
    // config echo carries resolved defaults
    REQUIRE(rep.config_echo.at("train").at("lr").get<double>() == 0.05);
}

TEST_CASE("pipeline errors carry the failing stage tag") {
    PipelineConfig cfg = quick_config();
    cfg.dataset.source = "csv";  // no path given
    try {
        run_pipeline(cfg);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("[generate]") != std::string::npos);
    }

    PipelineConfig full = quick_config();
    full.budget.count = 60;  // trim everything
    try {
        run_pipeline(full);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("[trim]") != std::string::npos);
    }
}

TEST_CASE("pipeline runs every method") {
    PipelineConfig cfg = quick_config();
    cfg.lissa.depth = 200;  // keep the lissa methods quick
    cfg.lissa.repeats = 1;
    for (Method m : {Method::iforest, Method::l1, Method::l2, Method::semi_inlier,
                     Method::exact, Method::lissa, Method::trace, Method::self_exact,
                     Method::self_lissa}) {
        cfg.method = m;
        const auto rep = run_pipeline(cfg);
        REQUIRE(rep.survivors == 54);
    }
}

TEST_CASE("compare deduplicates methods and shares the baseline") {
    PipelineConfig cfg = quick_config();
    const auto rows = compare_methods(cfg, {Method::l1, Method::l1, Method::l2});
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].test_accuracy_before == rows[1].test_accuracy_before);

    std::ostringstream os;
    write_compare_csv(rows, os);
    REQUIRE(os.str().find("l1,") != std::string::npos);
}

TEST_CASE("budget sweep emits one row per fraction") {
    PipelineConfig cfg = quick_config();
    cfg.budget.count = -1;
    const auto rows = sweep_budget(cfg, {0.05, 0.1});
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].k == 3);
    REQUIRE(rows[1].k == 6);

    const auto single = sweep_budget(cfg, {0.1});
    REQUIRE(single.size() == 1);
    REQUIRE_THROWS_AS(sweep_budget(cfg, {1.2}), ConfigError);
}

TEST_CASE("tree sweep handles a single tree") {
    PipelineConfig cfg = quick_config();
    const auto rows = sweep_trees(cfg, {1, 10});
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].n_trees == 1);
    REQUIRE_THROWS_AS(sweep_trees(cfg, {0}), ConfigError);
}

TEST_CASE("bench produces per-size timings and ratios") {
    PipelineConfig cfg = quick_config();
    cfg.method = Method::l2;
    cfg.train.epochs = 5;
    const auto rows = bench_timing(cfg, {64});
    REQUIRE(rows.size() == 1);
    REQUIRE(rows[0].seconds > 0.0);
    REQUIRE(rows[0].ratio_vs_prev == 0.0);

    PipelineConfig csv_cfg = cfg;
    csv_cfg.dataset.source = "csv";
    REQUIRE_THROWS_AS(bench_timing(csv_cfg, {64}), ConfigError);
}

TEST_CASE("pipeline config json round trip") {
    PipelineConfig cfg = quick_config();
    cfg.method = Method::semi_inlier;
    cfg.layer_selector = "last_layer";
    cfg.projection.force = true;
    cfg.projection.target_dim = 8;
    cfg.detector.normalize = true;
    const auto j = to_json(cfg);
    const PipelineConfig back = pipeline_config_from_json(j);
    REQUIRE(to_json(back) == j);
}

TEST_CASE("unknown config values are rejected") {
    PipelineConfig cfg = quick_config();
    cfg.dataset.source = "mnist";
    REQUIRE_THROWS_AS(run_pipeline(cfg), ConfigError);

    PipelineConfig cfg2 = quick_config();
    cfg2.layer_selector = "first_layer";
    REQUIRE_THROWS_AS(run_pipeline(cfg2), ConfigError);

    REQUIRE_THROWS_AS(method_from_string("pca"), ConfigError);
}

TEST_CASE("forced projection reduces detector dimensionality") {
    PipelineConfig cfg = quick_config();
    cfg.model.arch = "mlp";
    cfg.projection.force = true;
    cfg.projection.target_dim = 4;
    const auto rep = run_pipeline(cfg);  // (h2+1)*2 = 18 dims -> 4
    REQUIRE(rep.survivors == 54);
}
