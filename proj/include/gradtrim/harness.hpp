#pragma once

#include "gradtrim/common.hpp"
#include "gradtrim/dataset.hpp"
#include "gradtrim/influence.hpp"
#include "gradtrim/model.hpp"
#include "gradtrim/outlier.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace gradtrim {

enum class Method { iforest, l1, l2, semi_inlier, exact, lissa, trace, self_exact, self_lissa };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::iforest: return "iforest";
        case Method::l1: return "l1";
        case Method::l2: return "l2";
        case Method::semi_inlier: return "semi_inlier";
        case Method::exact: return "exact";
        case Method::lissa: return "lissa";
        case Method::trace: return "trace";
        case Method::self_exact: return "self_exact";
        case Method::self_lissa: return "self_lissa";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::iforest, Method::l1, Method::l2, Method::semi_inlier,
                     Method::exact, Method::lissa, Method::trace, Method::self_exact,
                     Method::self_lissa})
        if (to_string(m) == s) return m;
    throw ConfigError("unknown method '" + s + "'");
}

// --- configuration -----------------------------------------------------------

struct DatasetConfig {
    std::string source = "moons";  // moons | blobs | csv
    int n_train = 250;
    int n_test = 100;
    double gap_noise = 0.1;
    int flips_per_class = 10;
    std::string train_csv;
    std::string test_csv;
};

struct ModelConfig {
    std::string arch = "mlp";  // logreg | mlp
    int h1 = 16;
    int h2 = 16;
};

struct BudgetConfig {
    double fraction = 0.05;     // used when count < 0
    Eigen::Index count = -1;    // absolute budget, takes precedence when >= 0
};

struct ProjectionConfig {
    int threshold = 4096;  // project when the gradient dim exceeds this
    int target_dim = 0;    // 0: use the JL minimum dimension at `eps`
    double eps = 0.3;
    bool force = false;
};

struct DetectorConfig {
    int n_trees = 100;
    int psi = 256;          // clamped to n at fit time
    int k_nn = 5;           // semi_inlier neighbours
    bool normalize = false; // z-score detector features (train statistics)
};

struct PipelineConfig {
    DatasetConfig dataset;
    ModelConfig model;
    TrainConfig train;              // seed field ignored; stage seeds derive from `seed`
    Method method = Method::iforest;
    BudgetConfig budget;
    std::string layer_selector = "auto";  // auto | all | last_layer
    std::string influence_eval = "train"; // train | test (eval-set gradients for Eq-style scores)
    ProjectionConfig projection;
    DetectorConfig detector;
    LissaConfig lissa;
    double damping = 0.01;
    std::uint64_t seed = 42;
    std::string out;

    Layer resolved_selector() const {
        if (layer_selector == "all") return Layer::all;
        if (layer_selector == "last_layer") return Layer::last_layer;
        if (layer_selector == "auto")
            return model.arch == "mlp" ? Layer::last_layer : Layer::all;
        throw ConfigError("layer_selector must be auto, all or last_layer");
    }
};

// stage seed streams
namespace seeds {
constexpr std::uint64_t data = 101, train = 202, detector = 303, retrain = 404,
                        projection = 505;
}

inline TrainConfig default_train_config(const std::string& arch) {
    TrainConfig c;
    if (arch == "logreg") {
        c.lr = 0.1;
        c.epochs = 500;
        c.batch_size = 0;
    } else {
        c.lr = 0.05;
        c.epochs = 1000;
        c.batch_size = 32;
    }
    return c;
}

// --- reports -------------------------------------------------------------------

struct DetectionMetrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct StageTimings {
    double generate = 0.0, train = 0.0, gradients = 0.0, score = 0.0, trim = 0.0,
           retrain = 0.0, evaluate = 0.0;
};

struct EvalReport {
    nlohmann::json config_echo;
    std::uint64_t seed = 0;
    std::optional<DetectionMetrics> detection;
    double test_accuracy_before = 0.0;
    double test_accuracy_after = 0.0;
    Eigen::Index budget_k = 0;
    std::vector<Eigen::Index> flagged;
    Eigen::Index survivors = 0;
    StageTimings timings;
};

// Accuracy is over all n samples (flagged vs mask); precision and recall are
// over the flagged set.
inline DetectionMetrics detection_metrics(const TrimPlan& plan, const std::vector<bool>& mask) {
    require(!mask.empty(), "detection_metrics: missing noise mask");
    const Eigen::Index n = static_cast<Eigen::Index>(mask.size());
    std::vector<bool> predicted(mask.size(), false);
    for (Eigen::Index idx : plan.flagged) {
        require(idx >= 0 && idx < n, "detection_metrics: flagged index out of range");
        predicted[static_cast<std::size_t>(idx)] = true;
    }
    Eigen::Index agree = 0, tp = 0, positives = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (predicted[i] == mask[i]) ++agree;
        if (mask[i]) ++positives;
        if (predicted[i] && mask[i]) ++tp;
    }
    DetectionMetrics m;
    m.accuracy = static_cast<double>(agree) / static_cast<double>(n);
    m.precision = plan.flagged.empty()
                      ? 0.0
                      : static_cast<double>(tp) / static_cast<double>(plan.flagged.size());
    m.recall = positives == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(positives);
    return m;
}

inline Eigen::Index resolve_budget(const BudgetConfig& b, Eigen::Index n) {
    if (b.count >= 0) return std::min<Eigen::Index>(b.count, n);
    require(b.fraction > 0.0 && b.fraction < 1.0, "budget fraction must be in (0, 1)");
    const auto k = static_cast<Eigen::Index>(std::llround(b.fraction * static_cast<double>(n)));
    return std::min<Eigen::Index>(std::max<Eigen::Index>(k, 1), n);
}

// --- internals -------------------------------------------------------------------

// Generator- or CSV-backed (train, test) pair; label noise injected per config.
inline std::pair<LabeledDataset, LabeledDataset> make_dataset(const PipelineConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.source == "csv") {
        require(!d.train_csv.empty(), "dataset: train_csv path required for csv source");
        auto train_set = read_csv(d.train_csv);
        LabeledDataset test_set;
        if (!d.test_csv.empty())
            test_set = read_csv(d.test_csv);
        else
            test_set = train_set;  // degenerate but usable for smoke runs
        return {std::move(train_set), std::move(test_set)};
    }
    const std::uint64_t ds_seed = mix_seed(cfg.seed, seeds::data);
    std::pair<LabeledDataset, LabeledDataset> split;
    if (d.source == "moons")
        split = gen_half_moons(d.n_train, d.n_test, d.gap_noise, ds_seed);
    else if (d.source == "blobs")
        split = gen_linear_blobs(d.n_train, d.n_test, ds_seed);
    else
        throw ConfigError("dataset source must be moons, blobs or csv");
    if (d.flips_per_class > 0)
        split.first = inject_label_noise(split.first,
                                         NoiseSpec{d.flips_per_class, mix_seed(ds_seed, 1)});
    return split;
}

inline ModelSpec resolve_model_spec(const PipelineConfig& cfg, const LabeledDataset& train_set) {
    ModelSpec spec;
    if (cfg.model.arch == "logreg")
        spec.arch = Arch::logreg;
    else if (cfg.model.arch == "mlp")
        spec.arch = Arch::mlp;
    else
        throw ConfigError("model arch must be logreg or mlp");
    spec.d = static_cast<int>(train_set.dim());
    spec.h1 = cfg.model.h1;
    spec.h2 = cfg.model.h2;
    spec.classes = std::max(train_set.num_classes(), 2);
    return spec;
}

namespace detail {

inline double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

template <typename F>
auto stage(const char* tag, double& seconds_out, F&& fn) {
    const double t0 = now_seconds();
    try {
        auto result = fn();
        seconds_out = now_seconds() - t0;
        return result;
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("[") + tag + "] " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(std::string("[") + tag + "] " + e.what());
    }
}

struct Prepared {
    LabeledDataset train_set;  // noisy when a generator + flips are configured
    LabeledDataset test_set;
    TrainedModel model;
    GradientMatrix grads;      // selected block, raw
    Matrix detector_features;  // grads after optional projection/normalization
    bool projected = false;
    int projection_dim = 0;
    Vector feature_mean, feature_scale;  // normalization transform (train stats)
    StageTimings timings;
};

inline Matrix apply_feature_transform(const Prepared& prep, const Matrix& g,
                                      const PipelineConfig& cfg) {
    Matrix x = g;
    if (prep.projected)
        x = sparse_random_projection(x, prep.projection_dim, mix_seed(cfg.seed, seeds::projection));
    if (cfg.detector.normalize) {
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            x.col(j) = (x.col(j).array() - prep.feature_mean(j)) / prep.feature_scale(j);
    }
    return x;
}

inline Prepared prepare(const PipelineConfig& cfg) {
    Prepared prep;
    auto data = stage("generate", prep.timings.generate, [&] { return make_dataset(cfg); });
    prep.train_set = std::move(data.first);
    prep.test_set = std::move(data.second);

    const ModelSpec spec = resolve_model_spec(cfg, prep.train_set);
    TrainConfig tc = cfg.train;
    tc.seed = mix_seed(cfg.seed, seeds::train);
    prep.model = stage("train", prep.timings.train,
                       [&] { return train(prep.train_set, spec, tc); });

    const Layer selector = cfg.resolved_selector();
    prep.grads = stage("gradients", prep.timings.gradients,
                       [&] { return per_sample_gradients(prep.model, prep.train_set, selector); });

    const int pd = static_cast<int>(prep.grads.rows.cols());
    prep.projected = cfg.projection.force || pd > cfg.projection.threshold;
    if (prep.projected) {
        prep.projection_dim = cfg.projection.target_dim > 0
                                  ? cfg.projection.target_dim
                                  : jl_min_dim(prep.grads.rows.rows(), cfg.projection.eps);
        if (prep.projection_dim >= pd) prep.projected = false;  // refuse useless projection
    }

    Matrix x = prep.grads.rows;
    if (prep.projected)
        x = sparse_random_projection(x, prep.projection_dim, mix_seed(cfg.seed, seeds::projection));
    if (cfg.detector.normalize) {
        prep.feature_mean = x.colwise().mean().transpose();
        prep.feature_scale.resize(x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double var =
                (x.col(j).array() - prep.feature_mean(j)).square().sum() /
                static_cast<double>(x.rows());
            prep.feature_scale(j) = std::sqrt(var) > 1e-12 ? std::sqrt(var) : 1.0;
            x.col(j) = (x.col(j).array() - prep.feature_mean(j)) / prep.feature_scale(j);
        }
    }
    prep.detector_features = std::move(x);
    return prep;
}

// Outlyingness (higher = more suspect) for one method over the prepared state.
inline Vector method_scores(const Prepared& prep, Method method, const PipelineConfig& cfg) {
    const Layer selector = cfg.resolved_selector();
    const Matrix& x = prep.detector_features;
    switch (method) {
        case Method::iforest: {
            const int psi = std::min<int>(cfg.detector.psi, static_cast<int>(x.rows()));
            const auto forest = fit_iforest(x, cfg.detector.n_trees, psi,
                                            mix_seed(cfg.seed, seeds::detector));
            return iforest_scores(forest, x);
        }
        case Method::l1: return l1_scores(x);
        case Method::l2: return l2_scores(x);
        case Method::semi_inlier: {
            const auto g_in = per_sample_gradients(prep.model, prep.test_set, selector);
            const Matrix x_in = apply_feature_transform(prep, g_in.rows, cfg);
            return semi_inlier_scores(x, x_in, cfg.detector.k_nn);
        }
        default: break;
    }

    // influence-based methods operate on raw gradients
    const Matrix& g = prep.grads.rows;
    Matrix g_eval = g;
    EvalSet eval_tag = EvalSet::train;
    if (cfg.influence_eval == "test") {
        g_eval = per_sample_gradients(prep.model, prep.test_set, selector).rows;
        eval_tag = EvalSet::external;
    } else {
        require(cfg.influence_eval == "train", "influence_eval must be train or test");
    }

    switch (method) {
        case Method::exact: {
            const Matrix h = hessian(prep.model, prep.train_set, selector, cfg.damping);
            return -exact_influence(g_eval, h, g, eval_tag).scores;
        }
        case Method::trace:
            return -trace_influence(g_eval, g, eval_tag).scores;
        case Method::lissa: {
            CurvatureOperator op(prep.model, prep.train_set, selector, cfg.damping);
            const Vector g_sum = g_eval.colwise().sum().transpose();
            const Vector u = lissa_inverse_hvp([&](const Vector& v) { return op.apply(v); },
                                               g_sum, cfg.lissa);
            return g * u;  // outlyingness = -scores = +g_j . H^-1 g_sum
        }
        case Method::self_exact: {
            const Matrix h = hessian(prep.model, prep.train_set, selector, cfg.damping);
            return self_influence_exact(g, h).scores.cwiseAbs();
        }
        case Method::self_lissa: {
            CurvatureOperator op(prep.model, prep.train_set, selector, cfg.damping);
            return self_influence_lissa(g, [&](const Vector& v) { return op.apply(v); },
                                        cfg.lissa)
                .scores.cwiseAbs();
        }
        default:
            throw ConfigError("unhandled method");
    }
}

struct TrimOutcome {
    TrimPlan plan;
    std::optional<DetectionMetrics> detection;
    double test_accuracy_after = 0.0;
    Eigen::Index survivors = 0;
    double trim_seconds = 0.0, retrain_seconds = 0.0, evaluate_seconds = 0.0;
};

// Select/trim/retrain/evaluate for precomputed outlyingness scores.
inline TrimOutcome finish_run(const Prepared& prep, const PipelineConfig& cfg,
                              const Vector& outlyingness, Eigen::Index k,
                              const std::string& detector_tag) {
    TrimOutcome out;
    out.plan = select_outliers(outlyingness, k, detector_tag);

    const LabeledDataset trimmed = stage("trim", out.trim_seconds, [&] {
        auto t = trim(prep.train_set, out.plan);
        require(t.size() > 0, "trim removed every sample; reduce the budget");
        return t;
    });
    out.survivors = trimmed.size();

    // No-op trims keep the already-trained model; real trims retrain with a
    // fresh derived seed on the survivor set.
    TrainedModel after = prep.model;
    if (!out.plan.flagged.empty()) {
        TrainConfig rc = cfg.train;
        rc.seed = mix_seed(cfg.seed, seeds::retrain);
        after = stage("retrain", out.retrain_seconds,
                      [&] { return train(trimmed, prep.model.spec, rc); });
    }

    out.test_accuracy_after = stage("evaluate", out.evaluate_seconds,
                                    [&] { return accuracy(after, prep.test_set); });
    if (prep.train_set.noise_mask)
        out.detection = detection_metrics(out.plan, *prep.train_set.noise_mask);
    return out;
}

}  // namespace detail

// --- config serialization ---------------------------------------------------------

inline nlohmann::json to_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["dataset"] = {{"source", cfg.dataset.source},     {"n_train", cfg.dataset.n_train},
                    {"n_test", cfg.dataset.n_test},     {"gap_noise", cfg.dataset.gap_noise},
                    {"flips_per_class", cfg.dataset.flips_per_class},
                    {"train_csv", cfg.dataset.train_csv}, {"test_csv", cfg.dataset.test_csv}};
    j["model"] = {{"arch", cfg.model.arch}, {"h1", cfg.model.h1}, {"h2", cfg.model.h2}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size}};
    j["method"] = to_string(cfg.method);
    j["budget"] = {{"fraction", cfg.budget.fraction}, {"count", cfg.budget.count}};
    j["layer_selector"] = cfg.layer_selector;
    j["influence_eval"] = cfg.influence_eval;
    j["projection"] = {{"threshold", cfg.projection.threshold},
                       {"target_dim", cfg.projection.target_dim},
                       {"eps", cfg.projection.eps},
                       {"force", cfg.projection.force}};
    j["detector"] = {{"n_trees", cfg.detector.n_trees},
                     {"psi", cfg.detector.psi},
                     {"k_nn", cfg.detector.k_nn},
                     {"normalize", cfg.detector.normalize}};
    j["lissa"] = {{"depth", cfg.lissa.depth},
                  {"scale", cfg.lissa.scale},
                  {"repeats", cfg.lissa.repeats},
                  {"damping", cfg.lissa.damping}};
    j["damping"] = cfg.damping;
    j["seed"] = cfg.seed;
    j["out"] = cfg.out;
    return j;
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    PipelineConfig cfg;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        cfg.dataset.source = d.value("source", cfg.dataset.source);
        cfg.dataset.n_train = d.value("n_train", cfg.dataset.n_train);
        cfg.dataset.n_test = d.value("n_test", cfg.dataset.n_test);
        cfg.dataset.gap_noise = d.value("gap_noise", cfg.dataset.gap_noise);
        cfg.dataset.flips_per_class = d.value("flips_per_class", cfg.dataset.flips_per_class);
        cfg.dataset.train_csv = d.value("train_csv", cfg.dataset.train_csv);
        cfg.dataset.test_csv = d.value("test_csv", cfg.dataset.test_csv);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.arch = m.value("arch", cfg.model.arch);
        cfg.model.h1 = m.value("h1", cfg.model.h1);
        cfg.model.h2 = m.value("h2", cfg.model.h2);
    }
    cfg.train = default_train_config(cfg.model.arch);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.lr = t.value("lr", cfg.train.lr);
        cfg.train.epochs = t.value("epochs", cfg.train.epochs);
        cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    }
    if (j.contains("method")) cfg.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("budget")) {
        const auto& b = j.at("budget");
        cfg.budget.fraction = b.value("fraction", cfg.budget.fraction);
        cfg.budget.count = b.value("count", cfg.budget.count);
    }
    cfg.layer_selector = j.value("layer_selector", cfg.layer_selector);
    cfg.influence_eval = j.value("influence_eval", cfg.influence_eval);
    if (j.contains("projection")) {
        const auto& p = j.at("projection");
        cfg.projection.threshold = p.value("threshold", cfg.projection.threshold);
        cfg.projection.target_dim = p.value("target_dim", cfg.projection.target_dim);
        cfg.projection.eps = p.value("eps", cfg.projection.eps);
        cfg.projection.force = p.value("force", cfg.projection.force);
    }
    if (j.contains("detector")) {
        const auto& d = j.at("detector");
        cfg.detector.n_trees = d.value("n_trees", cfg.detector.n_trees);
        cfg.detector.psi = d.value("psi", cfg.detector.psi);
        cfg.detector.k_nn = d.value("k_nn", cfg.detector.k_nn);
        cfg.detector.normalize = d.value("normalize", cfg.detector.normalize);
    }
    if (j.contains("lissa")) {
        const auto& l = j.at("lissa");
        cfg.lissa.depth = l.value("depth", cfg.lissa.depth);
        cfg.lissa.scale = l.value("scale", cfg.lissa.scale);
        cfg.lissa.repeats = l.value("repeats", cfg.lissa.repeats);
        cfg.lissa.damping = l.value("damping", cfg.lissa.damping);
    }
    cfg.damping = j.value("damping", cfg.damping);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out = j.value("out", cfg.out);
    return cfg;
}

inline nlohmann::json to_json(const EvalReport& rep, bool include_timings = true) {
    nlohmann::json j;
    j["config"] = rep.config_echo;
    j["seed"] = rep.seed;
    if (rep.detection)
        j["detection"] = {{"accuracy", rep.detection->accuracy},
                          {"precision", rep.detection->precision},
                          {"recall", rep.detection->recall}};
    else
        j["detection"] = nullptr;
    j["utility"] = {{"test_accuracy_before", rep.test_accuracy_before},
                    {"test_accuracy_after", rep.test_accuracy_after}};
    j["trim"] = {{"budget_k", rep.budget_k},
                 {"flagged", rep.flagged},
                 {"survivors", rep.survivors}};
    if (include_timings)
        j["timings"] = {{"generate_s", rep.timings.generate},
                        {"train_s", rep.timings.train},
                        {"gradients_s", rep.timings.gradients},
                        {"score_s", rep.timings.score},
                        {"trim_s", rep.timings.trim},
                        {"retrain_s", rep.timings.retrain},
                        {"evaluate_s", rep.timings.evaluate}};
    return j;
}

// --- pipeline ----------------------------------------------------------------------

// train -> per-sample gradients -> outlier/influence scores -> trim -> retrain
// -> evaluate, with per-stage wall-clock and a fully resolved config echo.
inline EvalReport run_pipeline(const PipelineConfig& cfg) {
    detail::Prepared prep = detail::prepare(cfg);

    EvalReport rep;
    rep.config_echo = to_json(cfg);
    rep.seed = cfg.seed;
    rep.timings = prep.timings;
    rep.test_accuracy_before = accuracy(prep.model, prep.test_set);

    const Vector outlyingness = detail::stage("score", rep.timings.score, [&] {
        return detail::method_scores(prep, cfg.method, cfg);
    });
    const Eigen::Index k = resolve_budget(cfg.budget, prep.train_set.size());
    const auto outcome =
        detail::finish_run(prep, cfg, outlyingness, k, to_string(cfg.method));

    rep.detection = outcome.detection;
    rep.test_accuracy_after = outcome.test_accuracy_after;
    rep.budget_k = k;
    rep.flagged = outcome.plan.flagged;
    rep.survivors = outcome.survivors;
    rep.timings.trim = outcome.trim_seconds;
    rep.timings.retrain = outcome.retrain_seconds;
    rep.timings.evaluate = outcome.evaluate_seconds;

    if (!cfg.out.empty()) {
        std::ofstream f(cfg.out);
        require(f.good(), "run_pipeline: cannot open output path " + cfg.out);
        f << to_json(rep).dump(2) << "\n";
    }
    return rep;
}

// --- comparison and sweeps -----------------------------------------------------------

struct MethodRow {
    Method method = Method::iforest;
    std::optional<DetectionMetrics> detection;
    double test_accuracy_before = 0.0;
    double test_accuracy_after = 0.0;
    double score_seconds = 0.0;
};

// One row per method over a shared dataset, model and budget.
inline std::vector<MethodRow> compare_methods(const PipelineConfig& cfg,
                                              const std::vector<Method>& methods) {
    require(!methods.empty(), "compare_methods: need at least one method");
    std::vector<Method> unique;
    for (Method m : methods)
        if (std::find(unique.begin(), unique.end(), m) == unique.end()) unique.push_back(m);

    detail::Prepared prep = detail::prepare(cfg);
    const double before = accuracy(prep.model, prep.test_set);
    const Eigen::Index k = resolve_budget(cfg.budget, prep.train_set.size());

    std::vector<MethodRow> rows;
    for (Method m : unique) {
        MethodRow row;
        row.method = m;
        row.test_accuracy_before = before;
        const Vector scores = detail::stage("score", row.score_seconds, [&] {
            return detail::method_scores(prep, m, cfg);
        });
        const auto outcome = detail::finish_run(prep, cfg, scores, k, to_string(m));
        row.detection = outcome.detection;
        row.test_accuracy_after = outcome.test_accuracy_after;
        rows.push_back(std::move(row));
    }
    return rows;
}

struct BudgetRow {
    double fraction = 0.0;
    Eigen::Index k = 0;
    std::optional<DetectionMetrics> detection;
    double test_accuracy_before = 0.0;
    double test_accuracy_after = 0.0;
};

// Scores once, then trims/retrains at each budget with shared seeds.
inline std::vector<BudgetRow> sweep_budget(const PipelineConfig& cfg,
                                           const std::vector<double>& budgets) {
    for (double b : budgets)
        require(b > 0.0 && b < 1.0, "sweep_budget: fractions must be in (0, 1)");

    detail::Prepared prep = detail::prepare(cfg);
    const double before = accuracy(prep.model, prep.test_set);
    double score_seconds = 0.0;
    const Vector scores = detail::stage("score", score_seconds, [&] {
        return detail::method_scores(prep, cfg.method, cfg);
    });

    std::vector<BudgetRow> rows;
    for (double fraction : budgets) {
        BudgetRow row;
        row.fraction = fraction;
        row.k = resolve_budget(BudgetConfig{fraction, -1}, prep.train_set.size());
        row.test_accuracy_before = before;
        const auto outcome =
            detail::finish_run(prep, cfg, scores, row.k, to_string(cfg.method));
        row.detection = outcome.detection;
        row.test_accuracy_after = outcome.test_accuracy_after;
        rows.push_back(std::move(row));
    }
    return rows;
}

struct TreeCountRow {
    int n_trees = 0;
    std::optional<DetectionMetrics> detection;
    double test_accuracy_after = 0.0;
};

// Stability of the forest detector in the number of trees.
inline std::vector<TreeCountRow> sweep_trees(const PipelineConfig& cfg,
                                             const std::vector<int>& counts) {
    for (int c : counts) require(c >= 1, "sweep_trees: counts must be at least 1");

    detail::Prepared prep = detail::prepare(cfg);
    const Eigen::Index k = resolve_budget(cfg.budget, prep.train_set.size());
    const Matrix& x = prep.detector_features;

    std::vector<TreeCountRow> rows;
    for (int count : counts) {
        TreeCountRow row;
        row.n_trees = count;
        const int psi = std::min<int>(cfg.detector.psi, static_cast<int>(x.rows()));
        const auto forest = fit_iforest(x, count, psi, mix_seed(cfg.seed, seeds::detector));
        const auto outcome = detail::finish_run(prep, cfg, iforest_scores(forest, x), k,
                                                "iforest");
        row.detection = outcome.detection;
        row.test_accuracy_after = outcome.test_accuracy_after;
        rows.push_back(std::move(row));
    }
    return rows;
}

struct TimingRow {
    Eigen::Index n = 0;
    double seconds = 0.0;     // per scoring pass
    double ratio_vs_prev = 0.0;
};

// Wall-clock of the scoring stage alone at increasing n with the gradient
// dimension fixed; repeats the stage until enough time accumulates so that
// microsecond-scale detectors still measure reliably.
inline std::vector<TimingRow> bench_timing(const PipelineConfig& cfg,
                                           const std::vector<Eigen::Index>& sizes) {
    require(cfg.dataset.source != "csv", "bench_timing: needs a generator-backed dataset");
    std::vector<TimingRow> rows;
    for (Eigen::Index n : sizes) {
        PipelineConfig c = cfg;
        c.dataset.n_train = static_cast<int>(n % 2 == 0 ? n : n + 1);
        detail::Prepared prep = detail::prepare(c);

        const double t0 = detail::now_seconds();
        int reps = 0;
        double elapsed = 0.0;
        do {
            (void)detail::method_scores(prep, c.method, c);
            ++reps;
            elapsed = detail::now_seconds() - t0;
        } while (elapsed < 0.05 && reps < 10000);

        TimingRow row;
        row.n = prep.train_set.size();
        row.seconds = elapsed / reps;
        row.ratio_vs_prev = rows.empty() ? 0.0 : row.seconds / rows.back().seconds;
        rows.push_back(row);
    }
    return rows;
}

// --- CSV table output ------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline void metrics_cells(std::ostream& os, const std::optional<DetectionMetrics>& m) {
    if (m)
        os << fmt(m->accuracy) << "," << fmt(m->precision) << "," << fmt(m->recall);
    else
        os << ",,";
}

}  // namespace detail

inline void write_compare_csv(const std::vector<MethodRow>& rows, std::ostream& os) {
    os << "method,detection_accuracy,precision,recall,test_acc_before,test_acc_after,"
          "score_seconds\n";
    for (const auto& r : rows) {
        os << to_string(r.method) << ",";
        detail::metrics_cells(os, r.detection);
        os << "," << detail::fmt(r.test_accuracy_before) << ","
           << detail::fmt(r.test_accuracy_after) << "," << detail::fmt(r.score_seconds)
           << "\n";
    }
}

inline void write_budget_csv(const std::vector<BudgetRow>& rows, std::ostream& os) {
    os << "budget_fraction,budget_k,detection_accuracy,precision,recall,"
          "test_acc_before,test_acc_after\n";
    for (const auto& r : rows) {
        os << detail::fmt(r.fraction) << "," << r.k << ",";
        detail::metrics_cells(os, r.detection);
        os << "," << detail::fmt(r.test_accuracy_before) << ","
           << detail::fmt(r.test_accuracy_after) << "\n";
    }
}

inline void write_trees_csv(const std::vector<TreeCountRow>& rows, std::ostream& os) {
    os << "n_trees,detection_accuracy,precision,recall,test_acc_after\n";
    for (const auto& r : rows) {
        os << r.n_trees << ",";
        detail::metrics_cells(os, r.detection);
        os << "," << detail::fmt(r.test_accuracy_after) << "\n";
    }
}

inline void write_bench_csv(const std::vector<TimingRow>& rows, std::ostream& os) {
    os << "n,score_seconds,ratio_vs_prev\n";
    for (const auto& r : rows)
        os << r.n << "," << detail::fmt(r.seconds) << "," << detail::fmt(r.ratio_vs_prev)
           << "\n";
}

}  // namespace gradtrim
