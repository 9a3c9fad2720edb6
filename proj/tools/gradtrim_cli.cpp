// Command-line front end: dataset generation, training, gradient extraction,
// outlier/influence scoring, trimming and the full trim-retrain-evaluate
// pipeline, driven by a JSON config. Exit codes: 0 ok, 1 config error,
// 2 numerical failure.

#include "gradtrim/gradtrim.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace gt = gradtrim;

namespace {

gt::PipelineConfig load_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream in(path);
    gt::require(in.good(), "cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw gt::ConfigError("config parse error in " + path + ": " + e.what());
    }
    return gt::pipeline_config_from_json(j);
}

void write_matrix_csv(const gt::Matrix& m, const std::string& path) {
    std::ofstream out(path);
    gt::require(out.good(), "cannot open " + path);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        out << "g" << j << (j + 1 < m.cols() ? "," : "\n");
    char buf[64];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
            out << buf << (j + 1 < m.cols() ? "," : "\n");
        }
}

gt::Matrix read_matrix_csv(const std::string& path) {
    std::ifstream in(path);
    gt::require(in.good(), "cannot open " + path);
    std::string line;
    gt::require(static_cast<bool>(std::getline(in, line)), "empty matrix file " + path);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            row.push_back(std::stod(cell));
        if (!rows.empty())
            gt::require(row.size() == rows.front().size(), "ragged matrix row in " + path);
        rows.push_back(std::move(row));
    }
    gt::require(!rows.empty(), "no data rows in " + path);
    gt::Matrix m(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows.front().size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    return m;
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    gt::require(out.good(), "cannot open output path " + path);
    out << text;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

gt::Layer parse_selector(const std::string& s, const gt::TrainedModel& model) {
    if (s == "all") return gt::Layer::all;
    if (s == "last_layer") return gt::Layer::last_layer;
    if (s == "auto")
        return model.spec.arch == gt::Arch::mlp ? gt::Layer::last_layer : gt::Layer::all;
    throw gt::ConfigError("layer must be auto, all or last_layer");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradtrim: find and trim detrimental training samples via "
                 "gradient-space outlier detection and influence scores"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, model_path, grads_path, inliers_path,
        plan_path;
    std::uint64_t seed = 0;
    bool seed_set = false;

    app.add_option("--config", config_path, "pipeline config JSON");
    app.add_option("--out", out_path, "output path");
    auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides config)");

    auto* gen = app.add_subcommand("gen-data", "generate synthetic train/test CSVs");
    auto* tr = app.add_subcommand("train", "train a model and save it as JSON");
    tr->add_option("--data", data_path, "training CSV (overrides config dataset)");
    auto* gr = app.add_subcommand("grads", "per-sample gradients at a trained model");
    gr->add_option("--model", model_path, "model JSON")->required();
    gr->add_option("--data", data_path, "dataset CSV")->required();
    std::string layer = "auto";
    gr->add_option("--layer", layer, "auto | all | last_layer");
    auto* sc = app.add_subcommand("score", "outlier/influence scores and a trim plan");
    sc->add_option("--grads", grads_path, "gradient matrix CSV (detector methods)");
    sc->add_option("--inliers", inliers_path, "inlier gradient CSV (semi_inlier)");
    sc->add_option("--model", model_path, "model JSON (influence methods)");
    sc->add_option("--data", data_path, "training CSV (influence methods)");
    std::string method_flag;
    sc->add_option("--method", method_flag, "override config method");
    Eigen::Index budget_k = -1;
    sc->add_option("--budget-k", budget_k, "absolute trimming budget");
    auto* tm = app.add_subcommand("trim", "remove flagged samples from a CSV");
    tm->add_option("--data", data_path, "dataset CSV")->required();
    tm->add_option("--plan", plan_path, "trim plan JSON")->required();
    auto* pl = app.add_subcommand("pipeline", "full score -> trim -> retrain -> evaluate run");
    auto* cm = app.add_subcommand("compare", "one pipeline row per method, shared data/model");
    std::string methods_flag = "iforest,l1,l2,exact,trace,lissa";
    cm->add_option("--methods", methods_flag, "comma-separated method list");
    auto* sb = app.add_subcommand("sweep-budget", "pipeline across trimming budgets");
    std::string budgets_flag = "0.025,0.05,0.075,0.1,0.125";
    sb->add_option("--budgets", budgets_flag, "comma-separated fractions");
    auto* st = app.add_subcommand("sweep-trees", "iforest pipeline across tree counts");
    std::string counts_flag = "25,50,100,200";
    st->add_option("--counts", counts_flag, "comma-separated tree counts");
    auto* bn = app.add_subcommand("bench", "scoring-stage wall clock across dataset sizes");
    std::string sizes_flag = "500,1000";
    bn->add_option("--sizes", sizes_flag, "comma-separated training-set sizes");

    for (auto* sub : app.get_subcommands({}))
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    seed_set = seed_opt->count() > 0;

    try {
        gt::PipelineConfig cfg = load_config(config_path);
        if (seed_set) cfg.seed = seed;
        if (!out_path.empty()) cfg.out = out_path;

        if (gen->parsed()) {
            const std::string prefix = cfg.out.empty() ? "data" : cfg.out;
            auto [train_set, test_set] = gt::make_dataset(cfg);
            gt::write_csv(train_set, prefix + "_train.csv");
            gt::write_csv(test_set, prefix + "_test.csv");
            std::cout << "wrote " << prefix << "_train.csv (" << train_set.size()
                      << " rows) and " << prefix << "_test.csv (" << test_set.size()
                      << " rows)\n";
        } else if (tr->parsed()) {
            if (!data_path.empty()) {
                cfg.dataset.source = "csv";
                cfg.dataset.train_csv = data_path;
                cfg.dataset.test_csv.clear();
            }
            auto [train_set, test_set] = gt::make_dataset(cfg);
            gt::TrainConfig tc = cfg.train;
            tc.seed = gt::mix_seed(cfg.seed, gt::seeds::train);
            const auto model =
                gt::train(train_set, gt::resolve_model_spec(cfg, train_set), tc);
            const std::string path = cfg.out.empty() ? "model.json" : cfg.out;
            gt::save_model(model, path);
            std::cout << "trained (final loss " << model.final_train_loss
                      << ", train accuracy " << gt::accuracy(model, train_set)
                      << "); saved to " << path << "\n";
        } else if (gr->parsed()) {
            const auto model = gt::load_model(model_path);
            const auto ds = gt::read_csv(data_path);
            const auto g =
                gt::per_sample_gradients(model, ds, parse_selector(layer, model));
            const std::string path = cfg.out.empty() ? "grads.csv" : cfg.out;
            write_matrix_csv(g.rows, path);
            std::cout << "wrote " << g.rows.rows() << "x" << g.rows.cols()
                      << " gradient matrix to " << path << "\n";
        } else if (sc->parsed()) {
            if (!method_flag.empty()) cfg.method = gt::method_from_string(method_flag);
            gt::Vector outlyingness;
            Eigen::Index n = 0;
            switch (cfg.method) {
                case gt::Method::iforest:
                case gt::Method::l1:
                case gt::Method::l2:
                case gt::Method::semi_inlier: {
                    gt::require(!grads_path.empty(),
                                "score: --grads is required for detector methods");
                    const gt::Matrix x = read_matrix_csv(grads_path);
                    n = x.rows();
                    if (cfg.method == gt::Method::iforest) {
                        const int psi =
                            std::min<int>(cfg.detector.psi, static_cast<int>(x.rows()));
                        const auto forest =
                            gt::fit_iforest(x, cfg.detector.n_trees, psi,
                                            gt::mix_seed(cfg.seed, gt::seeds::detector));
                        outlyingness = gt::iforest_scores(forest, x);
                    } else if (cfg.method == gt::Method::l1) {
                        outlyingness = gt::l1_scores(x);
                    } else if (cfg.method == gt::Method::l2) {
                        outlyingness = gt::l2_scores(x);
                    } else {
                        gt::require(!inliers_path.empty(),
                                    "score: --inliers is required for semi_inlier");
                        outlyingness = gt::semi_inlier_scores(x, read_matrix_csv(inliers_path),
                                                              cfg.detector.k_nn);
                    }
                    break;
                }
                default: {
                    gt::require(!model_path.empty() && !data_path.empty(),
                                "score: --model and --data are required for influence methods");
                    const auto model = gt::load_model(model_path);
                    const auto ds = gt::read_csv(data_path);
                    const auto sel = parse_selector(cfg.layer_selector, model);
                    const auto g = gt::per_sample_gradients(model, ds, sel);
                    n = g.rows.rows();
                    if (cfg.method == gt::Method::exact) {
                        const auto h = gt::hessian(model, ds, sel, cfg.damping);
                        outlyingness = -gt::exact_influence(g.rows, h, g.rows).scores;
                    } else if (cfg.method == gt::Method::trace) {
                        outlyingness = -gt::trace_influence(g.rows, g.rows).scores;
                    } else if (cfg.method == gt::Method::self_exact) {
                        const auto h = gt::hessian(model, ds, sel, cfg.damping);
                        outlyingness = gt::self_influence_exact(g.rows, h).scores.cwiseAbs();
                    } else {
                        gt::CurvatureOperator op(model, ds, sel, cfg.damping);
                        auto hvp_fn = [&](const gt::Vector& v) { return op.apply(v); };
                        if (cfg.method == gt::Method::lissa) {
                            const gt::Vector g_sum = g.rows.colwise().sum().transpose();
                            const gt::Vector u =
                                gt::lissa_inverse_hvp(hvp_fn, g_sum, cfg.lissa);
                            outlyingness = g.rows * u;
                        } else {
                            outlyingness =
                                gt::self_influence_lissa(g.rows, hvp_fn, cfg.lissa)
                                    .scores.cwiseAbs();
                        }
                    }
                }
            }
            const Eigen::Index k =
                budget_k >= 0 ? std::min(budget_k, n) : gt::resolve_budget(cfg.budget, n);
            const auto plan = gt::select_outliers(outlyingness, k, gt::to_string(cfg.method));
            write_text(cfg.out.empty() ? "plan.json" : cfg.out,
                       gt::to_json(plan).dump(2) + "\n");
            std::cout << "flagged " << plan.flagged.size() << " of " << n << " samples\n";
        } else if (tm->parsed()) {
            const auto ds = gt::read_csv(data_path);
            std::ifstream pin(plan_path);
            gt::require(pin.good(), "cannot open plan " + plan_path);
            nlohmann::json pj;
            pin >> pj;
            const auto trimmed = gt::trim(ds, gt::trim_plan_from_json(pj));
            const std::string path = cfg.out.empty() ? "trimmed.csv" : cfg.out;
            gt::write_csv(trimmed, path);
            std::cout << "kept " << trimmed.size() << " of " << ds.size() << " samples -> "
                      << path << "\n";
        } else if (pl->parsed()) {
            const auto rep = gt::run_pipeline(cfg);
            if (cfg.out.empty()) std::cout << gt::to_json(rep).dump(2) << "\n";
            std::cerr << "test accuracy " << rep.test_accuracy_before << " -> "
                      << rep.test_accuracy_after;
            if (rep.detection)
                std::cerr << ", detection accuracy " << rep.detection->accuracy;
            std::cerr << "\n";
        } else if (cm->parsed()) {
            std::vector<gt::Method> methods;
            for (const auto& name : split_list(methods_flag))
                methods.push_back(gt::method_from_string(name));
            const auto rows = gt::compare_methods(cfg, methods);
            std::ostringstream os;
            gt::write_compare_csv(rows, os);
            write_text(cfg.out, os.str());
        } else if (sb->parsed()) {
            std::vector<double> budgets;
            for (const auto& b : split_list(budgets_flag)) budgets.push_back(std::stod(b));
            const auto rows = gt::sweep_budget(cfg, budgets);
            std::ostringstream os;
            gt::write_budget_csv(rows, os);
            write_text(cfg.out, os.str());
        } else if (st->parsed()) {
            std::vector<int> counts;
            for (const auto& c : split_list(counts_flag)) counts.push_back(std::stoi(c));
            const auto rows = gt::sweep_trees(cfg, counts);
            std::ostringstream os;
            gt::write_trees_csv(rows, os);
            write_text(cfg.out, os.str());
        } else if (bn->parsed()) {
            std::vector<Eigen::Index> sizes;
            for (const auto& s : split_list(sizes_flag)) sizes.push_back(std::stoll(s));
            const auto rows = gt::bench_timing(cfg, sizes);
            std::ostringstream os;
            gt::write_bench_csv(rows, os);
            write_text(cfg.out, os.str());
        }
    } catch (const gt::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const gt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
