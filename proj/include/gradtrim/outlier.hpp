#pragma once

#include "gradtrim/common.hpp"
#include "gradtrim/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

namespace gradtrim {

// --- isolation forest -----------------------------------------------------

// Average unsuccessful-search path length of a binary search tree over n
// points; normalizes isolation depths. Piecewise: c(1)=0, c(2)=1, and the
// harmonic-number approximation above that.
inline double average_path_length(int n) {
    constexpr double kEulerGamma = 0.5772156649;
    if (n <= 1) return 0.0;
    if (n == 2) return 1.0;
    return 2.0 * (std::log(static_cast<double>(n - 1)) + kEulerGamma) -
           2.0 * static_cast<double>(n - 1) / static_cast<double>(n);
}

struct IsoNode {
    int feature = -1;     // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int size = 0;         // points routed to this node at fit time (leaves)

    bool is_leaf() const { return feature < 0; }
};

struct IsoTree {
    std::vector<IsoNode> nodes;  // node 0 is the root
};

struct IsolationForestModel {
    std::vector<IsoTree> trees;
    int n_trees = 0;
    int psi = 0;          // subsample size per tree
    int height_limit = 0; // ceil(log2 psi)
    std::uint64_t seed = 0;
    Eigen::Index dim = 0;
};

namespace detail {

inline int build_itree(const Matrix& x, std::vector<Eigen::Index>& rows, int lo, int hi,
                       int depth, int height_limit, Rng& rng, IsoTree& tree) {
    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes[node_id].size = hi - lo;
    if (hi - lo <= 1 || depth >= height_limit) return node_id;

    // candidate features are those with spread in the routed subsample
    std::vector<int> candidates;
    std::vector<double> lows(static_cast<std::size_t>(x.cols()));
    std::vector<double> highs(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index f = 0; f < x.cols(); ++f) {
        double mn = x(rows[static_cast<std::size_t>(lo)], f);
        double mx = mn;
        for (int i = lo + 1; i < hi; ++i) {
            const double v = x(rows[static_cast<std::size_t>(i)], f);
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        lows[static_cast<std::size_t>(f)] = mn;
        highs[static_cast<std::size_t>(f)] = mx;
        if (mx > mn) candidates.push_back(static_cast<int>(f));
    }
    if (candidates.empty()) return node_id;  // all routed points identical

    const int feature = candidates[rng.index(candidates.size())];
    const double mn = lows[static_cast<std::size_t>(feature)];
    const double mx = highs[static_cast<std::size_t>(feature)];
    double split = rng.uniform(mn, mx);
    if (!(split > mn)) split = std::nextafter(mn, mx);  // keep both sides nonempty

    auto mid_it = std::partition(rows.begin() + lo, rows.begin() + hi,
                                 [&](Eigen::Index r) { return x(r, feature) < split; });
    const int mid = static_cast<int>(mid_it - rows.begin());

    tree.nodes[node_id].feature = feature;
    tree.nodes[node_id].split = split;
    const int left = build_itree(x, rows, lo, mid, depth + 1, height_limit, rng, tree);
    tree.nodes[node_id].left = left;
    const int right = build_itree(x, rows, mid, hi, depth + 1, height_limit, rng, tree);
    tree.nodes[node_id].right = right;
    return node_id;
}

}  // namespace detail

// Builds n_trees isolation trees, each on an independent uniform subsample of
// psi rows. psi larger than n is clamped to n. Per-tree RNG streams are
// derived from the seed, so the forest is a pure function of (x, params, seed).
inline IsolationForestModel fit_iforest(const Matrix& x, int n_trees, int psi,
                                        std::uint64_t seed) {
    require(x.rows() >= 2, "fit_iforest: need at least two samples");
    require(x.cols() >= 1, "fit_iforest: empty feature space");
    require(all_finite(x), "fit_iforest: non-finite input");
    require(n_trees >= 1, "fit_iforest: need at least one tree");
    require(psi >= 2, "fit_iforest: subsample size must be at least 2");

    IsolationForestModel model;
    model.n_trees = n_trees;
    model.psi = std::min<int>(psi, static_cast<int>(x.rows()));
    model.height_limit =
        static_cast<int>(std::ceil(std::log2(static_cast<double>(model.psi))));
    model.seed = seed;
    model.dim = x.cols();
    model.trees.resize(static_cast<std::size_t>(n_trees));

    for (int t = 0; t < n_trees; ++t) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
        auto picks = rng.sample_without_replacement(static_cast<std::size_t>(x.rows()),
                                                    static_cast<std::size_t>(model.psi));
        std::vector<Eigen::Index> rows(picks.size());
        for (std::size_t i = 0; i < picks.size(); ++i)
            rows[i] = static_cast<Eigen::Index>(picks[i]);
        detail::build_itree(x, rows, 0, static_cast<int>(rows.size()), 0,
                            model.height_limit, rng, model.trees[static_cast<std::size_t>(t)]);
    }
    return model;
}

// Path length of one point: edges traversed plus the average-path adjustment
// for the subsample still pooled at the reached leaf.
inline double itree_path_length(const IsoTree& tree, const Matrix& x, Eigen::Index row) {
    int node = 0;
    double depth = 0.0;
    while (!tree.nodes[static_cast<std::size_t>(node)].is_leaf()) {
        const auto& nd = tree.nodes[static_cast<std::size_t>(node)];
        node = x(row, nd.feature) < nd.split ? nd.left : nd.right;
        depth += 1.0;
    }
    return depth + average_path_length(tree.nodes[static_cast<std::size_t>(node)].size);
}

// Anomaly score s(x) = 2^(-E[h(x)] / c(psi)), in (0, 1]; higher = more outlying.
inline Vector iforest_scores(const IsolationForestModel& model, const Matrix& x) {
    require(x.cols() == model.dim, "iforest_scores: feature count does not match fit");
    require(!model.trees.empty(), "iforest_scores: empty forest");
    const double norm = average_path_length(model.psi);
    Vector scores(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double total = 0.0;
        for (const auto& tree : model.trees) total += itree_path_length(tree, x, i);
        const double mean_depth = total / static_cast<double>(model.trees.size());
        scores(i) = std::exp2(-mean_depth / norm);
    }
    return scores;
}

// --- norm detectors --------------------------------------------------------

inline Vector l1_scores(const Matrix& g) {
    require(all_finite(g), "l1_scores: non-finite input");
    return g.cwiseAbs().rowwise().sum();
}

inline Vector l2_scores(const Matrix& g) {
    require(all_finite(g), "l2_scores: non-finite input");
    return g.rowwise().norm();
}

// Mean distance to the k nearest rows of an inlier reference set; large
// distances mark samples that look unlike the (e.g. validation) distribution.
inline Vector semi_inlier_scores(const Matrix& g_train, const Matrix& g_inliers, int k_nn) {
    require(g_inliers.rows() > 0, "semi_inlier_scores: empty inlier set");
    require(g_train.cols() == g_inliers.cols(),
            "semi_inlier_scores: gradient dimensions differ");
    require(k_nn >= 1 && k_nn <= g_inliers.rows(),
            "semi_inlier_scores: k_nn must be in [1, |inliers|]");

    Vector scores(g_train.rows());
    std::vector<double> dist(static_cast<std::size_t>(g_inliers.rows()));
    for (Eigen::Index i = 0; i < g_train.rows(); ++i) {
        for (Eigen::Index j = 0; j < g_inliers.rows(); ++j)
            dist[static_cast<std::size_t>(j)] =
                (g_train.row(i) - g_inliers.row(j)).norm();
        std::nth_element(dist.begin(), dist.begin() + (k_nn - 1), dist.end());
        double total = 0.0;
        for (int k = 0; k < k_nn; ++k) total += dist[static_cast<std::size_t>(k)];
        scores(i) = total / static_cast<double>(k_nn);
    }
    return scores;
}

// --- sparse random projection ----------------------------------------------

// Johnson-Lindenstrauss minimum dimension preserving pairwise distances to
// within (1 +- eps): ceil(4 ln n / (eps^2/2 - eps^3/3)).
inline int jl_min_dim(Eigen::Index n_samples, double eps) {
    require(eps > 0.0 && eps < 1.0, "jl_min_dim: eps must be in (0, 1)");
    require(n_samples >= 2, "jl_min_dim: need at least two samples");
    const double denom = eps * eps / 2.0 - eps * eps * eps / 3.0;
    return static_cast<int>(std::ceil(4.0 * std::log(static_cast<double>(n_samples)) / denom));
}

// Projects n x p rows to n x m with a sparse sign matrix: entries are
// +-sqrt(s/m) with probability 1/(2s) each and 0 otherwise, s = sqrt(p).
// Preserves squared norms in expectation. If m >= p the projection is
// refused and the input passes through unchanged (with a warning).
inline Matrix sparse_random_projection(const Matrix& g, int target_dim, std::uint64_t seed) {
    require(all_finite(g), "sparse_random_projection: non-finite input");
    require(target_dim >= 1, "sparse_random_projection: target dim must be positive");
    const Eigen::Index p = g.cols();
    if (target_dim >= p) {
        std::cerr << "sparse_random_projection: target dim " << target_dim
                  << " >= input dim " << p << "; passing data through unchanged\n";
        return g;
    }

    const double s = std::sqrt(static_cast<double>(p));
    const double p_nonzero = 1.0 / s;
    const double value = std::sqrt(s / static_cast<double>(target_dim));

    Rng rng(seed);
    Matrix out = Matrix::Zero(g.rows(), target_dim);
    for (Eigen::Index j = 0; j < p; ++j) {
        for (int i = 0; i < target_dim; ++i) {
            const double u = rng.uniform();
            if (u < p_nonzero)
                out.col(i) += (u < 0.5 * p_nonzero ? value : -value) * g.col(j);
        }
    }
    return out;
}

inline Matrix sparse_random_projection_eps(const Matrix& g, double eps, std::uint64_t seed) {
    return sparse_random_projection(g, jl_min_dim(g.rows(), eps), seed);
}

// --- trimming ---------------------------------------------------------------

struct TrimPlan {
    std::vector<Eigen::Index> flagged;  // score-descending, ties by index
    Eigen::Index budget_k = 0;
    Vector scores;                      // outlyingness used for ranking
    std::string detector;
};

// Top-k indices by score descending, ties broken by ascending index.
inline TrimPlan select_outliers(const Vector& scores, Eigen::Index budget_k,
                                const std::string& detector = "") {
    require(budget_k >= 0, "select_outliers: negative budget");
    require(all_finite(scores), "select_outliers: non-finite score");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return a < b;
    });

    TrimPlan plan;
    plan.budget_k = budget_k;
    plan.scores = scores;
    plan.detector = detector;
    const Eigen::Index take = std::min<Eigen::Index>(budget_k, scores.size());
    plan.flagged.assign(order.begin(), order.begin() + take);
    return plan;
}

// Removes flagged samples; survivor order and noise masks are preserved.
inline LabeledDataset trim(const LabeledDataset& ds, const TrimPlan& plan) {
    std::vector<bool> drop(static_cast<std::size_t>(ds.size()), false);
    for (Eigen::Index idx : plan.flagged) {
        require(idx >= 0 && idx < ds.size(), "trim: flagged index out of range");
        require(!drop[static_cast<std::size_t>(idx)], "trim: duplicate flagged index");
        drop[static_cast<std::size_t>(idx)] = true;
    }

    const Eigen::Index kept = ds.size() - static_cast<Eigen::Index>(plan.flagged.size());
    LabeledDataset out;
    out.name = ds.name;
    out.features.resize(kept, ds.dim());
    out.labels.reserve(static_cast<std::size_t>(kept));
    if (ds.noise_mask) out.noise_mask = std::vector<bool>();

    Eigen::Index w = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        if (drop[static_cast<std::size_t>(i)]) continue;
        out.features.row(w++) = ds.features.row(i);
        out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        if (ds.noise_mask) out.noise_mask->push_back((*ds.noise_mask)[static_cast<std::size_t>(i)]);
    }
    return out;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json to_json(const TrimPlan& plan) {
    return {{"detector", plan.detector},
            {"budget_k", plan.budget_k},
            {"flagged", plan.flagged},
            {"scores", std::vector<double>(plan.scores.data(),
                                           plan.scores.data() + plan.scores.size())}};
}

inline TrimPlan trim_plan_from_json(const nlohmann::json& j) {
    TrimPlan plan;
    plan.detector = j.value("detector", "");
    plan.budget_k = j.at("budget_k").get<Eigen::Index>();
    plan.flagged = j.at("flagged").get<std::vector<Eigen::Index>>();
    const auto scores = j.at("scores").get<std::vector<double>>();
    plan.scores = Eigen::Map<const Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
    return plan;
}

inline nlohmann::json to_json(const IsolationForestModel& model) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& tree : model.trees) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& nd : tree.nodes)
            nodes.push_back({{"feature", nd.feature},
                             {"split", nd.split},
                             {"left", nd.left},
                             {"right", nd.right},
                             {"size", nd.size}});
        trees.push_back(std::move(nodes));
    }
    return {{"n_trees", model.n_trees}, {"psi", model.psi},
            {"height_limit", model.height_limit}, {"seed", model.seed},
            {"dim", model.dim}, {"trees", std::move(trees)}};
}

inline IsolationForestModel iforest_from_json(const nlohmann::json& j) {
    IsolationForestModel model;
    model.n_trees = j.at("n_trees").get<int>();
    model.psi = j.at("psi").get<int>();
    model.height_limit = j.at("height_limit").get<int>();
    model.seed = j.at("seed").get<std::uint64_t>();
    model.dim = j.at("dim").get<Eigen::Index>();
    for (const auto& tnodes : j.at("trees")) {
        IsoTree tree;
        for (const auto& nj : tnodes) {
            IsoNode nd;
            nd.feature = nj.at("feature").get<int>();
            nd.split = nj.at("split").get<double>();
            nd.left = nj.at("left").get<int>();
            nd.right = nj.at("right").get<int>();
            nd.size = nj.at("size").get<int>();
            tree.nodes.push_back(nd);
        }
        model.trees.push_back(std::move(tree));
    }
    return model;
}

}  // namespace gradtrim
