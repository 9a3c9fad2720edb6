#pragma once

#include "gradtrim/common.hpp"
#include "gradtrim/dataset.hpp"
#include "gradtrim/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace gradtrim {

enum class InfluenceMethod { exact, lissa, trace, self_exact, self_lissa };
enum class EvalSet { train, external };

inline std::string to_string(InfluenceMethod m) {
    switch (m) {
        case InfluenceMethod::exact: return "exact";
        case InfluenceMethod::lissa: return "lissa";
        case InfluenceMethod::trace: return "trace";
        case InfluenceMethod::self_exact: return "self_exact";
        case InfluenceMethod::self_lissa: return "self_lissa";
    }
    return "?";
}

struct InfluenceReport {
    InfluenceMethod method = InfluenceMethod::exact;
    Vector scores;
    std::vector<int> discrete;  // 0 = detrimental, 1 = beneficial
    EvalSet eval_set = EvalSet::train;
};

// 0 (detrimental) iff score < 0; exact zeros count as beneficial.
inline std::vector<int> discretize(const Vector& scores) {
    require(all_finite(scores), "discretize: non-finite score");
    std::vector<int> out(static_cast<std::size_t>(scores.size()));
    for (Eigen::Index i = 0; i < scores.size(); ++i)
        out[static_cast<std::size_t>(i)] = scores(i) < 0.0 ? 0 : 1;
    return out;
}

namespace detail {

// LDLT solve with a crude condition estimate from the factor diagonal.
struct SpdSolver {
    explicit SpdSolver(const Matrix& h) : ldlt(h) {
        require(h.rows() == h.cols(), "influence: hessian must be square");
        if (ldlt.info() != Eigen::Success)
            throw NumericError("influence: hessian factorization failed");
        const Vector d = ldlt.vectorD().cwiseAbs();
        const double dmax = d.maxCoeff();
        const double dmin = d.minCoeff();
        if (!(dmin > 0.0) || dmax / dmin > 1e14)
            throw NumericError(
                "influence: hessian is singular or near-singular (condition estimate ~" +
                std::to_string(dmin > 0.0 ? dmax / dmin : std::numeric_limits<double>::infinity()) +
                "); add damping");
    }
    Eigen::LDLT<Matrix> ldlt;
};

}  // namespace detail

// scores[j] = -g_sum^T H^{-1} g_j, with g_sum the summed eval-set gradient.
inline InfluenceReport exact_influence(const Matrix& g_eval, const Matrix& h,
                                       const Matrix& g_train,
                                       EvalSet eval_set = EvalSet::train) {
    require(g_eval.cols() == g_train.cols(), "exact_influence: gradient dims differ");
    require(h.rows() == g_train.cols(), "exact_influence: hessian dim mismatch");
    detail::SpdSolver solver(h);
    const Vector g_sum = g_eval.colwise().sum().transpose();
    const Vector u = solver.ldlt.solve(g_sum);

    InfluenceReport rep;
    rep.method = InfluenceMethod::exact;
    rep.eval_set = eval_set;
    rep.scores = -(g_train * u);
    rep.discrete = discretize(rep.scores);
    return rep;
}

// scores[j] = g_sum^T g_j: gradient similarity at the final checkpoint.
inline InfluenceReport trace_influence(const Matrix& g_eval, const Matrix& g_train,
                                       EvalSet eval_set = EvalSet::train) {
    require(g_eval.cols() == g_train.cols(), "trace_influence: gradient dims differ");
    const Vector g_sum = g_eval.colwise().sum().transpose();

    InfluenceReport rep;
    rep.method = InfluenceMethod::trace;
    rep.eval_set = eval_set;
    rep.scores = g_train * g_sum;
    rep.discrete = discretize(rep.scores);
    return rep;
}

// --- LiSSA -------------------------------------------------------------------

using HvpFn = std::function<Vector(const Vector&)>;

struct LissaConfig {
    int depth = 5000;
    double scale = 0.0;  // <= 0 selects 1 / (1.1 * spectral-norm estimate)
    int repeats = 4;
    double damping = 0.01;
};

// Power iteration on an abstract operator; returns a spectral-norm estimate.
inline double spectral_norm_estimate(const HvpFn& op, Eigen::Index dim, int iters = 100,
                                     std::uint64_t seed = 0x5eedULL) {
    Rng rng(seed);
    Vector v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) v(i) = rng.normal();
    v.normalize();
    double norm = 0.0;
    for (int t = 0; t < iters; ++t) {
        Vector w = op(v);
        norm = w.norm();
        if (!(norm > 1e-300)) return 0.0;
        v = w / norm;
    }
    return norm;
}

// Truncated Neumann series for H^{-1} v:
//   r_0 = v,  r_t = v + (I - scale*H) r_{t-1},  result = scale * mean(r_depth).
// Requires the scaled Hessian to contract; with the automatic scale this holds
// by construction, a caller-supplied scale is checked via power iteration on
// the residual operator.
inline Vector lissa_inverse_hvp(const HvpFn& hvp, const Vector& v, const LissaConfig& cfg) {
    require(cfg.depth >= 0, "lissa: negative depth");
    require(cfg.repeats >= 1, "lissa: repeats must be at least 1");
    const double vnorm = v.norm();
    if (vnorm == 0.0) return Vector::Zero(v.size());

    double scale = cfg.scale;
    if (scale <= 0.0) {
        const double top = spectral_norm_estimate(hvp, v.size());
        if (!(top > 0.0)) throw NumericError("lissa: hessian operator looks like zero");
        scale = 1.0 / (1.1 * top);
    } else {
        const double rho = spectral_norm_estimate(
            [&](const Vector& x) { return (x - scale * hvp(x)).eval(); }, v.size());
        if (rho >= 1.0 + 1e-9)
            throw NumericError("lissa: scaled hessian does not contract (|I - sH| ~ " +
                               std::to_string(rho) + ")");
    }

    Vector acc = Vector::Zero(v.size());
    for (int rep = 0; rep < cfg.repeats; ++rep) {
        Vector r = v;
        double prev = vnorm;
        for (int t = 0; t < cfg.depth; ++t) {
            r = v + r - scale * hvp(r);
            const double now = r.norm();
            if (!std::isfinite(now) || now > 10.0 * std::max(vnorm, prev))
                throw NumericError("lissa: diverged at iteration " + std::to_string(t + 1));
            prev = now;
        }
        acc += r;
    }
    return (scale / static_cast<double>(cfg.repeats)) * acc;
}

// --- self influence ------------------------------------------------------------

// scores[j] = -g_j^T H^{-1} g_j (non-positive for positive definite H).
// Trimming ranks by |score| descending: the most self-influential samples are
// the most suspect.
inline InfluenceReport self_influence_exact(const Matrix& g_train, const Matrix& h) {
    require(h.rows() == g_train.cols(), "self_influence: hessian dim mismatch");
    detail::SpdSolver solver(h);
    const Matrix u = solver.ldlt.solve(g_train.transpose());

    InfluenceReport rep;
    rep.method = InfluenceMethod::self_exact;
    rep.scores.resize(g_train.rows());
    for (Eigen::Index j = 0; j < g_train.rows(); ++j)
        rep.scores(j) = -g_train.row(j).dot(u.col(j));
    rep.discrete = discretize(rep.scores);
    return rep;
}

inline InfluenceReport self_influence_lissa(const Matrix& g_train, const HvpFn& hvp,
                                            const LissaConfig& cfg) {
    InfluenceReport rep;
    rep.method = InfluenceMethod::self_lissa;
    rep.scores.resize(g_train.rows());
    for (Eigen::Index j = 0; j < g_train.rows(); ++j) {
        const Vector g = g_train.row(j).transpose();
        rep.scores(j) = -g.dot(lissa_inverse_hvp(hvp, g, cfg));
    }
    rep.discrete = discretize(rep.scores);
    return rep;
}

// --- leave-one-out oracle --------------------------------------------------------

namespace detail {

inline LabeledDataset remove_sample(const LabeledDataset& ds, Eigen::Index j) {
    LabeledDataset out;
    out.name = ds.name;
    out.features.resize(ds.size() - 1, ds.dim());
    out.labels.reserve(ds.labels.size() - 1);
    if (ds.noise_mask) out.noise_mask = std::vector<bool>();
    Eigen::Index w = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        if (i == j) continue;
        out.features.row(w++) = ds.features.row(i);
        out.labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        if (ds.noise_mask)
            out.noise_mask->push_back((*ds.noise_mask)[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace detail

// Retraining-based ground truth: utility(without sample j) - utility(full),
// where utility is the mean negative loss on eval_ds. Positive means removing
// j helps, i.e. the sample is detrimental.
inline double loo_utility_change(const LabeledDataset& train_ds, const LabeledDataset& eval_ds,
                                 const ModelSpec& spec, const TrainConfig& cfg,
                                 Eigen::Index j) {
    require(train_ds.size() <= 500, "loo: dataset too large for retraining oracle (limit 500)");
    require(j >= 0 && j < train_ds.size(), "loo: sample index out of range");
    const TrainedModel base = train(train_ds, spec, cfg);
    const TrainedModel without = train(detail::remove_sample(train_ds, j), spec, cfg);
    return -mean_loss(without, eval_ds) - (-mean_loss(base, eval_ds));
}

// Full sweep; trains the base model once and n leave-one-out models.
inline Vector loo_sweep(const LabeledDataset& train_ds, const LabeledDataset& eval_ds,
                        const ModelSpec& spec, const TrainConfig& cfg) {
    require(train_ds.size() <= 500, "loo: dataset too large for retraining oracle (limit 500)");
    const TrainedModel base = train(train_ds, spec, cfg);
    const double base_utility = -mean_loss(base, eval_ds);
    Vector changes(train_ds.size());
    for (Eigen::Index j = 0; j < train_ds.size(); ++j) {
        const TrainedModel without = train(detail::remove_sample(train_ds, j), spec, cfg);
        changes(j) = -mean_loss(without, eval_ds) - base_utility;
    }
    return changes;
}

// --- serialization ---------------------------------------------------------------

inline nlohmann::json to_json(const InfluenceReport& rep) {
    return {{"method", to_string(rep.method)},
            {"scores", std::vector<double>(rep.scores.data(),
                                           rep.scores.data() + rep.scores.size())},
            {"discrete", rep.discrete},
            {"eval_set", rep.eval_set == EvalSet::train ? "train" : "external"}};
}

}  // namespace gradtrim
