#pragma once

#include "gradtrim/common.hpp"
#include "gradtrim/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace gradtrim {

// Parameters of a layer mapping `in` inputs to `out` units are stored as
// `out` contiguous slots of (in+1) values: the unit's weights followed by its
// bias. Layers are laid out in order, so the final layer occupies the
// trailing block of the flat parameter vector.

enum class Arch { logreg, mlp };
enum class Layer { all, last_layer };

struct ModelSpec {
    Arch arch = Arch::logreg;
    int d = 0;        // input features
    int h1 = 0, h2 = 0;  // hidden widths (mlp only)
    int classes = 0;

    int param_count() const {
        if (arch == Arch::logreg) return (d + 1) * classes;
        return (d + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * classes;
    }

    // width of the input feeding the final linear layer
    int last_in() const { return arch == Arch::logreg ? d : h2; }

    int block_dim(Layer sel) const {
        if (arch == Arch::logreg || sel == Layer::all) return param_count();
        return (h2 + 1) * classes;
    }

    int block_offset(Layer sel) const {
        if (arch == Arch::logreg || sel == Layer::all) return 0;
        return (d + 1) * h1 + (h1 + 1) * h2;
    }

    void validate() const {
        require(d > 0, "model spec: input dim must be positive");
        require(classes >= 1, "model spec: needs at least one class");
        if (arch == Arch::mlp)
            require(h1 > 0 && h2 > 0, "model spec: hidden widths must be positive");
    }
};

struct TrainConfig {
    double lr = 0.1;
    int epochs = 500;
    int batch_size = 0;  // <= 0 means full batch
    std::uint64_t seed = 0;
};

struct TrainedModel {
    ModelSpec spec;
    Vector theta;
    TrainConfig train_config;
    double final_train_loss = 0.0;
};

struct GradientMatrix {
    Matrix rows;  // n x p'
    Layer layer_selector = Layer::all;
    std::string source;
};

namespace detail {

using LayerMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                 Eigen::RowMajor>>;
using LayerMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                             Eigen::RowMajor>>;

inline LayerMap layer_view(const Vector& theta, int offset, int out, int in) {
    return LayerMap(theta.data() + offset, out, in + 1);
}

inline LayerMapMut layer_view(Vector& theta, int offset, int out, int in) {
    return LayerMapMut(theta.data() + offset, out, in + 1);
}

inline Vector augmented(const Vector& x) {
    Vector a(x.size() + 1);
    a.head(x.size()) = x;
    a(x.size()) = 1.0;
    return a;
}

inline Vector softmax(const Vector& logits) {
    const double m = logits.maxCoeff();
    Vector p = (logits.array() - m).exp();
    return p / p.sum();
}

inline double cross_entropy(const Vector& logits, int y) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return lse - logits(y);
}

// Activations needed by both backprop and the last-layer curvature ops.
struct Forward {
    Vector z1, a1t, z2, a2t;  // a1t/a2t are augmented hidden activations
    Vector last_in_aug;       // augmented input of the final layer
    Vector logits;
};

inline Forward forward_pass(const ModelSpec& s, const Vector& theta, const Vector& x) {
    Forward f;
    if (s.arch == Arch::logreg) {
        f.last_in_aug = augmented(x);
        f.logits = layer_view(theta, 0, s.classes, s.d) * f.last_in_aug;
        return f;
    }
    const int off2 = (s.d + 1) * s.h1;
    const int off3 = off2 + (s.h1 + 1) * s.h2;
    f.z1 = layer_view(theta, 0, s.h1, s.d) * augmented(x);
    f.a1t = augmented(f.z1.cwiseMax(0.0));
    f.z2 = layer_view(theta, off2, s.h2, s.h1) * f.a1t;
    f.a2t = augmented(f.z2.cwiseMax(0.0));
    f.last_in_aug = f.a2t;
    f.logits = layer_view(theta, off3, s.classes, s.h2) * f.a2t;
    return f;
}

// Gradient of the single-sample cross-entropy loss, written into `grad`
// (length p, overwritten). Returns the sample loss.
inline double backward_pass(const ModelSpec& s, const Vector& theta, const Vector& x,
                            int y, Vector& grad) {
    const Forward f = forward_pass(s, theta, x);
    const Vector p = softmax(f.logits);
    Vector delta = p;
    delta(y) -= 1.0;

    grad.setZero();
    if (s.arch == Arch::logreg) {
        layer_view(grad, 0, s.classes, s.d) = delta * f.last_in_aug.transpose();
        return cross_entropy(f.logits, y);
    }
    const int off2 = (s.d + 1) * s.h1;
    const int off3 = off2 + (s.h1 + 1) * s.h2;

    layer_view(grad, off3, s.classes, s.h2) = delta * f.a2t.transpose();

    const auto w3 = layer_view(theta, off3, s.classes, s.h2);
    Vector d2 = w3.leftCols(s.h2).transpose() * delta;
    d2 = d2.cwiseProduct((f.z2.array() > 0.0).cast<double>().matrix());
    layer_view(grad, off2, s.h2, s.h1) = d2 * f.a1t.transpose();

    const auto w2 = layer_view(theta, off2, s.h2, s.h1);
    Vector d1 = w2.leftCols(s.h1).transpose() * d2;
    d1 = d1.cwiseProduct((f.z1.array() > 0.0).cast<double>().matrix());
    layer_view(grad, 0, s.h1, s.d) = d1 * augmented(x).transpose();

    return cross_entropy(f.logits, y);
}

}  // namespace detail

inline void check_dims(const TrainedModel& m, const LabeledDataset& ds) {
    require(ds.dim() == m.spec.d, "dataset feature dim does not match model spec");
    for (int y : ds.labels)
        require(y < m.spec.classes, "dataset label exceeds model class count");
}

inline Vector init_theta(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Vector theta(spec.param_count());
    Rng rng(seed);
    auto fill = [&](int offset, int out, int in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (int i = 0; i < out * (in + 1); ++i)
            theta(offset + i) = rng.uniform(-bound, bound);
    };
    if (spec.arch == Arch::logreg) {
        fill(0, spec.classes, spec.d);
    } else {
        fill(0, spec.h1, spec.d);
        fill((spec.d + 1) * spec.h1, spec.h2, spec.h1);
        fill((spec.d + 1) * spec.h1 + (spec.h1 + 1) * spec.h2, spec.classes, spec.h2);
    }
    return theta;
}

inline double mean_loss(const TrainedModel& m, const LabeledDataset& ds) {
    check_dims(m, ds);
    double total = 0.0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        const auto f = detail::forward_pass(m.spec, m.theta, ds.features.row(i).transpose());
        total += detail::cross_entropy(f.logits, ds.labels[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<double>(ds.size());
}

inline int predict_class(const TrainedModel& m, const Vector& x) {
    const auto f = detail::forward_pass(m.spec, m.theta, x);
    Eigen::Index best = 0;
    f.logits.maxCoeff(&best);
    return static_cast<int>(best);
}

inline double accuracy(const TrainedModel& m, const LabeledDataset& ds) {
    check_dims(m, ds);
    Eigen::Index hits = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i)
        if (predict_class(m, ds.features.row(i).transpose()) ==
            ds.labels[static_cast<std::size_t>(i)])
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// Mini-batch SGD on mean cross-entropy. Deterministic given cfg.seed.
inline TrainedModel train(const LabeledDataset& ds, const ModelSpec& spec,
                          const TrainConfig& cfg) {
    spec.validate();
    ds.validate();
    require(ds.size() > 0, "train: empty dataset");
    require(ds.dim() == spec.d, "train: dataset feature dim does not match spec");
    for (int y : ds.labels) require(y < spec.classes, "train: label exceeds class count");
    require(cfg.lr > 0.0, "train: learning rate must be positive");
    require(cfg.epochs >= 0, "train: negative epoch count");

    TrainedModel m;
    m.spec = spec;
    m.train_config = cfg;
    m.theta = init_theta(spec, mix_seed(cfg.seed, 0));

    const Eigen::Index n = ds.size();
    const Eigen::Index batch =
        (cfg.batch_size <= 0 || cfg.batch_size >= n) ? n : cfg.batch_size;

    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 1));

    Vector grad(spec.param_count()), sample_grad(spec.param_count());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (batch < n) shuffle_rng.shuffle(order);
        for (Eigen::Index start = 0; start < n; start += batch) {
            const Eigen::Index count = std::min(batch, n - start);
            grad.setZero();
            double batch_loss = 0.0;
            for (Eigen::Index k = 0; k < count; ++k) {
                const std::size_t i = order[static_cast<std::size_t>(start + k)];
                batch_loss += detail::backward_pass(
                    spec, m.theta, ds.features.row(static_cast<Eigen::Index>(i)).transpose(),
                    ds.labels[i], sample_grad);
                grad += sample_grad;
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("train: diverged (non-finite loss) at epoch " +
                                   std::to_string(epoch));
            m.theta -= (cfg.lr / static_cast<double>(count)) * grad;
        }
    }
    if (!all_finite(m.theta))
        throw NumericError("train: diverged (non-finite parameters)");
    m.final_train_loss = mean_loss(m, ds);
    return m;
}

// Row j is the gradient of the single-sample loss at theta, restricted to the
// selected parameter block. For logreg the two selectors coincide.
inline GradientMatrix per_sample_gradients(const TrainedModel& m, const LabeledDataset& ds,
                                           Layer selector = Layer::all) {
    check_dims(m, ds);
    const int pd = m.spec.block_dim(selector);
    const int off = m.spec.block_offset(selector);

    GradientMatrix g;
    g.layer_selector = selector;
    g.source = ds.name;
    g.rows.resize(ds.size(), pd);

    if (m.spec.arch == Arch::mlp && selector == Layer::last_layer) {
        Vector row(pd);
        for (Eigen::Index i = 0; i < ds.size(); ++i) {
            const auto f =
                detail::forward_pass(m.spec, m.theta, ds.features.row(i).transpose());
            Vector delta = detail::softmax(f.logits);
            delta(ds.labels[static_cast<std::size_t>(i)]) -= 1.0;
            detail::LayerMapMut(row.data(), m.spec.classes, m.spec.h2 + 1) =
                delta * f.last_in_aug.transpose();
            g.rows.row(i) = row.transpose();
        }
        require(all_finite(g.rows), "per_sample_gradients: non-finite gradient");
        return g;
    }

    Vector sample_grad(m.spec.param_count());
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        detail::backward_pass(m.spec, m.theta, ds.features.row(i).transpose(),
                              ds.labels[static_cast<std::size_t>(i)], sample_grad);
        g.rows.row(i) = sample_grad.segment(off, pd).transpose();
    }
    require(all_finite(g.rows), "per_sample_gradients: non-finite gradient");
    return g;
}

// Curvature of the summed cross-entropy restricted to the final linear layer
// (the whole model for logreg). Per sample the block Hessian is
// (diag(p) - p p^T) (x) aug aug^T; the operator caches probs and activations
// so repeated Hessian-vector products skip the forward pass.
class CurvatureOperator {
public:
    CurvatureOperator(const TrainedModel& m, const LabeledDataset& ds, Layer selector,
                      double damping)
        : damping_(damping), classes_(m.spec.classes), aug_(m.spec.last_in() + 1) {
        require(damping >= 0.0, "curvature: damping must be non-negative");
        if (m.spec.arch == Arch::mlp && selector == Layer::all)
            throw ConfigError(
                "curvature: full-network hessian for mlp is not supported; "
                "use the last_layer selector");
        check_dims(m, ds);
        probs_.resize(ds.size(), classes_);
        acts_.resize(ds.size(), aug_);
        for (Eigen::Index i = 0; i < ds.size(); ++i) {
            const auto f =
                detail::forward_pass(m.spec, m.theta, ds.features.row(i).transpose());
            probs_.row(i) = detail::softmax(f.logits).transpose();
            acts_.row(i) = f.last_in_aug.transpose();
        }
    }

    int dim() const { return classes_ * aug_; }
    double damping() const { return damping_; }

    Vector apply(const Vector& v) const {
        require(v.size() == dim(), "hvp: vector length does not match parameter block");
        detail::LayerMap vmat(v.data(), classes_, aug_);
        Vector out = damping_ * v;
        detail::LayerMapMut omat(out.data(), classes_, aug_);
        for (Eigen::Index i = 0; i < probs_.rows(); ++i) {
            const Vector p = probs_.row(i).transpose();
            const Vector a = acts_.row(i).transpose();
            const Vector q = vmat * a;
            const Vector w = p.cwiseProduct(q) - p * p.dot(q);
            omat += w * a.transpose();
        }
        return out;
    }

    Matrix dense() const {
        const int m1 = aug_;
        Matrix h = Matrix::Identity(dim(), dim()) * damping_;
        for (Eigen::Index i = 0; i < probs_.rows(); ++i) {
            const Vector p = probs_.row(i).transpose();
            const Vector a = acts_.row(i).transpose();
            const Matrix s = Matrix(p.asDiagonal()) - p * p.transpose();
            const Matrix outer = a * a.transpose();
            for (int c = 0; c < classes_; ++c)
                for (int c2 = 0; c2 < classes_; ++c2)
                    h.block(c * m1, c2 * m1, m1, m1) += s(c, c2) * outer;
        }
        return h;
    }

private:
    double damping_;
    int classes_;
    int aug_;
    Matrix probs_;  // n x C
    Matrix acts_;   // n x (last_in+1)
};

inline Matrix hessian(const TrainedModel& m, const LabeledDataset& ds, Layer selector,
                      double damping) {
    const int pd = m.spec.block_dim(selector);
    require(pd <= 2000, "hessian: parameter block too large to materialize (limit 2000)");
    if (ds.size() == 0)
        return Matrix::Identity(pd, pd) * damping;
    return CurvatureOperator(m, ds, selector, damping).dense();
}

inline Vector hvp(const TrainedModel& m, const LabeledDataset& ds, Layer selector,
                  const Vector& v, double damping) {
    if (ds.size() == 0) {
        require(v.size() == m.spec.block_dim(selector), "hvp: vector length mismatch");
        return damping * v;
    }
    return CurvatureOperator(m, ds, selector, damping).apply(v);
}

// --- serialization -------------------------------------------------------

inline nlohmann::json to_json(const ModelSpec& s) {
    nlohmann::json j{{"arch", s.arch == Arch::logreg ? "logreg" : "mlp"},
                     {"d", s.d},
                     {"classes", s.classes}};
    if (s.arch == Arch::mlp) {
        j["h1"] = s.h1;
        j["h2"] = s.h2;
    }
    return j;
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    const std::string arch = j.at("arch").get<std::string>();
    if (arch == "logreg")
        s.arch = Arch::logreg;
    else if (arch == "mlp")
        s.arch = Arch::mlp;
    else
        throw ConfigError("model spec: unknown arch '" + arch + "'");
    s.d = j.at("d").get<int>();
    s.classes = j.at("classes").get<int>();
    if (s.arch == Arch::mlp) {
        s.h1 = j.at("h1").get<int>();
        s.h2 = j.at("h2").get<int>();
    }
    s.validate();
    return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline nlohmann::json to_json(const TrainedModel& m) {
    return {{"spec", to_json(m.spec)},
            {"theta", std::vector<double>(m.theta.data(), m.theta.data() + m.theta.size())},
            {"train_config", to_json(m.train_config)},
            {"final_train_loss", m.final_train_loss}};
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
    TrainedModel m;
    m.spec = model_spec_from_json(j.at("spec"));
    const auto theta = j.at("theta").get<std::vector<double>>();
    require(static_cast<int>(theta.size()) == m.spec.param_count(),
            "model: theta length does not match spec");
    m.theta = Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    require(all_finite(m.theta), "model: non-finite parameter");
    m.train_config = train_config_from_json(j.at("train_config"));
    m.final_train_loss = j.value("final_train_loss", 0.0);
    return m;
}

inline void save_model(const TrainedModel& m, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "save_model: cannot open " + path);
    out << to_json(m).dump(2) << "\n";
}

inline TrainedModel load_model(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "load_model: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return model_from_json(j);
}

}  // namespace gradtrim
