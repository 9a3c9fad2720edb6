#include "gradtrim/model.hpp"

#include "gradtrim/dataset.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace gradtrim;

namespace {

double sample_loss(const ModelSpec& spec, const Vector& theta, const Vector& x, int y) {
    const auto f = detail::forward_pass(spec, theta, x);
    return detail::cross_entropy(f.logits, y);
}

// Central finite differences of the single-sample loss.
Vector fd_gradient(const ModelSpec& spec, const Vector& theta, const Vector& x, int y,
                   double eps = 1e-5) {
    Vector g(theta.size());
    Vector t = theta;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        t(i) = theta(i) + eps;
        const double up = sample_loss(spec, t, x, y);
        t(i) = theta(i) - eps;
        const double down = sample_loss(spec, t, x, y);
        t(i) = theta(i);
        g(i) = (up - down) / (2.0 * eps);
    }
    return g;
}

// true when some pre-activation sits within `margin` of a ReLU kink, where
// finite differences are unreliable
bool near_relu_kink(const ModelSpec& spec, const Vector& theta, const Vector& x,
                    double margin = 1e-3) {
    if (spec.arch != Arch::mlp) return false;
    const auto f = detail::forward_pass(spec, theta, x);
    return f.z1.cwiseAbs().minCoeff() < margin || f.z2.cwiseAbs().minCoeff() < margin;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

LabeledDataset tiny_dataset(int n, int d, int classes, std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset ds;
    ds.name = "tiny";
    ds.features.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) ds.features(i, j) = rng.normal();
        ds.labels.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(classes))));
    }
    return ds;
}

}  // namespace

TEST_CASE("parameter counts match the architecture formulas") {
    ModelSpec lr{Arch::logreg, 2, 0, 0, 2};
    REQUIRE(lr.param_count() == (2 + 1) * 2);

    ModelSpec mlp{Arch::mlp, 2, 16, 16, 2};
    REQUIRE(mlp.param_count() == (2 + 1) * 16 + (16 + 1) * 16 + (16 + 1) * 2);
    REQUIRE(mlp.block_dim(Layer::last_layer) == (16 + 1) * 2);
    REQUIRE(mlp.block_offset(Layer::last_layer) + mlp.block_dim(Layer::last_layer) ==
            mlp.param_count());
}

TEST_CASE("logreg gradient at zero parameters matches the sigmoid form") {
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    TrainedModel m{spec, Vector::Zero(spec.param_count()), {}, 0.0};

    LabeledDataset ds;
    ds.features.resize(1, 2);
    ds.features << 2.0, 0.0;
    ds.labels = {1};

    const auto g = per_sample_gradients(m, ds, Layer::all);
    // class-1 unit slots: weights then bias
    REQUIRE(g.rows(0, 3) == Catch::Approx(-1.0));
    REQUIRE(g.rows(0, 4) == Catch::Approx(0.0));
    REQUIRE(g.rows(0, 5) == Catch::Approx(-0.5));
    // class-0 unit carries the complementary probability mass
    REQUIRE(g.rows(0, 0) == Catch::Approx(1.0));
    REQUIRE(g.rows(0, 2) == Catch::Approx(0.5));
}

TEST_CASE("duplicate samples produce identical gradient rows") {
    ModelSpec spec{Arch::mlp, 2, 4, 4, 2};
    TrainedModel m{spec, init_theta(spec, 3), {}, 0.0};
    LabeledDataset ds;
    ds.features.resize(2, 2);
    ds.features << 0.3, -1.2, 0.3, -1.2;
    ds.labels = {1, 1};
    const auto g = per_sample_gradients(m, ds, Layer::all);
    REQUIRE(same_values(g.rows.row(0), g.rows.row(1)));
}

TEST_CASE("gradients match central finite differences (100 random trials)") {
    Rng rng(2024);
    int done = 0;
    std::uint64_t draw = 0;
    while (done < 100) {
        const bool use_mlp = done % 2 == 1;
        const ModelSpec spec = use_mlp ? ModelSpec{Arch::mlp, 3, 5, 4, 3}
                                       : ModelSpec{Arch::logreg, 3, 0, 0, 3};
        const Vector theta = init_theta(spec, 1000 + draw);
        Vector x(3);
        for (int i = 0; i < 3; ++i) x(i) = rng.normal();
        const int y = static_cast<int>(rng.index(3));
        ++draw;
        if (near_relu_kink(spec, theta, x)) continue;  // resample; kink breaks the oracle

        Vector analytic(spec.param_count());
        detail::backward_pass(spec, theta, x, y, analytic);
        const Vector fd = fd_gradient(spec, theta, x, y);
        for (Eigen::Index i = 0; i < analytic.size(); ++i)
            REQUIRE(rel_err(analytic(i), fd(i)) < 1e-4);
        ++done;
    }
}

TEST_CASE("last-layer gradients are the trailing block of full gradients") {
    ModelSpec spec{Arch::mlp, 2, 8, 8, 2};
    TrainedModel m{spec, init_theta(spec, 77), {}, 0.0};
    const auto ds = tiny_dataset(20, 2, 2, 8);

    const auto g_all = per_sample_gradients(m, ds, Layer::all);
    const auto g_last = per_sample_gradients(m, ds, Layer::last_layer);
    const int pd = spec.block_dim(Layer::last_layer);
    REQUIRE(same_values(g_last.rows, g_all.rows.rightCols(pd)));
}

TEST_CASE("hessian: symmetric with eigenvalues floored by the damping") {
    auto [ds, test] = gen_linear_blobs(40, 2, 5);
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    const auto m = train(ds, spec, TrainConfig{0.1, 50, 0, 1});

    const double damping = 0.05;
    const Matrix h = hessian(m, ds, Layer::all, damping);
    REQUIRE((h - h.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(h);
    REQUIRE(eig.eigenvalues().minCoeff() >= damping - 1e-10);
}

TEST_CASE("hessian of an empty contribution set is the damping identity") {
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    TrainedModel m{spec, init_theta(spec, 1), {}, 0.0};
    LabeledDataset empty;
    empty.features.resize(0, 2);
    const Matrix h = hessian(m, empty, Layer::all, 0.25);
    REQUIRE(same_values(h, Matrix::Identity(6, 6) * 0.25));
}

TEST_CASE("hessian matches finite differences of the gradient") {
    ModelSpec spec{Arch::logreg, 2, 0, 0, 3};
    TrainedModel m{spec, init_theta(spec, 9), {}, 0.0};
    const auto ds = tiny_dataset(12, 2, 3, 21);

    const Matrix h = hessian(m, ds, Layer::all, 0.0);
    const int p = spec.param_count();
    const double eps = 1e-5;
    Vector gp(p), gm(p), acc_p(p), acc_m(p);
    Vector theta = m.theta;
    for (int j = 0; j < p; ++j) {
        theta(j) = m.theta(j) + eps;
        acc_p.setZero();
        for (Eigen::Index i = 0; i < ds.size(); ++i) {
            detail::backward_pass(spec, theta, ds.features.row(i).transpose(),
                                  ds.labels[static_cast<std::size_t>(i)], gp);
            acc_p += gp;
        }
        theta(j) = m.theta(j) - eps;
        acc_m.setZero();
        for (Eigen::Index i = 0; i < ds.size(); ++i) {
            detail::backward_pass(spec, theta, ds.features.row(i).transpose(),
                                  ds.labels[static_cast<std::size_t>(i)], gm);
            acc_m += gm;
        }
        theta(j) = m.theta(j);
        const Vector col = (acc_p - acc_m) / (2.0 * eps);
        REQUIRE((h.col(j) - col).cwiseAbs().maxCoeff() < 1e-3);
    }
}

TEST_CASE("mlp full-network hessian is rejected, last layer works") {
    ModelSpec spec{Arch::mlp, 2, 4, 4, 2};
    TrainedModel m{spec, init_theta(spec, 2), {}, 0.0};
    const auto ds = tiny_dataset(10, 2, 2, 3);
    REQUIRE_THROWS_AS(hessian(m, ds, Layer::all, 0.01), ConfigError);
    const Matrix h = hessian(m, ds, Layer::last_layer, 0.01);
    REQUIRE(h.rows() == spec.block_dim(Layer::last_layer));
}

TEST_CASE("hvp agrees with the dense hessian") {
    ModelSpec spec{Arch::logreg, 4, 0, 0, 3};  // p = 15
    TrainedModel m{spec, init_theta(spec, 31), {}, 0.0};
    const auto ds = tiny_dataset(25, 4, 3, 32);
    const double damping = 0.01;
    const Matrix h = hessian(m, ds, Layer::all, damping);

    Rng rng(5);
    Vector v(spec.param_count());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.normal();

    SECTION("zero in, zero out") {
        const Vector z = hvp(m, ds, Layer::all, Vector::Zero(v.size()), damping);
        REQUIRE(z.norm() == 0.0);
    }
    SECTION("matches dense product") {
        const Vector a = hvp(m, ds, Layer::all, v, damping);
        REQUIRE((a - h * v).norm() <= 1e-8 * std::max(1.0, (h * v).norm()));
    }
    SECTION("linear in the vector") {
        Vector w(v.size());
        for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = rng.normal();
        const Vector lhs = hvp(m, ds, Layer::all, v + w, damping);
        const Vector rhs =
            hvp(m, ds, Layer::all, v, damping) + hvp(m, ds, Layer::all, w, damping);
        REQUIRE((lhs - rhs).norm() <= 1e-8 * std::max(1.0, rhs.norm()));
    }
}

TEST_CASE("training is deterministic and converges on separable data") {
    auto [train_set, test_set] = gen_linear_blobs(150, 100, 42);
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    TrainConfig cfg{0.1, 500, 0, 7};
    const auto a = train(train_set, spec, cfg);
    const auto b = train(train_set, spec, cfg);
    REQUIRE(same_values(a.theta, b.theta));
    REQUIRE(accuracy(a, test_set) == 1.0);  // separability oracle
}

TEST_CASE("single-class data reaches perfect training accuracy") {
    auto ds = tiny_dataset(16, 2, 1, 6);  // all labels 0
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    const auto m = train(ds, spec, TrainConfig{0.1, 200, 0, 1});
    REQUIRE(accuracy(m, ds) == 1.0);
}

TEST_CASE("divergent training aborts with a numerical error") {
    auto [ds, test] = gen_linear_blobs(20, 2, 3);
    ModelSpec spec{Arch::mlp, 2, 8, 8, 2};
    REQUIRE_THROWS_AS(train(ds, spec, TrainConfig{1e120, 50, 0, 1}), NumericError);
}

TEST_CASE("trained models are approximately stationary") {
    auto [moons, moons_test] = gen_half_moons(100, 20, 0.1, 13);
    ModelSpec spec{Arch::logreg, 2, 0, 0, 2};
    TrainConfig cfg{0.1, 500, 0, 3};
    const auto m = train(moons, spec, cfg);
    const auto g = per_sample_gradients(m, moons, Layer::all);
    const Vector mean_grad = g.rows.colwise().mean().transpose();
    REQUIRE(mean_grad.norm() <= 10.0 * cfg.lr);
}

// Dataset-quality oracle for the moons geometry: a linear model cannot
// separate the crescents but a small MLP can.
TEST_CASE("moons separate under an mlp but not a linear model") {
    auto [train_set, test_set] = gen_half_moons(250, 100, 0.1, 42);

    ModelSpec lr_spec{Arch::logreg, 2, 0, 0, 2};
    const auto lr = train(train_set, lr_spec, TrainConfig{0.1, 500, 0, 7});
    REQUIRE(accuracy(lr, test_set) < 0.95);

    ModelSpec mlp_spec{Arch::mlp, 2, 16, 16, 2};
    const auto mlp = train(train_set, mlp_spec, TrainConfig{0.05, 1000, 32, 7});
    REQUIRE(accuracy(mlp, test_set) >= 0.95);
}

TEST_CASE("model json round trip") {
    auto [ds, test] = gen_linear_blobs(20, 2, 8);
    ModelSpec spec{Arch::mlp, 2, 4, 4, 2};
    const auto m = train(ds, spec, TrainConfig{0.05, 30, 8, 5});
    const auto j = to_json(m);
    const auto back = model_from_json(j);
    REQUIRE(same_values(back.theta, m.theta));
    REQUIRE(back.spec.arch == m.spec.arch);
    REQUIRE(back.spec.h1 == m.spec.h1);
    REQUIRE(back.train_config.lr == m.train_config.lr);
    REQUIRE(back.final_train_loss == m.final_train_loss);
}
