#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sere/distributions.hpp"
#include "support.hpp"

using namespace sere;

namespace {
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double dense_mvn_log_prob(const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov, const Eigen::VectorXd& x) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::VectorXd r = llt.matrixL().solve(x - mu);
    double logdet = 0;
    for (int i = 0; i < cov.rows(); ++i) logdet += 2 * std::log(llt.matrixL()(i, i));
    return -0.5 * (static_cast<double>(mu.size()) * kLog2Pi + logdet + r.squaredNorm());
}

GaussianDiag diag(Graph& g, std::vector<double> loc, std::vector<double> var) {
    return {g.constant(Tensor::row(loc)), g.constant(Tensor::row(var))};
}
}  // namespace

TEST_CASE("scale map examples") {
    CHECK(scale_from_raw(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(scale_from_raw(10.0) == doctest::Approx(10.0000454).epsilon(1e-9));
    CHECK(scale_from_raw(-5.0) == doctest::Approx(std::log1p(std::exp(std::expm1(-5.0)))).epsilon(1e-12));
    CHECK(scale_from_raw(-5.0) == doctest::Approx(0.315078).epsilon(1e-6));
    CHECK(scale_floor() == doctest::Approx(std::log1p(std::exp(-1.0))));
    for (double s : {0.32, 0.5, 1.0, 3.0, 50.0}) CHECK(scale_from_raw(raw_from_scale(s)) == doctest::Approx(s).epsilon(1e-10));
    CHECK_THROWS_AS(raw_from_scale(0.3), Error);
}

TEST_CASE("scale map is positive and monotone on [-20,20]") {
    double prev = 0.0;
    for (int i = 0; i <= 4000; ++i) {
        const double v = scale_from_raw(-20.0 + 0.01 * i);
        CHECK(v > 0.0);
        CHECK(v >= prev);
        prev = v;
    }
    Graph g;
    Var raw = g.constant(Tensor::row({-3.0, 0.0, 4.0}));
    const Tensor s = scale_from_raw(raw).value();
    CHECK(s[1] == doctest::Approx(std::log(2.0)));
    CHECK(s[2] == doctest::Approx(scale_from_raw(4.0)));
}

TEST_CASE("diagonal sampling") {
    Graph g;
    GaussianDiag unit = diag(g, {0.0}, {1.0});
    CHECK(gauss_diag_reparam(unit, Tensor::row({0.5})).item() == 0.5);

    GaussianDiag tiny = diag(g, {1.5}, {1e-30});
    CHECK(gauss_diag_reparam(tiny, Tensor::row({2.0})).item() == doctest::Approx(1.5).epsilon(1e-12));

    Rng rng(3);
    const std::size_t n = 100000;
    GaussianDiag q{g.constant(Tensor::full(n, 1, 1.5)), g.constant(Tensor::full(n, 1, 4.0))};
    DiagSample s = gauss_diag_sample(q, rng);
    std::vector<double> xs(s.value.value().data().begin(), s.value.value().data().end());
    const double m = testing::mean_of(xs);
    CHECK(std::abs(m - 1.5) < 3 * testing::se_of(xs));
    std::vector<double> sq;
    for (double x : xs) sq.push_back((x - 1.5) * (x - 1.5));
    CHECK(std::abs(testing::mean_of(sq) - 4.0) < 3 * testing::se_of(sq));
}

TEST_CASE("diagonal log density examples") {
    Graph g;
    CHECK(gauss_diag_log_prob(diag(g, {0}, {1}), g.constant(Tensor::row({0}))).item() ==
          doctest::Approx(-0.9189385).epsilon(1e-7));
    CHECK(gauss_diag_log_prob(diag(g, {0}, {1}), g.constant(Tensor::row({1}))).item() ==
          doctest::Approx(-1.4189385).epsilon(1e-7));
    CHECK(gauss_diag_log_prob(diag(g, {2}, {4}), g.constant(Tensor::row({0}))).item() ==
          doctest::Approx(-2.112086).epsilon(1e-6));
    CHECK(standard_normal_log_prob(g.constant(Tensor::row({0, 0}))).item() == doctest::Approx(-kLog2Pi));
    CHECK_THROWS_AS(gauss_diag_log_prob(diag(g, {0, 0}, {1, 1}), g.constant(Tensor::row({0}))), ShapeError);
}

TEST_CASE("diagonal KL examples") {
    Graph g;
    CHECK(kl_diag_diag(diag(g, {0.3, -1}, {2, 0.5}), diag(g, {0.3, -1}, {2, 0.5})).item() == doctest::Approx(0.0));
    CHECK(kl_diag_diag(diag(g, {1}, {1}), diag(g, {0}, {1})).item() == doctest::Approx(0.5));
    CHECK(kl_diag_diag(diag(g, {0}, {4}), diag(g, {0}, {1})).item() == doctest::Approx(0.806853).epsilon(1e-6));
    CHECK_THROWS_AS(kl_diag_diag(diag(g, {0, 1}, {1, 1}), diag(g, {0}, {1})), ShapeError);
}

TEST_CASE("KL is nonnegative on random pairs and zero only for equal pairs") {
    Rng rng(5);
    for (int rep = 0; rep < 200; ++rep) {
        Graph g;
        Tensor lq = rng.normal_tensor(1, 4), lp = rng.normal_tensor(1, 4);
        Tensor vq = rng.uniform_tensor(1, 4), vp = rng.uniform_tensor(1, 4);
        for (auto* t : {&vq, &vp})
            for (auto& v : t->storage()) v = 0.1 + 3 * v;
        const double kl = kl_diag_diag({g.constant(lq), g.constant(vq)}, {g.constant(lp), g.constant(vp)}).item();
        CHECK(kl > 0.0);
        CHECK(kl_diag_diag({g.constant(lq), g.constant(vq)}, {g.constant(lq), g.constant(vq)}).item() ==
              doctest::Approx(0.0));
    }
}

TEST_CASE("KL agrees with Monte Carlo") {
    Rng rng(8);
    const std::size_t n = 100000;
    Graph g;
    GaussianDiag q{g.constant(repeat_rows(g.constant(Tensor::row({0.5, -0.2, 1.0})), n).value()),
                   g.constant(repeat_rows(g.constant(Tensor::row({0.7, 1.3, 0.4})), n).value())};
    GaussianDiag p{g.constant(repeat_rows(g.constant(Tensor::row({0.0, 0.4, 0.2})), n).value()),
                   g.constant(repeat_rows(g.constant(Tensor::row({1.0, 0.8, 2.0})), n).value())};
    DiagSample s = gauss_diag_sample(q, rng);
    const Tensor lq = gauss_diag_log_prob(q, s.value).value(), lp = gauss_diag_log_prob(p, s.value).value();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = lq[i] - lp[i];
    const double exact = kl_diag_diag(q, p).value()[0];
    CHECK(std::abs(testing::mean_of(d) - exact) < 3 * testing::se_of(d));
}

TEST_CASE("rank-one Gaussian") {
    Graph g;
    GaussianDiagRank1 zero_u{g.constant(Tensor::row({0.2, -0.4})), g.constant(Tensor::row({2.0, 3.0})),
                             g.constant(Tensor::row({0.0, 0.0}))};
    Var x = g.constant(Tensor::row({1.0, 0.5}));
    CHECK(gauss_rank1_log_prob(zero_u, x).item() ==
          doctest::Approx(gauss_diag_log_prob({zero_u.loc, zero_u.diag}, x).item()).epsilon(1e-12));

    // det(diag(2,3) + 11ᵀ) = 11: the log density at the mean is −ln(2π) − ½ ln 11.
    GaussianDiagRank1 r{g.constant(Tensor::row({0.0, 0.0})), g.constant(Tensor::row({2.0, 3.0})),
                        g.constant(Tensor::row({1.0, 1.0}))};
    CHECK(gauss_rank1_log_prob(r, g.constant(Tensor::row({0.0, 0.0}))).item() ==
          doctest::Approx(-kLog2Pi - 0.5 * std::log(11.0)).epsilon(1e-12));
    CHECK_THROWS_AS(gauss_rank1_log_prob(r, g.constant(Tensor::row({0.0}))), ShapeError);
}

TEST_CASE("rank-one density matches a dense oracle") {
    Rng rng(12);
    double worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t D = 1 + rep % 6;
        Tensor mu = rng.normal_tensor(1, D), d = rng.uniform_tensor(1, D), u = rng.normal_tensor(1, D),
               x = rng.normal_tensor(1, D);
        for (auto& v : d.storage()) v = 0.2 + 2 * v;
        Graph g;
        const double got =
            gauss_rank1_log_prob({g.constant(mu), g.constant(d), g.constant(u)}, g.constant(x)).item();
        Eigen::VectorXd em(D), ed(D), eu(D), ex(D);
        for (std::size_t i = 0; i < D; ++i) {
            em(i) = mu[i];
            ed(i) = d[i];
            eu(i) = u[i];
            ex(i) = x[i];
        }
        Eigen::MatrixXd cov = ed.asDiagonal();
        cov += eu * eu.transpose();
        const double want = dense_mvn_log_prob(em, cov, ex);
        worst = std::max(worst, std::abs(got - want) / std::abs(want));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("rank-one density integrates to one in 2-D") {
    const double h = 0.05, lim = 12.0;
    const int n = static_cast<int>(2 * lim / h);
    Tensor pts({static_cast<std::size_t>(n * n), 2});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            pts(i * n + j, 0) = -lim + (i + 0.5) * h;
            pts(i * n + j, 1) = -lim + (j + 0.5) * h;
        }
    Graph g;
    const std::size_t rows = pts.rows();
    GaussianDiagRank1 r{g.constant(Tensor({rows, 2})), g.constant(Tensor::full(rows, 2, 0.0)),
                        g.constant(Tensor({rows, 2}))};
    r.loc = repeat_rows(g.constant(Tensor::row({0.3, -0.5})), rows);
    r.diag = repeat_rows(g.constant(Tensor::row({0.8, 1.5})), rows);
    r.perturb = repeat_rows(g.constant(Tensor::row({1.0, -0.7})), rows);
    const Tensor lp = gauss_rank1_log_prob(r, g.constant(pts)).value();
    double total = 0;
    for (double v : lp.data()) total += std::exp(v) * h * h;
    CHECK(std::abs(total - 1.0) < 1e-3);
}

TEST_CASE("rank-one sampling covariance") {
    Rng rng(21);
    const std::size_t n = 100000;
    Graph g;
    GaussianDiagRank1 r{repeat_rows(g.constant(Tensor::row({1.0, -1.0})), n),
                        repeat_rows(g.constant(Tensor::row({0.5, 2.0})), n),
                        repeat_rows(g.constant(Tensor::row({1.0, 1.0})), n)};
    const Tensor s = gauss_rank1_sample(r, rng).value();
    std::vector<double> c01(n), c00(n);
    for (std::size_t i = 0; i < n; ++i) {
        c01[i] = (s(i, 0) - 1.0) * (s(i, 1) + 1.0);
        c00[i] = (s(i, 0) - 1.0) * (s(i, 0) - 1.0);
    }
    CHECK(std::abs(testing::mean_of(c01) - 1.0) < 3 * testing::se_of(c01));
    CHECK(std::abs(testing::mean_of(c00) - 1.5) < 3 * testing::se_of(c00));
}

TEST_CASE("bernoulli examples") {
    Graph g;
    CHECK(bernoulli_log_prob(g.constant(Tensor::row({0})), g.constant(Tensor::row({1}))).item() ==
          doctest::Approx(-std::log(2.0)));
    CHECK(bernoulli_log_prob(g.constant(Tensor::row({0})), g.constant(Tensor::row({0}))).item() ==
          doctest::Approx(-std::log(2.0)));
    CHECK(bernoulli_log_prob(g.constant(Tensor::row({3})), g.constant(Tensor::row({1}))).item() ==
          doctest::Approx(-0.048587).epsilon(1e-5));
    CHECK(std::isfinite(bernoulli_log_prob(g.constant(Tensor::row({-800})), g.constant(Tensor::row({1}))).item()));
    CHECK_THROWS_AS(bernoulli_log_prob(g.constant(Tensor::row({0})), g.constant(Tensor::row({0.5}))), Error);
    Rng rng(2);
    const Tensor s = bernoulli_sample(Tensor::full(1, 10000, 0.0), rng);
    double ones = 0;
    for (double v : s.data()) ones += v;
    CHECK(std::abs(ones / 10000 - 0.5) < 0.015);
}
