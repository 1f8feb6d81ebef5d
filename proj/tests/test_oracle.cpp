#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sere/oracle.hpp"
#include "support.hpp"

using namespace sere;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LinearGaussianModel scalar_model() {
    LinearGaussianModel m;
    LinearLayer l;
    l.M = MatrixXd::Zero(1, 0);
    l.B = MatrixXd::Zero(1, 0);
    l.m = VectorXd::Zero(1);
    l.prior_var = VectorXd::Ones(1);
    l.d = VectorXd::Ones(1);
    l.u = VectorXd::Zero(1);
    l.b = VectorXd::Zero(1);
    l.C = MatrixXd::Ones(1, 1);
    m.layers.push_back(l);
    m.x_offset = VectorXd::Zero(1);
    m.r_diag = VectorXd::Ones(1);
    m.r_perturb = VectorXd::Zero(1);
    return m;
}

double mvn_log_prob(const VectorXd& mu, const MatrixXd& cov, const VectorXd& x) {
    Eigen::LLT<MatrixXd> llt(cov);
    const VectorXd r = llt.matrixL().solve(x - mu);
    double logdet = 0;
    for (int i = 0; i < cov.rows(); ++i) logdet += 2 * std::log(llt.matrixL()(i, i));
    return -0.5 * (static_cast<double>(x.size()) * std::log(2 * std::numbers::pi) + logdet + r.squaredNorm());
}

std::vector<std::size_t> random_dims(Rng& rng, std::size_t layers) {
    std::vector<std::size_t> d(layers);
    for (auto& v : d) v = 1 + rng.below(3);
    return d;
}

}  // namespace

TEST_CASE("one-layer joint and marginal") {
    const LinearGaussianModel m = scalar_model();
    const GaussianJoint j = build_joint(m);
    CHECK(j.cov(0, 0) == doctest::Approx(1.0));
    CHECK(j.cov(0, 1) == doctest::Approx(1.0));
    CHECK(j.cov(1, 0) == doctest::Approx(1.0));
    CHECK(j.cov(1, 1) == doctest::Approx(2.0));
    CHECK(j.block_offsets == std::vector<std::size_t>{0, 1});
    CHECK(exact_log_marginal(m, VectorXd::Zero(1)) == doctest::Approx(-1.265512).epsilon(1e-6));
}

TEST_CASE("diagonal propagation when the rank-one term vanishes") {
    Rng rng(1);
    LinearGaussianModel m = random_sere_model(rng, {3}, 2);
    m.layers[0].u.setZero();
    const GaussianJoint j = build_joint(m);
    const auto& l = m.layers[0];
    const MatrixXd cz = (l.d.array().square() * l.prior_var.array()).matrix().asDiagonal();
    const MatrixXd want = l.C * cz * l.C.transpose() + m.noise_cov();
    CHECK((j.cov.bottomRightCorner(2, 2) - want).cwiseAbs().maxCoeff() <= 1e-12);
    const MatrixXd cross = (l.prior_var.array() * l.d.array()).matrix().asDiagonal() * l.C.transpose();
    CHECK((j.cov.block(0, 3, 3, 2) - cross).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("joint covariance matches simulation") {
    Rng rng(2);
    const LinearGaussianModel m = random_sere_model(rng, {2, 2}, 2);
    const GaussianJoint j = build_joint(m);
    const std::size_t n = 1000000;
    const MatrixXd s = simulate(m, n, rng);
    const auto k = static_cast<Eigen::Index>(j.mean.size());
    REQUIRE(s.cols() == k);
    int bad = 0;
    for (Eigen::Index a = 0; a < k; ++a) {
        const VectorXd ca = s.col(a).array() - j.mean(a);
        for (Eigen::Index b = a; b < k; ++b) {
            const VectorXd prod = ca.array() * (s.col(b).array() - j.mean(b));
            const double mean = prod.mean();
            const double se = std::sqrt((prod.array() - mean).square().sum() / (n - 1.0) / n);
            if (std::abs(mean - j.cov(a, b)) > 3 * se) ++bad;
        }
        const double mse = std::sqrt(j.cov(a, a) / n);
        if (std::abs(s.col(a).mean() - j.mean(a)) > 3 * mse) ++bad;
    }
    // 3 SE per entry: a couple of excursions among ~50 entries are expected.
    CHECK(bad <= 2);
}

TEST_CASE("joint covariances are symmetric PSD") {
    Rng rng(3);
    for (int rep = 0; rep < 30; ++rep) {
        const LinearGaussianModel m = random_all_observed_model(rng, random_dims(rng, 1 + rep % 4), 1 + rng.below(3));
        const GaussianJoint j = build_joint(m);
        CHECK((j.cov - j.cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(j.cov);
        CHECK(es.eigenvalues().minCoeff() >= -1e-10);
    }
}

TEST_CASE("marginal under a shifted offset") {
    Rng rng(4);
    LinearGaussianModel m = random_sere_model(rng, {2, 3}, 3);
    const VectorXd x = VectorXd::Random(3);
    const VectorXd shift = VectorXd::Constant(3, 0.7);
    const double base = exact_log_marginal(m, x);
    m.x_offset += shift;
    CHECK(exact_log_marginal(m, x + shift) == doctest::Approx(base).epsilon(1e-12));
    m.validate();
    m.r_diag(0) = -1;
    CHECK_THROWS_AS(m.validate(), Error);
}

TEST_CASE("factorization holds for self-reflective linear models") {
    Rng rng(5);
    double worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
        const LinearGaussianModel m = random_sere_model(rng, random_dims(rng, 3 + rep % 2), 1 + rng.below(3));
        worst = std::max(worst, verify_factorization(m));
    }
    CHECK(worst <= 1e-8);
    CHECK_THROWS_AS(verify_factorization(random_sere_model(rng, {2, 2}, 2)), Error);
}

TEST_CASE("factorization fails for broken wiring") {
    Rng rng(6);
    double least = 1e9;
    for (int rep = 0; rep < 20; ++rep) {
        const LinearGaussianModel m = random_broken_model(rng, std::vector<std::size_t>(3 + rep % 2, 2), 2);
        least = std::min(least, verify_factorization(m, Conditioning::eps_prev));
    }
    CHECK(least > 1e-3);
}

TEST_CASE("uncoupled layers give zero") {
    Rng rng(7);
    LinearGaussianModel m = random_sere_model(rng, {2, 2, 2}, 2);
    for (auto& l : m.layers) {
        l.u.setZero();
        if (l.B.size() > 0) l.B.setZero();
        if (l.M.size() > 0) l.M.setZero();
    }
    CHECK(verify_factorization(m) <= 1e-12);
}

TEST_CASE("observing every layer breaks the conditional independence") {
    Rng rng(8);
    double least = 1e9;
    for (int rep = 0; rep < 10; ++rep)
        least = std::min(least, verify_factorization(random_all_observed_model(rng, {2, 2, 2}, 2)));
    CHECK(least > 1e-6);
}

TEST_CASE("matched hierarchy reproduces the linear joint density") {
    Rng rng(9);
    const LinearGaussianModel m = random_sere_model(rng, {2, 1, 2}, 3, 0.6);
    LinearMatch match = match_linear_model(m);
    Hierarchy h(match.spec);
    const GaussianJoint j = build_joint(m);
    const std::size_t n = 6;
    const MatrixXd s = simulate(m, n, rng);
    Graph g(false);
    Context ctx(g, match.params, Mode::eval, rng);
    std::vector<Var> eps;
    for (std::size_t l = 0; l < 3; ++l) {
        const auto off = static_cast<Eigen::Index>(j.block_offsets[l]);
        eps.push_back(ctx.constant(to_tensor(s.middleCols(off, static_cast<Eigen::Index>(m.latent_dim(l))))));
    }
    const Tensor lp = h.joint_log_prob(ctx, eps, ctx.constant(to_tensor(s.rightCols(3)))).value();
    for (std::size_t i = 0; i < n; ++i) {
        const double want = mvn_log_prob(j.mean, j.cov, s.row(static_cast<Eigen::Index>(i)).transpose());
        CHECK(lp[i] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("bounds of the matched hierarchy bracket the exact marginal") {
    Rng rng(10);
    const LinearGaussianModel m = random_sere_model(rng, {2, 2, 2}, 3, 0.5);
    LinearMatch match = match_linear_model(m);
    Hierarchy h(match.spec);
    const MatrixXd x = simulate(m, 5, rng).rightCols(3);
    const Tensor xt = to_tensor(x);
    Rng r1(11);
    const auto iw = iwae_bound_rows(h, match.params, xt, 10000, r1);
    for (std::size_t i = 0; i < 5; ++i) {
        const double exact = exact_log_marginal(m, x.row(static_cast<Eigen::Index>(i)).transpose());
        CHECK(std::abs(iw[i] - exact) <= 0.05);
    }
    // ELBO averaged over many draws stays below the exact value.
    Rng r2(12);
    const std::size_t reps = 20000;
    Tensor many({reps, 3});
    for (std::size_t i = 0; i < reps; ++i)
        for (std::size_t c = 0; c < 3; ++c) many(i, c) = x(0, static_cast<Eigen::Index>(c));
    Graph g(false);
    Context ctx(g, match.params, Mode::eval, r2);
    const Tensor e = h.elbo(ctx, ctx.constant(many), 1.0).elbo.value();
    std::vector<double> v(e.data().begin(), e.data().end());
    CHECK(testing::mean_of(v) <= exact_log_marginal(m, x.row(0).transpose()) + 3 * testing::se_of(v));
}

TEST_CASE("gradient checker") {
    ParameterStore store;
    store.add("w", Tensor::row({0.3, -1.2, 2.0}));
    store.add("v", Tensor::row({0.5, 0.0}));
    GradCheckResult q = grad_check(
        [](Context& ctx) {
            Var w = ctx.param("w");
            return sum(square(w) * 3.0 + w * 0.5) + sum(square(ctx.param("v")));
        },
        store);
    CHECK(q.max_rel_error <= 1e-9);
    CHECK(q.checked == 5);
    CHECK(q.skipped == 0);

    GradCheckResult k = grad_check([](Context& ctx) { return sum(relu(ctx.param("v"))); }, store);
    CHECK(k.skipped == 1);
    CHECK(k.checked == 4);

    CHECK_THROWS_AS(grad_check([](Context& ctx) { return sum(log(ctx.param("v") - 1.0)); }, store), Error);
}
