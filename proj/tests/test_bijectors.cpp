#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "sere/bijectors.hpp"
#include "sere/distributions.hpp"
#include "support.hpp"

using namespace sere;

namespace {

struct Dense {
    Eigen::VectorXd b;
    Eigen::MatrixXd S;
};

Dense dense_of(const Tensor& shift, const Tensor& d, const Tensor& u) {
    const std::size_t D = shift.cols();
    Dense out{Eigen::VectorXd(D), Eigen::MatrixXd(D, D)};
    Eigen::VectorXd ev(D);
    for (std::size_t i = 0; i < D; ++i) {
        out.b(i) = shift[i];
        ev(i) = u[i];
    }
    out.S = ev * ev.transpose();
    for (std::size_t i = 0; i < D; ++i) out.S(i, i) += d[i];
    return out;
}

struct RandomAffine {
    Tensor shift, d, u;
};

RandomAffine random_affine(Rng& rng, std::size_t D) {
    RandomAffine r{rng.normal_tensor(1, D), rng.uniform_tensor(1, D), rng.normal_tensor(1, D)};
    for (auto& v : r.d.storage()) v = 0.3 + 2 * v;
    return r;
}

AffineParams consts(Graph& g, const RandomAffine& r) { return {g.constant(r.shift), g.constant(r.d), g.constant(r.u)}; }

}  // namespace

TEST_CASE("affine forward examples") {
    Graph g;
    Var eps = g.constant(Tensor::row({0.4, -1.2}));
    FlowResult id = affine_forward({g.constant(Tensor::row({0, 0})), g.constant(Tensor::row({1, 1})),
                                    g.constant(Tensor::row({0, 0}))},
                                   eps);
    CHECK(id.value.value() == eps.value());
    CHECK(id.log_det.item() == 0.0);
    FlowResult r = affine_forward({g.constant(Tensor::row({0, 0})), g.constant(Tensor::row({2, 3})),
                                   g.constant(Tensor::row({1, 1}))},
                                  eps);
    CHECK(r.log_det.item() == doctest::Approx(2.397895).epsilon(1e-7));
}

TEST_CASE("affine log-det and solve match dense oracles") {
    Rng rng(4);
    double det_err = 0, solve_err = 0, fwd_err = 0;
    for (int rep = 0; rep < 40; ++rep) {
        const std::size_t D = 1 + rep % 7;
        RandomAffine ra = random_affine(rng, D);
        Dense dense = dense_of(ra.shift, ra.d, ra.u);
        Graph g;
        Tensor e = rng.normal_tensor(1, D);
        FlowResult f = affine_forward(consts(g, ra), g.constant(e));
        const double want = std::log(std::abs(dense.S.determinant()));
        det_err = std::max(det_err, std::abs(f.log_det.item() - want) / std::max(1.0, std::abs(want)));
        Eigen::VectorXd ee(D), z(D);
        for (std::size_t i = 0; i < D; ++i) ee(i) = e[i];
        const Eigen::VectorXd zf = dense.S * ee + dense.b;
        for (std::size_t i = 0; i < D; ++i) {
            fwd_err = std::max(fwd_err, std::abs(f.value.value()[i] - zf(i)));
            z(i) = f.value.value()[i];
        }
        FlowResult inv = affine_inverse(consts(g, ra), g.constant(f.value.value()));
        const Eigen::VectorXd sol = dense.S.lu().solve(z - dense.b);
        for (std::size_t i = 0; i < D; ++i) solve_err = std::max(solve_err, std::abs(inv.value.value()[i] - sol(i)));
        CHECK(std::abs(inv.log_det.item() + f.log_det.item()) <= 1e-10);
    }
    CHECK(det_err <= 1e-8);
    CHECK(fwd_err <= 1e-12);
    CHECK(solve_err <= 1e-9);
}

TEST_CASE("affine round trip and diagonal inverse") {
    Rng rng(6);
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep) {
        RandomAffine ra = random_affine(rng, 5);
        Graph g;
        Tensor e = rng.normal_tensor(8, 5);
        AffineParams p{repeat_rows(g.constant(ra.shift), 8), repeat_rows(g.constant(ra.d), 8),
                       repeat_rows(g.constant(ra.u), 8)};
        Tensor back = affine_inverse(p, affine_forward(p, g.constant(e)).value).value.value();
        worst = std::max(worst, testing::max_abs_diff(back, e));
    }
    CHECK(worst <= 1e-9);

    Graph g;
    FlowResult inv = affine_inverse({g.constant(Tensor::row({1, 2})), g.constant(Tensor::row({2, 4})),
                                     g.constant(Tensor::row({0, 0}))},
                                    g.constant(Tensor::row({3, 10})));
    CHECK(inv.value.value()[0] == doctest::Approx(1.0));
    CHECK(inv.value.value()[1] == doctest::Approx(2.0));
}

TEST_CASE("affine gradients") {
    Rng rng(10);
    RandomAffine ra = random_affine(rng, 3);
    Tensor raw = ra.d;
    for (auto& v : raw.storage()) v = raw_from_scale(v + 0.1);
    const double err = testing::max_grad_error(
        [](Graph&, const std::vector<Var>& v) {
            AffineParams p = AffineParams::from_raw(v[0], v[1], v[2]);
            FlowResult f = affine_forward(p, v[3]);
            FlowResult i = affine_inverse(p, f.value + 0.3);
            return sum(square(f.value)) + sum(f.log_det) + sum(i.value);
        },
        {ra.shift, raw, ra.u, rng.normal_tensor(1, 3)});
    CHECK(err < 1e-6);
}

TEST_CASE("change of variables matches a histogram in 1-D") {
    // ε ~ N(0,1), z = 0.5 + (1.2 + 0.8²) ε. Compare bin probabilities
    // predicted through the log-det with sample frequencies.
    Rng rng(31);
    const std::size_t n = 200000;
    Graph g;
    AffineParams p{repeat_rows(g.constant(Tensor::row({0.5})), n), repeat_rows(g.constant(Tensor::row({1.2})), n),
                   repeat_rows(g.constant(Tensor::row({0.8})), n)};
    Tensor e = rng.normal_tensor(n, 1);
    const Tensor z = affine_forward(p, g.constant(e)).value.value();
    const double lo = -3, hi = 4, w = 0.25;
    const int bins = static_cast<int>((hi - lo) / w);
    std::vector<double> count(bins, 0.0);
    for (double v : z.data()) {
        const int b = static_cast<int>(std::floor((v - lo) / w));
        if (b >= 0 && b < bins) count[b] += 1;
    }
    int bad = 0;
    for (int b = 0; b < bins; ++b) {
        const double c = lo + (b + 0.5) * w;
        Graph h;
        AffineParams q{h.constant(Tensor::row({0.5})), h.constant(Tensor::row({1.2})), h.constant(Tensor::row({0.8}))};
        FlowResult inv = affine_inverse(q, h.constant(Tensor::row({c})));
        const double dens = std::exp(standard_normal_log_prob(inv.value).item() + inv.log_det.item());
        const double expect = dens * w * static_cast<double>(n);
        const double tol = 4 * std::sqrt(expect) + 0.01 * expect;
        if (std::abs(count[b] - expect) > tol) ++bad;
    }
    CHECK(bad == 0);
}

TEST_CASE("KL is invariant under a shared affine map") {
    Rng rng(17);
    const std::size_t n = 100000, D = 3;
    RandomAffine ra = random_affine(rng, D);
    Graph g;
    auto rep = [&](std::vector<double> v) { return repeat_rows(g.constant(Tensor::row(v)), n); };
    GaussianDiag q{rep({0.3, -0.5, 1.0}), rep({0.6, 1.4, 0.9})};
    GaussianDiag p{rep({0.0, 0.2, 0.4}), rep({1.0, 0.7, 2.5})};
    AffineParams aff{repeat_rows(g.constant(ra.shift), n), repeat_rows(g.constant(ra.d), n),
                     repeat_rows(g.constant(ra.u), n)};
    DiagSample s = gauss_diag_sample(q, rng);
    Var z = affine_forward(aff, s.value).value;
    FlowResult back = affine_inverse(aff, z);
    const Tensor lq = (gauss_diag_log_prob(q, back.value) + back.log_det).value();
    const Tensor lp = (gauss_diag_log_prob(p, back.value) + back.log_det).value();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = lq[i] - lp[i];
    const double exact = kl_diag_diag(q, p).value()[0];
    CHECK(std::abs(testing::mean_of(d) - exact) < 3 * testing::se_of(d));
}

TEST_CASE("conditioned affine bijector") {
    ParameterStore store;
    Rng rng(2);
    ConditionedAffineBijector b("bij", 3, 4, MlpSpec{{20, 20}, Activation::tanh, Activation::tanh}, false);
    b.init(store, rng);
    CHECK(store.trainable_size() == b.parameter_count());
    Graph g;
    Context ctx(g, store, Mode::train, rng);
    Var c = ctx.constant(rng.normal_tensor(5, 4));
    Tensor e = rng.normal_tensor(5, 3);
    FlowResult f = b.forward(ctx, ctx.constant(e), c);
    FlowResult i = b.inverse(ctx, f.value, c);
    CHECK(testing::max_abs_diff(i.value.value(), e) <= 1e-9);
    CHECK(testing::max_abs_diff((f.log_det + i.log_det).value(), Tensor({5, 1})) <= 1e-10);
    CHECK_THROWS_AS(b.forward(ctx, ctx.constant(e), std::nullopt), Error);

    ConditionedAffineBijector first("first", 3, 3, MlpSpec{{20, 20}, Activation::tanh, Activation::tanh}, true);
    first.init(store, rng);
    FlowResult f1 = first.forward(ctx, ctx.constant(e), std::nullopt);
    CHECK(f1.value.rows() == 5);
    CHECK_THROWS_AS(first.forward(ctx, ctx.constant(e), c), Error);
}

TEST_CASE("batch norm bijector examples") {
    ParameterStore store;
    Rng rng(1);
    BatchNormBijector id("bn", 1, 0.99, 0.0);
    id.init(store, rng);
    store.at("bn/updates")[0] = 1;
    Graph g;
    Context ev(g, store, Mode::eval, rng);
    FlowResult f = id.forward(ev, ev.constant(Tensor::row({0.7})), std::nullopt);
    CHECK(f.value.item() == doctest::Approx(0.7));
    CHECK(f.log_det.item() == doctest::Approx(0.0));

    store.at("bn/gamma")[0] = 2;
    store.at("bn/running_var")[0] = 4;
    {
        Graph g2;
        Context ev2(g2, store, Mode::eval, rng);
        FlowResult f2 = id.forward(ev2, ev2.constant(Tensor::row({0.7})), std::nullopt);
        CHECK(f2.value.item() == doctest::Approx(0.7));
        CHECK(std::abs(f2.log_det.item()) <= 1e-12);
    }
    store.at("bn/gamma")[0] = 0;
    Graph g3;
    Context ev3(g3, store, Mode::eval, rng);
    CHECK_THROWS_AS(id.forward(ev3, ev3.constant(Tensor::row({0.7})), std::nullopt), Error);
}

TEST_CASE("batch norm bijector round trip and train stats") {
    ParameterStore store;
    Rng rng(3);
    BatchNormBijector bn("bn", 3, 0.9, 1e-5);
    bn.init(store, rng);
    {
        Graph g;
        Context ev(g, store, Mode::eval, rng);
        CHECK_THROWS_AS(bn.forward(ev, ev.constant(Tensor::zeros(2, 3)), std::nullopt), Error);
    }
    Tensor x = rng.normal_tensor(50, 3);
    for (auto& v : x.storage()) v = 3 * v + 1;
    {
        Graph g;
        Context tr(g, store, Mode::train, rng);
        FlowResult f = bn.forward(tr, tr.constant(x), std::nullopt);
        std::vector<double> col;
        for (std::size_t i = 0; i < 50; ++i) col.push_back(f.value.value()(i, 0));
        CHECK(std::abs(testing::mean_of(col)) < 1e-10);
    }
    store.at("bn/gamma") = Tensor::row({1.5, -0.7, 2.0});
    store.at("bn/beta") = Tensor::row({0.1, 0.2, -0.3});
    Graph g;
    Context ev(g, store, Mode::eval, rng);
    FlowResult f = bn.forward(ev, ev.constant(x), std::nullopt);
    FlowResult i = bn.inverse(ev, f.value, std::nullopt);
    CHECK(testing::max_abs_diff(i.value.value(), x) <= 1e-9);
    CHECK(std::abs(f.log_det.value()[0] + i.log_det.value()[0]) <= 1e-10);
}

TEST_CASE("logit transform") {
    LogitTransform at0 = logit_forward(Tensor::row({0.0}), 0.05);
    CHECK(at0.value[0] == doctest::Approx(-2.944439).epsilon(1e-6));
    const double mid = (0.5 - 0.05) / 0.95;
    CHECK(std::abs(logit_forward(Tensor::row({mid}), 0.05).value[0]) < 1e-12);
    Rng rng(4);
    Tensor v = rng.uniform_tensor(3, 7);
    CHECK(testing::max_abs_diff(logit_inverse(logit_forward(v, 0.05).value, 0.05), v) <= 1e-9);
    CHECK_THROWS_AS(logit_forward(v, 0.5), Error);
    CHECK_THROWS_AS(logit_forward(v, 0.0), Error);
    Tensor px = Tensor::row({0, 128, 255});
    LogitTransform dq = logit_dequantize(px, 0.05, rng);
    CHECK(std::isfinite(dq.value[2]));
    CHECK(dq.value[0] < dq.value[1]);
    CHECK_THROWS_AS(logit_dequantize(Tensor::row({256}), 0.05, rng), Error);

    // derivative check of the per-element log-det
    const double h = 1e-6, vv = 0.3;
    const double fd = (logit_forward(Tensor::row({vv + h}), 0.05).value[0] -
                       logit_forward(Tensor::row({vv - h}), 0.05).value[0]) /
                      (2 * h);
    CHECK(logit_forward(Tensor::row({vv}), 0.05).log_det[0] == doctest::Approx(std::log(fd)).epsilon(1e-7));
}

TEST_CASE("chains") {
    ParameterStore store;
    Rng rng(5);
    auto a = std::make_shared<AffineBijector>("a", 3);
    auto b = std::make_shared<AffineBijector>("b", 3);
    auto c = std::make_shared<AffineBijector>("c", 3);
    Chain identity({a});
    identity.init(store, rng);
    b->init(store, rng);
    c->init(store, rng);
    store.at("a/raw_diag") = Tensor::full(1, 3, raw_from_scale(1.0));
    Graph g;
    Context ctx(g, store, Mode::eval, rng);
    Tensor x = rng.normal_tensor(4, 3);
    FlowResult fi = identity.forward(ctx, ctx.constant(x), std::nullopt);
    CHECK(testing::max_abs_diff(fi.value.value(), x) <= 1e-12);
    CHECK(std::abs(fi.log_det.value()[0]) <= 1e-12);

    for (const char* n : {"b", "c"}) {
        store.at(std::string(n) + "/shift") = rng.normal_tensor(1, 3);
        store.at(std::string(n) + "/perturb") = rng.normal_tensor(1, 3);
        store.at(std::string(n) + "/raw_diag") = rng.normal_tensor(1, 3);
    }
    Chain there_and_back({b, std::make_shared<InverseBijector>(b)});
    FlowResult tb = there_and_back.forward(ctx, ctx.constant(x), std::nullopt);
    CHECK(testing::max_abs_diff(tb.value.value(), x) <= 1e-9);

    Chain three({b, c, b});
    FlowResult f3 = three.forward(ctx, ctx.constant(x), std::nullopt);
    FlowResult s1 = b->forward(ctx, ctx.constant(x), std::nullopt);
    FlowResult s2 = c->forward(ctx, s1.value, std::nullopt);
    FlowResult s3 = b->forward(ctx, s2.value, std::nullopt);
    CHECK(testing::max_abs_diff(f3.log_det.value(), (s1.log_det + s2.log_det + s3.log_det).value()) <= 1e-12);
    CHECK(testing::max_abs_diff(three.inverse(ctx, f3.value, std::nullopt).value.value(), x) <= 1e-9);

    CHECK_THROWS_AS(Chain({b, std::make_shared<AffineBijector>("d", 2)}), ShapeError);
}
