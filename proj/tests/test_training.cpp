#include <cmath>

#include "doctest.h"
#include "sere/oracle.hpp"
#include "sere/training.hpp"
#include "support.hpp"

using namespace sere;

namespace {

HierarchySpec tiny_spec(std::size_t data_dim) {
    HierarchySpec s;
    s.data_dim = data_dim;
    s.latent_dims = {2, 2};
    s.evidence = MlpSpec{{8}, Activation::tanh};
    s.evidence_feature = 4;
    s.latent_encoder = MlpSpec{{8}, Activation::tanh};
    s.latent_feature = 3;
    s.posterior = MlpSpec{{8}, Activation::tanh};
    s.prior_net = MlpSpec{{8}, Activation::tanh};
    s.bijector = MlpSpec{{6}, Activation::tanh, Activation::tanh};
    s.decoder_net = MlpSpec{{12}, Activation::tanh};
    return s;
}

Tensor gray_data(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double base = rng.uniform() < 0.5 ? 0.15 : 0.85;
        for (std::size_t j = 0; j < d; ++j) x(i, j) = j % 2 == 0 ? base : 1.0 - base;
    }
    return x;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.batch_size = 16;
    c.epochs = 3;
    c.lr.base = 3e-3;
    c.warmup.kind = WarmupKind::geometric;
    c.warmup.levels = 2;
    c.seed = 42;
    return c;
}

}  // namespace

TEST_CASE("geometric warm-up examples") {
    WarmupSchedule s{WarmupKind::geometric, 10};
    CHECK(warmup_beta(s, 0) == 0.0);
    CHECK(warmup_beta(s, 1023) == 1.0);
    CHECK(warmup_beta(s, 5000) == 1.0);
    CHECK(warmup_beta(s, 31) == doctest::Approx(0.316228).epsilon(1e-6));
    CHECK(warmup_beta(s, 62) == doctest::Approx(0.316228).epsilon(1e-6));
    CHECK(warmup_beta(s, 1) == doctest::Approx(std::pow(10.0, -0.9)));
    CHECK(warmup_beta(s, 1022) == doctest::Approx(std::pow(10.0, -0.1)));
}

TEST_CASE("geometric warm-up spends 2^n epochs at level n") {
    for (std::size_t N : {1u, 4u, 10u}) {
        WarmupSchedule s{WarmupKind::geometric, N};
        std::size_t epoch = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const double beta = n == 0 ? 0.0 : std::pow(10.0, static_cast<double>(n) / N - 1.0);
            for (std::size_t k = 0; k < (std::size_t{1} << n); ++k, ++epoch) CHECK(warmup_beta(s, epoch) == beta);
        }
        CHECK(warmup_beta(s, epoch) == 1.0);
    }
}

TEST_CASE("warm-up schedules are bounded and nondecreasing") {
    const WarmupSchedule kinds[] = {{WarmupKind::geometric, 10},
                                    {WarmupKind::linear, 10, 256},
                                    {WarmupKind::hard_then_geometric, 6, 256, 300},
                                    {WarmupKind::none}};
    for (const auto& s : kinds) {
        double prev = 0.0;
        bool ok = true;
        for (std::size_t e = 0; e < 100000; ++e) {
            const double b = warmup_beta(s, e);
            ok = ok && b >= prev && b >= 0.0 && b <= 1.0;
            prev = b;
        }
        CHECK(ok);
    }
    CHECK(warmup_beta({WarmupKind::linear, 10, 256}, 128) == doctest::Approx(0.5));
    CHECK(warmup_beta({WarmupKind::hard_then_geometric, 6, 256, 300}, 299) == 0.0);
    CHECK(warmup_beta({WarmupKind::hard_then_geometric, 6, 256, 300}, 301) == doctest::Approx(std::pow(10.0, 1.0 / 6 - 1)));
    CHECK(warmup_kind_from_string("linear") == WarmupKind::linear);
    CHECK_THROWS_AS(warmup_kind_from_string("cubic"), Error);
}

TEST_CASE("free bits") {
    Graph g;
    Var recon = g.constant(Tensor::scalar(-10.0));
    const Var big[] = {g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(3.0))};
    CHECK(free_bits_objective(recon, big, 1.0, 1.0).item() == doctest::Approx(10.0 + 5.0));
    const Var small[] = {g.constant(Tensor::scalar(0.2)), g.constant(Tensor::scalar(0.5))};
    CHECK(free_bits_objective(recon, small, 1.0, 1.0).item() == doctest::Approx(10.0 + 2.0));
    CHECK(free_bits_objective(recon, big, 0.0, 0.4).item() == 10.0 + 0.4 * 5.0);
    CHECK_THROWS_AS(free_bits_objective(recon, big, -1.0, 1.0), Error);

    Graph h;
    Var r = h.leaf(Tensor::scalar(-3.0));
    Var k1 = h.leaf(Tensor::scalar(0.3)), k2 = h.leaf(Tensor::scalar(1.7));
    const Var ks[] = {k1, k2};
    h.backward(free_bits_objective(r, ks, 1.0, 0.25));
    CHECK(h.grad(k1)[0] == 0.0);
    CHECK(h.grad(k2)[0] == doctest::Approx(0.25));
    CHECK(h.grad(r)[0] == doctest::Approx(-1.0));
    // finite differences on the surrogate
    auto loss = [](double a, double b) {
        Graph q;
        const Var kk[] = {q.constant(Tensor::scalar(a)), q.constant(Tensor::scalar(b))};
        return free_bits_objective(q.constant(Tensor::scalar(-3.0)), kk, 1.0, 0.25).item();
    };
    CHECK((loss(0.3 + 1e-6, 1.7) - loss(0.3 - 1e-6, 1.7)) / 2e-6 == doctest::Approx(0.0));
    CHECK((loss(0.3, 1.7 + 1e-6) - loss(0.3, 1.7 - 1e-6)) / 2e-6 == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("learning-rate schedules") {
    LearningRate c{LrKind::cosine, 1e-3, 100};
    CHECK(c.at(0) == doctest::Approx(1e-3));
    CHECK(c.at(50) == doctest::Approx(0.5e-3));
    CHECK(c.at(99) > 0.0);
    CHECK(c.at(100) == 1e-3);
    LearningRate k{LrKind::constant, 2e-3, 0};
    CHECK(k.at(12345) == 2e-3);
    CHECK_THROWS_AS(lr_kind_from_string("step"), Error);
}

TEST_CASE("adam") {
    ParameterStore store;
    store.add("a", Tensor::row({1.0, 2.0}));
    store.add("b", Tensor::row({-1.0}));
    Adam adam;
    adam.step(store, {{"a", Tensor::row({0.0, 0.0})}}, 0.1);
    CHECK(store.at("a") == Tensor::row({1.0, 2.0}));

    Adam one;
    ParameterStore s1;
    s1.add("w", Tensor::scalar(0.5));
    one.step(s1, {{"w", Tensor::scalar(1.0)}}, 0.01);
    CHECK(s1.at("w")[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-9));
    for (int i = 0; i < 5; ++i) one.step(s1, {{"w", Tensor::scalar(1.0)}}, 0.01);
    CHECK(s1.at("w")[0] == doctest::Approx(0.5 - 0.06).epsilon(1e-6));
    CHECK(one.steps() == 6);

    // Independence: updating a alone matches a joint update on its entry.
    ParameterStore j;
    j.add("a", Tensor::row({1.0, 2.0}));
    j.add("b", Tensor::row({-1.0}));
    Adam ja, jb;
    ParameterStore k = j;
    ja.step(j, {{"a", Tensor::row({0.3, -0.2})}, {"b", Tensor::row({5.0})}}, 0.1);
    jb.step(k, {{"a", Tensor::row({0.3, -0.2})}}, 0.1);
    CHECK(j.at("a") == k.at("a"));

    Adam reg({0.9, 0.999, 1e-8, 0.5});
    ParameterStore r;
    r.add("w", Tensor::scalar(2.0));
    r.add("gamma", Tensor::scalar(2.0), true, false);
    reg.step(r, {{"w", Tensor::scalar(0.0)}, {"gamma", Tensor::scalar(0.0)}}, 0.1);
    CHECK(r.at("w")[0] == doctest::Approx(1.9));
    CHECK(r.at("gamma")[0] == 2.0);
    CHECK_THROWS_AS(reg.step(r, {{"w", Tensor::row({1.0, 2.0})}}, 0.1), ShapeError);
}

TEST_CASE("dynamic binarization") {
    Rng rng(3);
    const Tensor zeros = dynamic_binarize(Tensor::full(1, 1000, 0.0), rng);
    const Tensor ones = dynamic_binarize(Tensor::full(1, 1000, 1.0), rng);
    for (std::size_t i = 0; i < 1000; ++i) {
        CHECK(zeros[i] == 0.0);
        CHECK(ones[i] == 1.0);
    }
    const Tensor b = dynamic_binarize(Tensor::full(1, 100000, 0.3), rng);
    std::vector<double> v(b.data().begin(), b.data().end());
    CHECK(std::abs(testing::mean_of(v) - 0.3) < 3 * testing::se_of(v));
    CHECK_THROWS_AS(dynamic_binarize(Tensor::row({1.2}), rng), Error);
    CHECK_THROWS_AS(dynamic_binarize(Tensor::row({-0.1}), rng), Error);
}

TEST_CASE("config validation and splits") {
    TrainConfig c;
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), Error);
    c.batch_size = 2;
    CHECK_NOTHROW(c.validate());
    Tensor data({50, 2});
    for (std::size_t i = 0; i < 50; ++i) data(i, 0) = static_cast<double>(i);
    Dataset d = split_dataset(data, 0, 7);
    CHECK(d.valid.rows() == 5);
    CHECK(d.train.rows() == 45);
    std::vector<double> seen;
    for (const Tensor* t : {&d.train, &d.valid})
        for (std::size_t i = 0; i < t->rows(); ++i) seen.push_back((*t)(i, 0));
    std::sort(seen.begin(), seen.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(seen[i] == static_cast<double>(i));
    Dataset again = split_dataset(data, 0, 7);
    CHECK(again.valid == d.valid);
    CHECK_THROWS_AS(split_dataset(data, 50, 7), Error);
}

TEST_CASE("training with zero learning rate leaves parameters unchanged") {
    Hierarchy h(tiny_spec(6));
    TrainConfig c = quick_config();
    c.lr.base = 0.0;
    c.epochs = 2;
    Dataset data = split_dataset(gray_data(80, 6, 1), 16, 2);
    TrainState s = init_train_state(h, c);
    const auto before = s.params.checksum();
    std::vector<EpochMetrics> ms;
    train(c, h, data, s, [&](const EpochMetrics& m, const TrainState& st) {
        ms.push_back(m);
        CHECK(m.checksum == st.params.checksum());
    });
    REQUIRE(ms.size() == 2);
    CHECK(s.params.checksum() == before);
    CHECK(ms[0].checksum == before);
    CHECK(std::isfinite(ms[1].valid_elbo));
    CHECK(ms[1].valid_kls.size() == 2);
    CHECK(ms[0].beta == 0.0);
    CHECK(s.epoch == 2);
}

TEST_CASE("training is deterministic and resumable") {
    Hierarchy h(tiny_spec(6));
    TrainConfig c = quick_config();
    c.epochs = 4;
    Dataset data = split_dataset(gray_data(80, 6, 1), 16, 2);
    auto run = [&](std::size_t stop_at) {
        TrainState s = init_train_state(h, c);
        std::vector<std::pair<double, std::uint64_t>> stream;
        auto cb = [&](const EpochMetrics& m, const TrainState&) { stream.push_back({m.valid_elbo, m.checksum}); };
        TrainConfig first = c;
        first.epochs = stop_at;
        train(first, h, data, s, cb);
        TrainState resumed{s.params, s.adam, s.rng, s.epoch};
        train(c, h, data, resumed, cb);
        return stream;
    };
    const auto a = run(4), b = run(4), r = run(2);
    CHECK(a == b);
    CHECK(a == r);
    CHECK(a.front().second != a.back().second);
}

TEST_CASE("non-finite losses are reported by term") {
    Hierarchy h(tiny_spec(6));
    TrainConfig c = quick_config();
    c.epochs = 1;
    Dataset data = split_dataset(gray_data(40, 6, 1), 8, 2);
    TrainState s = init_train_state(h, c);
    for (auto& v : s.params.at("decoder/logits/out/b").storage()) v = std::nan("");
    try {
        train(c, h, data, s);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("reconstruction") != std::string::npos);
    }
    TrainConfig bad = quick_config();
    bad.batch_size = 1;
    TrainState s2 = init_train_state(h, bad);
    CHECK_THROWS_AS(train(bad, h, data, s2), Error);
}

TEST_CASE("validation ELBO improves on linear-Gaussian data") {
    Rng rng(5);
    const LinearGaussianModel lg = random_sere_model(rng, {2, 2}, 3, 0.5);
    const Eigen::MatrixXd sim = simulate(lg, 600, rng);
    Tensor x({600, 3});
    for (std::size_t i = 0; i < 600; ++i)
        for (std::size_t j = 0; j < 3; ++j) x(i, j) = sim(static_cast<Eigen::Index>(i), 4 + static_cast<Eigen::Index>(j));
    HierarchySpec spec = tiny_spec(3);
    spec.decoder = DecoderKind::maf;
    spec.maf.flows = 0;
    spec.maf.base_hidden = MlpSpec{{8}, Activation::tanh};
    spec.maf.base_feature = 4;
    Hierarchy h(spec);
    TrainConfig c = quick_config();
    c.binarize = false;
    c.warmup.kind = WarmupKind::none;
    c.epochs = 20;
    c.batch_size = 50;
    c.lr.base = 2e-3;
    Dataset data = split_dataset(x, 100, 3);
    TrainState s = init_train_state(h, c);
    std::vector<double> v;
    train(c, h, data, s, [&](const EpochMetrics& m, const TrainState&) { v.push_back(m.valid_elbo); });
    REQUIRE(v.size() == 20);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        head += v[i] / 5;
        tail += v[15 + i] / 5;
    }
    INFO("first " << v.front() << " last " << v.back());
    CHECK(v.back() > v.front());
    CHECK(tail > head);
}
