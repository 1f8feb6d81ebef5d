#include <cmath>

#include "doctest.h"
#include "sere/rng.hpp"
#include "sere/tensor.hpp"
#include "support.hpp"

using namespace sere;

TEST_CASE("tensor construction and access") {
    Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t(1, 2) == 6);
    CHECK(t.transposed()(2, 1) == 6);
    CHECK(t.row_slice(1, 1)(0, 0) == 4);
    CHECK(Tensor::identity(3)(1, 1) == 1);
    CHECK(Tensor::identity(3)(0, 1) == 0);
    CHECK(Tensor::scalar(2.5).item() == 2.5);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.item(), ShapeError);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK(t.reshaped({3, 2})(2, 1) == 6);
}

TEST_CASE("finite check") {
    Tensor t = Tensor::row({1.0, 2.0});
    CHECK(t.all_finite());
    t[1] = std::nan("");
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng is deterministic and restorable") {
    Rng a(123), b(123);
    for (int i = 0; i < 10; ++i) CHECK(a() == b());
    const auto s = a.state();
    const double x = a.normal();
    a.set_state(s);
    CHECK(a.normal() == x);
    Rng c(124);
    CHECK(c() != Rng(123)());
}

TEST_CASE("rng moments") {
    Rng r(9);
    std::vector<double> u, z;
    for (int i = 0; i < 100000; ++i) {
        u.push_back(r.uniform());
        z.push_back(r.normal());
    }
    CHECK(std::abs(testing::mean_of(u) - 0.5) < 3 * testing::se_of(u));
    CHECK(std::abs(testing::mean_of(z)) < 3 * testing::se_of(z));
    double m2 = 0;
    for (double v : z) m2 += v * v;
    CHECK(std::abs(m2 / z.size() - 1.0) < 0.02);
    for (int i = 0; i < 1000; ++i) CHECK(r.below(7) < 7);
}

TEST_CASE("split streams differ from parent") {
    Rng r(5);
    Rng child = r.split(1);
    CHECK(child() != r());
}
