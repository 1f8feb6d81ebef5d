#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sere/autodiff.hpp"

namespace testing {

using sere::Graph;
using sere::Tensor;
using sere::Var;

// Reverse mode vs central differences for f(inputs) -> scalar.
inline double max_grad_error(const std::function<Var(Graph&, const std::vector<Var>&)>& f, std::vector<Tensor> inputs,
                             double h = 1e-6) {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t));
    Var y = f(g, leaves);
    g.backward(y);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor ad = g.grad(leaves[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            auto eval = [&](double delta) {
                auto shifted = inputs;
                shifted[k][i] += delta;
                Graph g2(false);
                std::vector<Var> vs;
                for (const auto& t : shifted) vs.push_back(g2.constant(t));
                return f(g2, vs).item();
            };
            const double fd = (eval(h) - eval(-h)) / (2 * h);
            worst = std::max(worst, std::abs(fd - ad[i]) / std::max({1.0, std::abs(fd), std::abs(ad[i])}));
        }
    }
    return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double se_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace testing
