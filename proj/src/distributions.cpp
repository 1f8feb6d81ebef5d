#include "sere/distributions.hpp"

#include <algorithm>
#include <cmath>

namespace sere {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void require_same_shape(const char* op, Var a, Var b) {
    if (a.rows() != b.rows() && a.rows() != 1 && b.rows() != 1) {
        throw ShapeError(std::string(op) + ": batch mismatch " + shape_str(a.value().shape()) + " vs " +
                         shape_str(b.value().shape()));
    }
    if (a.cols() != b.cols()) {
        throw ShapeError(std::string(op) + ": dimension mismatch " + shape_str(a.value().shape()) + " vs " +
                         shape_str(b.value().shape()));
    }
}

}  // namespace

Var scale_from_raw(Var raw) { return softplus(elu(raw)); }
double scale_from_raw(double raw) { return scalar::softplus(scalar::elu(raw)); }
double scale_floor() { return scalar::softplus(-1.0); }

double raw_from_scale(double scale) {
    if (!(scale > scale_floor())) {
        throw Error("scale " + std::to_string(scale) + " is below the reachable floor softplus(-1)");
    }
    const double e = std::log(std::expm1(scale));  // elu(raw)
    return e > 0 ? e : std::log1p(e);
}

Var gauss_diag_reparam(const GaussianDiag& g, const Tensor& noise) {
    Graph& graph = *g.loc.graph;
    return add(g.loc, mul(sqrt(g.var), graph.constant(noise)));
}

DiagSample gauss_diag_sample(const GaussianDiag& g, Rng& rng) {
    const std::size_t rows = std::max(g.loc.rows(), g.var.rows());
    Tensor noise = rng.normal_tensor(rows, g.dim());
    Var value = gauss_diag_reparam(g, noise);
    return {value, std::move(noise)};
}

Var gauss_diag_log_prob(const GaussianDiag& g, Var x) {
    require_same_shape("gauss_diag_log_prob", g.loc, x);
    Var diff = sub(x, g.loc);
    Var terms = add(log(g.var), div(square(diff), g.var));
    return mul(add(row_sum(terms), static_cast<double>(g.dim()) * kLog2Pi), -0.5);
}

Var standard_normal_log_prob(Var x) {
    return mul(add(row_sum(square(x)), static_cast<double>(x.cols()) * kLog2Pi), -0.5);
}

Var kl_diag_diag(const GaussianDiag& q, const GaussianDiag& p) {
    require_same_shape("kl_diag_diag", q.loc, p.loc);
    Var ratio = div(q.var, p.var);
    Var mahal = div(square(sub(p.loc, q.loc)), p.var);
    Var terms = sub(add(ratio, mahal), log(ratio));
    return mul(add(row_sum(terms), -static_cast<double>(q.dim())), 0.5);
}

Var gauss_rank1_log_prob(const GaussianDiagRank1& g, Var x) {
    require_same_shape("gauss_rank1_log_prob", g.loc, x);
    Var r = sub(x, g.loc);
    Var u_over_d = div(g.perturb, g.diag);
    Var denom = add(row_sum(mul(g.perturb, u_over_d)), 1.0);   // 1 + uᵀD⁻¹u
    Var proj = row_sum(mul(u_over_d, r));                      // uᵀD⁻¹r
    Var quad = sub(row_sum(div(square(r), g.diag)), div(square(proj), denom));
    Var log_det = add(row_sum(log(g.diag)), log(denom));
    const double d = static_cast<double>(x.cols());
    return mul(add(add(quad, log_det), d * kLog2Pi), -0.5);
}

Var gauss_rank1_sample(const GaussianDiagRank1& g, Rng& rng) {
    Graph& graph = *g.loc.graph;
    const std::size_t rows = std::max({g.loc.rows(), g.diag.rows(), g.perturb.rows()});
    Var n1 = graph.constant(rng.normal_tensor(rows, g.loc.cols()));
    Var n2 = graph.constant(rng.normal_tensor(rows, 1));
    return add(add(g.loc, mul(sqrt(g.diag), n1)), mul(g.perturb, n2));
}

Var bernoulli_log_prob(Var logits, Var x) {
    require_same_shape("bernoulli_log_prob", logits, x);
    for (double v : x.value().data()) {
        if (v != 0.0 && v != 1.0) throw Error("bernoulli_log_prob: observation " + std::to_string(v) + " is not binary");
    }
    return row_sum(sub(mul(x, logits), softplus(logits)));
}

Tensor bernoulli_sample(const Tensor& logits, Rng& rng) {
    Tensor out(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = rng.uniform() < scalar::sigmoid(logits[i]) ? 1.0 : 0.0;
    return out;
}

}  // namespace sere
