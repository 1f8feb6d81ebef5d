#pragma once

#include "sere/autodiff.hpp"
#include "sere/rng.hpp"

namespace sere {

// σ² = softplus(elu(raw)). Strictly positive, monotone, bounded below by
// softplus(-1) ≈ 0.3133 and asymptotically the identity for large raw.
Var scale_from_raw(Var raw);
double scale_from_raw(double raw);
// Inverse of the scalar map; throws for values at or below softplus(-1).
double raw_from_scale(double scale);
double scale_floor();

// Diagonal Gaussian over the rows of a batch. `var` holds variances.
struct GaussianDiag {
    Var loc;
    Var var;

    static GaussianDiag from_raw(Var loc, Var raw_scale) { return {loc, scale_from_raw(raw_scale)}; }
    std::size_t dim() const { return loc.cols(); }
};

struct DiagSample {
    Var value;
    Tensor noise;
};

// value = loc + sqrt(var) ⊙ noise.
DiagSample gauss_diag_sample(const GaussianDiag& g, Rng& rng);
Var gauss_diag_reparam(const GaussianDiag& g, const Tensor& noise);

// Row-wise log densities, shape [n,1].
Var gauss_diag_log_prob(const GaussianDiag& g, Var x);
Var standard_normal_log_prob(Var x);

// Row-wise KL(q || p), shape [n,1].
Var kl_diag_diag(const GaussianDiag& q, const GaussianDiag& p);

// Gaussian with covariance diag(diag) + perturb perturbᵀ.
struct GaussianDiagRank1 {
    Var loc;
    Var diag;
    Var perturb;

    static GaussianDiagRank1 from_raw(Var loc, Var raw_diag, Var perturb) {
        return {loc, scale_from_raw(raw_diag), perturb};
    }
};

// Determinant lemma for the log-determinant, Sherman-Morrison for the
// quadratic form.
Var gauss_rank1_log_prob(const GaussianDiagRank1& g, Var x);
Var gauss_rank1_sample(const GaussianDiagRank1& g, Rng& rng);

// Σ x·logit − softplus(logit) per row; x must be binary.
Var bernoulli_log_prob(Var logits, Var x);
Tensor bernoulli_sample(const Tensor& logits, Rng& rng);

}  // namespace sere
