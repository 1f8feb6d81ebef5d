#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "sere/hierarchy.hpp"

namespace sere {

// Linear instance of the hierarchy:
//   ε^l ~ N(M^l z^{l−1} + m^l, diag(prior_var^l))
//   z^l = (diag(d^l) + u^l u^lᵀ) ε^l + B^l z^{l−1} + b^l
//   x   = Σ_l C^l z^l + x_offset + η,  η ~ N(0, diag(r_diag) + ρρᵀ)
// M¹ and B¹ are empty.
struct LinearLayer {
    Eigen::MatrixXd M;
    Eigen::VectorXd m;
    Eigen::VectorXd prior_var;
    Eigen::VectorXd d;
    Eigen::VectorXd u;
    Eigen::MatrixXd B;
    Eigen::VectorXd b;
    Eigen::MatrixXd C;
};

struct LinearGaussianModel {
    std::vector<LinearLayer> layers;
    Eigen::VectorXd x_offset;
    Eigen::VectorXd r_diag;
    Eigen::VectorXd r_perturb;

    std::size_t x_dim() const { return static_cast<std::size_t>(x_offset.size()); }
    std::size_t latent_dim(std::size_t l) const { return static_cast<std::size_t>(layers[l].d.size()); }
    std::vector<std::size_t> latent_dims() const;
    Eigen::MatrixXd noise_cov() const;
    void validate() const;
};

// Mean and covariance over (ε¹, …, ε^L, x).
struct GaussianJoint {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::vector<std::size_t> block_offsets;  // start of ε¹ … ε^L, x
};

GaussianJoint build_joint(const LinearGaussianModel& model);
double exact_log_marginal(const LinearGaussianModel& model, const Eigen::VectorXd& x);

// Draws rows of (ε¹, …, ε^L, x) by ancestral sampling.
Eigen::MatrixXd simulate(const LinearGaussianModel& model, std::size_t n, Rng& rng);

enum class Conditioning { z_prev, eps_prev };

// max over l ≥ 3 of |Cov(ε^l, ε^{<l−1} | c^{l−1}, x)| where c is z^{l−1}
// or ε^{l−1}.
double verify_factorization(const LinearGaussianModel& model, Conditioning conditioning = Conditioning::z_prev);

// Valid SeRe instance: every conditional map populated, x observes z^L.
LinearGaussianModel random_sere_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim,
                                      double coupling = 0.7);
// Layers share nothing (M = B = 0) and x observes every z^l.
LinearGaussianModel random_broken_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim);
// Like random_sere_model but x observes every z^l.
LinearGaussianModel random_all_observed_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim);

// Hierarchy with identity activations and parameters chosen so that its
// generative model equals `model` and each posterior q(ε^l | z^{l−1}, x)
// carries the exact conditional mean and the diagonal of the exact
// conditional covariance (inflated by `inflate`, and lifted above the scale
// floor when necessary).
struct LinearMatch {
    HierarchySpec spec;
    ParameterStore params;
};
LinearMatch match_linear_model(const LinearGaussianModel& model, double inflate = 1.0);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // flagged as non-smooth
};

// Central differences at h and h/2 against reverse mode for every trainable
// entry of `params` (at most `max_per_tensor` entries each, 0 = all). An
// entry whose central quotients at h and h/2 disagree, or whose left and
// right one-sided quotients disagree, sits near a kink and is skipped. Relative error uses max(|ad|, |fd|, floor) as denominator.
// `fn` receives a fresh train-mode context whose noise stream restarts at
// `seed` on every call.
GradCheckResult grad_check(const std::function<Var(Context&)>& fn, ParameterStore& params, double h = 1e-5,
                           std::size_t max_per_tensor = 0, double floor = 1e-4, std::uint64_t seed = 7);

Tensor to_tensor(const Eigen::MatrixXd& m);
Eigen::MatrixXd to_matrix(const Tensor& t);

}  // namespace sere
