#pragma once

#include <array>
#include <memory>
#include <span>
#include <optional>
#include <string>
#include <vector>

#include "sere/bijectors.hpp"
#include "sere/distributions.hpp"
#include "sere/made.hpp"

namespace sere {

struct MafSpec {
    std::size_t flows = 2;
    std::size_t mades_per_flow = 5;
    std::vector<std::size_t> made_hidden{1024, 1024};
    Activation made_activation = Activation::relu;
    std::string ordering = "alternate";  // alternate | random
    DegreeRule degrees = DegreeRule::equal;
    bool batch_norm = true;
    double bn_momentum = 0.99;
    // Residual base distribution: hidden map of the previous estimate and
    // the residual network r^l.
    MlpSpec base_hidden{{512, 512}, Activation::relu, Activation::identity, 0.0};
    std::size_t base_feature = 100;
    std::uint64_t seed = 17;
};

// Parameters of the rank-1 Gaussian base, in raw form.
struct BaseParams {
    Var loc;
    Var raw_diag;
    Var perturb;

    GaussianDiagRank1 distribution() const { return GaussianDiagRank1::from_raw(loc, raw_diag, perturb); }
};

// γ_next = γ_prev + r(concat(h(γ_prev), z)), one head per parameter.
class ResidualParamHead {
public:
    ResidualParamHead(std::string name, std::size_t param_dim, std::size_t z_dim, const MlpSpec& hidden,
                      std::size_t feature);
    void init(ParameterStore& store, Rng& rng) const;
    Var update(Context& ctx, Var prev, Var z) const;
    // r(concat(h(γ_prev), z)) alone.
    Var residual(Context& ctx, Var prev, Var z) const;
    std::size_t parameter_count() const { return hidden_.parameter_count() + residual_.parameter_count(); }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::size_t param_dim_, z_dim_;
    Mlp hidden_, residual_;
};

// γ₀⁰ are free constants; each conditioning code z^l rectifies them in
// turn. With no codes the base is unconditional.
class ResidualBase {
public:
    ResidualBase(std::string name, std::size_t dim, std::vector<std::size_t> code_dims, const MafSpec& spec);
    void init(ParameterStore& store, Rng& rng) const;
    // codes.size() must equal code_dims.size(); `rows` sizes the constants
    // when there are no codes.
    BaseParams params(Context& ctx, std::span<const Var> codes, std::size_t rows) const;
    std::size_t parameter_count() const;
    std::size_t dim() const { return dim_; }

private:
    std::string name_;
    std::size_t dim_;
    std::vector<std::size_t> code_dims_;
    std::vector<std::array<ResidualParamHead, 3>> heads_;
};

// x = u_T, u_t = g_t(u_{t−1} | context), u₀ ~ π(u; γ₀). Each g_t is a chain
// of conditional MADE steps; batch-norm bijectors sit between flows.
class MafStack {
public:
    MafStack(std::string name, std::size_t dim, std::size_t context_dim, const MafSpec& spec);
    void init(ParameterStore& store, Rng& rng) const;

    // Log density of x given the base parameters, [n,1].
    Var log_prob(Context& ctx, Var x, std::optional<Var> context, const BaseParams& base) const;
    Var sample(Context& ctx, std::optional<Var> context, const BaseParams& base, Rng& rng) const;
    // Flow from base space to data space and back.
    FlowResult forward(Context& ctx, Var u, std::optional<Var> context) const;
    FlowResult inverse(Context& ctx, Var x, std::optional<Var> context) const;

    std::size_t dim() const { return dim_; }
    std::size_t context_dim() const { return context_dim_; }
    std::size_t parameter_count() const;
    const std::vector<std::shared_ptr<const MadeAffineStep>>& steps() const { return steps_; }

private:
    std::string name_;
    std::size_t dim_, context_dim_;
    std::vector<std::shared_ptr<const MadeAffineStep>> steps_;
    std::shared_ptr<Chain> chain_;
};

}  // namespace sere
