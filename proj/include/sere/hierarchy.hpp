#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sere/bijectors.hpp"
#include "sere/distributions.hpp"
#include "sere/maf.hpp"
#include "sere/nn.hpp"

namespace sere {

// self_reflective: prior, posterior and bijector of layer l all see z^{l−1}.
// independent: the DLGM baseline, every layer conditioned on nothing but x.
enum class Wiring { self_reflective, independent };
enum class VariationalStyle { concat, residual };
enum class DecoderKind { bernoulli, maf };
enum class PriorStyle { conditioned, standard_normal };

Wiring wiring_from_string(const std::string& s);
VariationalStyle style_from_string(const std::string& s);
DecoderKind decoder_from_string(const std::string& s);
PriorStyle prior_from_string(const std::string& s);
std::string to_string(Wiring w);
std::string to_string(VariationalStyle s);
std::string to_string(DecoderKind d);
std::string to_string(PriorStyle p);

struct HierarchySpec {
    std::size_t data_dim = 784;
    std::vector<std::size_t> latent_dims = std::vector<std::size_t>(10, 10);
    Wiring wiring = Wiring::self_reflective;
    VariationalStyle style = VariationalStyle::concat;
    DecoderKind decoder = DecoderKind::bernoulli;
    PriorStyle prior = PriorStyle::conditioned;
    bool batch_norm = true;
    double bn_momentum = 0.99;

    MlpSpec evidence{{256, 256}};
    std::size_t evidence_feature = 20;
    MlpSpec latent_encoder{{256, 256}};
    std::size_t latent_feature = 20;
    MlpSpec posterior{{256, 256}};
    MlpSpec prior_net{{256, 256}};
    MlpSpec bijector{{20, 20}, Activation::tanh, Activation::tanh};
    MlpSpec decoder_net{{512, 512}};
    // Output size of the hidden map of the first posterior estimate; 0 means
    // ⌊D^l/3⌋ (at least 1).
    std::size_t residual_feature = 0;
    MafSpec maf;

    std::size_t layers() const { return latent_dims.size(); }
    std::size_t total_latent() const;
    std::size_t residual_feature_for(std::size_t l) const;
    void validate() const;
};

struct LayerState {
    Var eps;
    Var z;
    GaussianDiag prior;
    GaussianDiag posterior;
    Var kl;     // [n,1] analytic KL(q ‖ p) in ε-space
    Var log_q;  // [n,1] log q(ε^l | ·) at the drawn ε
    Var log_p;  // [n,1] log p(ε^l | z^{l−1}) at the drawn ε
    Tensor noise;
};

struct ElboTerms {
    Var recon;              // [n,1] log p(x | z^{1:L})
    std::vector<Var> kls;   // per layer, [n,1]
    Var elbo;               // [n,1] recon − Σ KL
    Var objective;          // scalar: mean(recon − β Σ KL)
};

struct Generated {
    std::vector<Tensor> z;
    Tensor x;     // sampled data
    Tensor mean;  // Bernoulli probabilities, or a copy of x for flows
};

struct EvalReport {
    double elbo = 0.0;
    double recon = 0.0;
    std::vector<double> kls;
    double iwae = 0.0;
    double iwae_se = 0.0;
    std::size_t iw_samples = 0;
};

class Hierarchy {
public:
    explicit Hierarchy(HierarchySpec spec);

    void init(ParameterStore& store, Rng& rng) const;
    std::size_t parameter_count() const;
    const HierarchySpec& spec() const { return spec_; }

    // Conditioning input of layer l: batch-normed z^{l−1}, or nothing for
    // layer 0 and the independent wiring.
    std::optional<Var> layer_input(Context& ctx, std::size_t l, std::optional<Var> z_prev) const;
    GaussianDiag prior(Context& ctx, std::size_t l, std::optional<Var> cond, std::size_t rows) const;
    GaussianDiag posterior(Context& ctx, std::size_t l, std::optional<Var> cond, Var x) const;
    // The shared bijector f^l, used verbatim by inference and generation.
    FlowResult transform(Context& ctx, std::size_t l, Var eps, std::optional<Var> cond) const;
    Var decoder_log_prob(Context& ctx, std::span<const Var> z, Var x) const;

    // Posterior pass. `noise` (one [n,D^l] tensor per layer) fixes the draws.
    std::vector<LayerState> infer(Context& ctx, Var x, const std::vector<Tensor>* noise = nullptr) const;
    Generated generate(Context& ctx, std::size_t count) const;

    ElboTerms elbo(Context& ctx, Var x, double beta, std::size_t n_mc = 1) const;
    // log p(x, z) − log q(z | x) per row for a single posterior draw.
    Var log_weights(Context& ctx, Var x, const std::vector<Tensor>* noise = nullptr) const;
    Var joint_log_prob(Context& ctx, const std::vector<Var>& eps, Var x) const;

    const BijectorPtr& bijector(std::size_t l) const { return bijectors_[l]; }

private:
    std::string layer_name(std::size_t l) const { return "layer" + std::to_string(l + 1); }
    bool conditioned(std::size_t l) const { return l > 0 && spec_.wiring == Wiring::self_reflective; }
    Var evidence(Context& ctx, std::size_t l, Var x) const;

    HierarchySpec spec_;
    struct Layer {
        Mlp evidence;
        std::optional<Mlp> latent_encoder;
        Mlp loc, scale;                                   // posterior heads
        std::optional<Mlp> loc_hidden, scale_hidden;      // residual style
        std::optional<Mlp> loc_residual, scale_residual;  // residual style
        std::optional<Mlp> prior_loc, prior_scale;        // conditioned prior
        std::optional<BatchNormLayer> bn;
    };
    std::vector<Layer> layers_;
    std::vector<BijectorPtr> bijectors_;
    std::optional<Mlp> decoder_mlp_;
    std::optional<ResidualBase> decoder_base_;
    std::optional<MafStack> decoder_maf_;
};

// Tightest-K importance-weighted bound per data row, evaluated in eval mode
// without gradient tracking. Rows are processed `chunk` replicas at a time.
std::vector<double> iwae_bound_rows(const Hierarchy& model, ParameterStore& params, const Tensor& x,
                                    std::size_t k, Rng& rng, std::size_t chunk = 2000);
double iwae_bound(const Hierarchy& model, ParameterStore& params, const Tensor& x, std::size_t k, Rng& rng);

// Eval-mode ELBO (analytic KLs, one draw) and IWAE-K averaged over rows.
EvalReport evaluate(const Hierarchy& model, ParameterStore& params, const Tensor& x, std::size_t k, Rng& rng,
                    std::size_t batch = 500);

// Smallest evidence feature size giving the independent-wiring variant of
// `spec` at least `budget` learnable parameters.
HierarchySpec match_budget(HierarchySpec spec, std::size_t budget);

}  // namespace sere
