#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sere/autodiff.hpp"
#include "sere/nn.hpp"

namespace sere {

// Output of a bijector pass: transformed rows and the per-row
// log|det Jacobian| of the map that was applied, shape [n,1].
struct FlowResult {
    Var value;
    Var log_det;
};

// Parameters of z = shift + (diag(d) + u uᵀ) ε with d > 0.
struct AffineParams {
    Var shift;
    Var diag;
    Var perturb;

    static AffineParams from_raw(Var shift, Var raw_diag, Var perturb);
};

FlowResult affine_forward(const AffineParams& p, Var eps);
// Sherman-Morrison solve of S ε = z − shift.
FlowResult affine_inverse(const AffineParams& p, Var z);

class Bijector {
public:
    virtual ~Bijector() = default;
    virtual FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const = 0;
    virtual FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const = 0;
    virtual std::size_t dim() const = 0;
    virtual void init(ParameterStore& store, Rng& rng) const = 0;
};

using BijectorPtr = std::shared_ptr<const Bijector>;

// Affine layer whose shift/diag/perturb are free parameters.
class AffineBijector final : public Bijector {
public:
    AffineBijector(std::string name, std::size_t dim) : name_(std::move(name)), dim_(dim) {}
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override;
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override;
    std::size_t dim() const override { return dim_; }
    void init(ParameterStore& store, Rng& rng) const override;
    AffineParams params(Context& ctx) const;

private:
    std::string name_;
    std::size_t dim_;
};

// Affine layer whose parameters are produced by three head networks from a
// conditioning input. Without a conditioning input a learned constant row
// is fed to the heads instead.
class ConditionedAffineBijector final : public Bijector {
public:
    ConditionedAffineBijector(std::string name, std::size_t dim, std::size_t cond_dim, MlpSpec head,
                              bool learned_input);
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override;
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override;
    std::size_t dim() const override { return dim_; }
    void init(ParameterStore& store, Rng& rng) const override;
    AffineParams params(Context& ctx, std::optional<Var> cond, std::size_t rows) const;
    std::size_t parameter_count() const;
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::size_t dim_, cond_dim_;
    bool learned_input_;
    Mlp shift_, diag_, perturb_;
};

// y = γ (x − mean)/sqrt(var + ε) + β. Train mode normalizes with batch
// statistics and updates running averages; eval mode uses the running
// averages and requires them to have been populated.
class BatchNormBijector final : public Bijector {
public:
    BatchNormBijector(std::string name, std::size_t dim, double momentum = 0.99, double epsilon = 1e-5)
        : name_(std::move(name)), dim_(dim), momentum_(momentum), epsilon_(epsilon) {}
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override;
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override;
    std::size_t dim() const override { return dim_; }
    void init(ParameterStore& store, Rng& rng) const override;

private:
    struct Stats {
        Var mean, var;
    };
    Stats stats(Context& ctx, Var x) const;
    Var gamma(Context& ctx) const;

    std::string name_;
    std::size_t dim_;
    double momentum_, epsilon_;
};

class InverseBijector final : public Bijector {
public:
    explicit InverseBijector(BijectorPtr inner) : inner_(std::move(inner)) {}
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override {
        return inner_->inverse(ctx, x, cond);
    }
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override {
        return inner_->forward(ctx, y, cond);
    }
    std::size_t dim() const override { return inner_->dim(); }
    void init(ParameterStore& store, Rng& rng) const override { inner_->init(store, rng); }

private:
    BijectorPtr inner_;
};

// Forward applies links left to right and adds their log-dets; inverse
// walks the links in reverse.
class Chain final : public Bijector {
public:
    explicit Chain(std::vector<BijectorPtr> links);
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override;
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override;
    std::size_t dim() const override { return links_.empty() ? 0 : links_.front()->dim(); }
    void init(ParameterStore& store, Rng& rng) const override;
    const std::vector<BijectorPtr>& links() const { return links_; }

private:
    std::vector<BijectorPtr> links_;
};

// Dequantization into logit space: v = (x + U[0,1))/256, y = logit(α + (1−α)v).
struct LogitTransform {
    Tensor value;
    Tensor log_det;  // per-element log|dy/dv|
};

LogitTransform logit_dequantize(const Tensor& pixels, double alpha, Rng& rng);
// Deterministic part: v in [0,1] -> y.
LogitTransform logit_forward(const Tensor& v, double alpha);
Tensor logit_inverse(const Tensor& y, double alpha);

}  // namespace sere
