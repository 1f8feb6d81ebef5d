#include "sere/bijectors.hpp"

#include <cmath>

#include "sere/distributions.hpp"

namespace sere {
namespace {

Var zeros_col(Graph& g, std::size_t rows) { return g.constant(Tensor({rows, 1})); }

void require_dim(const char* op, Var x, std::size_t dim) {
    if (x.cols() != dim) {
        throw ShapeError(std::string(op) + ": input has " + std::to_string(x.cols()) + " columns, bijector dim is " +
                         std::to_string(dim));
    }
}

void assert_positive(const char* op, Var d) {
    for (double v : d.value().data()) {
        if (std::isnan(v)) throw NumericError(std::string(op) + ": diagonal entry is NaN");
        if (!(v > 0.0)) throw Error(std::string(op) + ": nonpositive diagonal entry " + std::to_string(v));
    }
}

}  // namespace

AffineParams AffineParams::from_raw(Var shift, Var raw_diag, Var perturb) {
    return {shift, scale_from_raw(raw_diag), perturb};
}

FlowResult affine_forward(const AffineParams& p, Var eps) {
    require_dim("affine_forward", eps, p.diag.cols());
    assert_positive("affine_forward", p.diag);
    Var proj = row_sum(mul(p.perturb, eps));  // uᵀε
    Var z = add(add(p.shift, mul(p.diag, eps)), mul(p.perturb, proj));
    Var lemma = add(row_sum(div(square(p.perturb), p.diag)), 1.0);
    Var log_det = add(row_sum(log(p.diag)), log(lemma));
    if (log_det.rows() != z.rows()) log_det = repeat_rows(log_det, z.rows());
    return {z, log_det};
}

FlowResult affine_inverse(const AffineParams& p, Var z) {
    require_dim("affine_inverse", z, p.diag.cols());
    assert_positive("affine_inverse", p.diag);
    Var w = div(sub(z, p.shift), p.diag);
    Var u_over_d = div(p.perturb, p.diag);
    Var lemma = add(row_sum(mul(p.perturb, u_over_d)), 1.0);
    Var coef = div(row_sum(mul(p.perturb, w)), lemma);
    Var eps = sub(w, mul(u_over_d, coef));
    Var log_det = -add(row_sum(log(p.diag)), log(lemma));
    if (log_det.rows() != eps.rows()) log_det = repeat_rows(log_det, eps.rows());
    return {eps, log_det};
}

// ---------------------------------------------------------------------------

void AffineBijector::init(ParameterStore& store, Rng&) const {
    store.add(name_ + "/shift", Tensor({1, dim_}));
    store.add(name_ + "/raw_diag", Tensor({1, dim_}));
    store.add(name_ + "/perturb", Tensor({1, dim_}));
}

AffineParams AffineBijector::params(Context& ctx) const {
    return AffineParams::from_raw(ctx.param(name_ + "/shift"), ctx.param(name_ + "/raw_diag"),
                                  ctx.param(name_ + "/perturb"));
}

FlowResult AffineBijector::forward(Context& ctx, Var x, std::optional<Var>) const {
    return affine_forward(params(ctx), x);
}

FlowResult AffineBijector::inverse(Context& ctx, Var y, std::optional<Var>) const {
    return affine_inverse(params(ctx), y);
}

// ---------------------------------------------------------------------------

ConditionedAffineBijector::ConditionedAffineBijector(std::string name, std::size_t dim, std::size_t cond_dim,
                                                     MlpSpec head, bool learned_input)
    : name_(std::move(name)),
      dim_(dim),
      cond_dim_(cond_dim),
      learned_input_(learned_input),
      shift_(name_ + "/shift", cond_dim, dim, head),
      diag_(name_ + "/diag", cond_dim, dim, head),
      perturb_(name_ + "/perturb", cond_dim, dim, head) {}

void ConditionedAffineBijector::init(ParameterStore& store, Rng& rng) const {
    if (learned_input_) store.add(name_ + "/input", Tensor({1, cond_dim_}));
    shift_.init(store, rng);
    diag_.init(store, rng);
    perturb_.init(store, rng);
}

std::size_t ConditionedAffineBijector::parameter_count() const {
    return (learned_input_ ? cond_dim_ : 0) + shift_.parameter_count() + diag_.parameter_count() +
           perturb_.parameter_count();
}

AffineParams ConditionedAffineBijector::params(Context& ctx, std::optional<Var> cond, std::size_t rows) const {
    Var input;
    if (learned_input_) {
        if (cond) throw Error("bijector '" + name_ + "' uses a learned input and takes no conditioning");
        input = repeat_rows(ctx.param(name_ + "/input"), rows);
    } else {
        if (!cond) throw Error("bijector '" + name_ + "' requires a conditioning input");
        input = *cond;
    }
    return AffineParams::from_raw(shift_.forward(ctx, input), diag_.forward(ctx, input), perturb_.forward(ctx, input));
}

FlowResult ConditionedAffineBijector::forward(Context& ctx, Var x, std::optional<Var> cond) const {
    return affine_forward(params(ctx, cond, x.rows()), x);
}

FlowResult ConditionedAffineBijector::inverse(Context& ctx, Var y, std::optional<Var> cond) const {
    return affine_inverse(params(ctx, cond, y.rows()), y);
}

// ---------------------------------------------------------------------------

void BatchNormBijector::init(ParameterStore& store, Rng&) const {
    store.add(name_ + "/gamma", Tensor({1, dim_}, 1.0), true, false);
    store.add(name_ + "/beta", Tensor({1, dim_}), true, false);
    store.add(name_ + "/running_mean", Tensor({1, dim_}), false, false);
    store.add(name_ + "/running_var", Tensor({1, dim_}, 1.0), false, false);
    store.add(name_ + "/updates", Tensor({1, 1}), false, false);
}

Var BatchNormBijector::gamma(Context& ctx) const {
    Var g = ctx.param(name_ + "/gamma");
    for (double v : g.value().data()) {
        if (v == 0.0) throw Error("batchnorm bijector '" + name_ + "': gamma has a zero entry, map is not invertible");
    }
    return g;
}

BatchNormBijector::Stats BatchNormBijector::stats(Context& ctx, Var x) const {
    if (ctx.training()) {
        if (x.rows() < 2) throw Error("batchnorm bijector '" + name_ + "': train mode needs a batch of at least 2");
        Var mu = col_mean(x);
        Var var = col_mean(square(sub(x, mu)));
        if (ctx.update_running_stats) {
            Tensor& rm = ctx.params().at(name_ + "/running_mean");
            Tensor& rv = ctx.params().at(name_ + "/running_var");
            Tensor& n = ctx.params().at(name_ + "/updates");
            // First update copies the batch statistics.
            const double m = n[0] == 0.0 ? 0.0 : momentum_;
            for (std::size_t i = 0; i < dim_; ++i) {
                rm[i] = m * rm[i] + (1.0 - m) * mu.value()[i];
                rv[i] = m * rv[i] + (1.0 - m) * var.value()[i];
            }
            n[0] += 1.0;
        }
        return {mu, var};
    }
    if (ctx.params().at(name_ + "/updates")[0] == 0.0) {
        throw Error("batchnorm bijector '" + name_ + "': running statistics were never populated");
    }
    return {ctx.param(name_ + "/running_mean"), ctx.param(name_ + "/running_var")};
}

FlowResult BatchNormBijector::forward(Context& ctx, Var x, std::optional<Var>) const {
    require_dim("batchnorm_bijector", x, dim_);
    const Stats s = stats(ctx, x);
    Var g = gamma(ctx);
    Var denom = sqrt(add(s.var, epsilon_));
    Var y = add(mul(g, div(sub(x, s.mean), denom)), ctx.param(name_ + "/beta"));
    Var ld = row_sum(sub(log(sqrt(square(g))), log(denom)));
    return {y, repeat_rows(ld, x.rows())};
}

// The inverse always reads the running averages: in a flow it is the
// sampling direction, where no data batch exists.
FlowResult BatchNormBijector::inverse(Context& ctx, Var y, std::optional<Var>) const {
    require_dim("batchnorm_bijector", y, dim_);
    if (ctx.params().at(name_ + "/updates")[0] == 0.0) {
        throw Error("batchnorm bijector '" + name_ + "': running statistics were never populated");
    }
    Var mu = ctx.param(name_ + "/running_mean");
    Var var = ctx.param(name_ + "/running_var");
    Var g = gamma(ctx);
    Var denom = sqrt(add(var, epsilon_));
    Var x = add(mul(div(sub(y, ctx.param(name_ + "/beta")), g), denom), mu);
    Var ld = -row_sum(sub(log(sqrt(square(g))), log(denom)));
    return {x, repeat_rows(ld, y.rows())};
}

// ---------------------------------------------------------------------------

Chain::Chain(std::vector<BijectorPtr> links) : links_(std::move(links)) {
    for (std::size_t i = 1; i < links_.size(); ++i) {
        if (links_[i]->dim() != links_[0]->dim()) {
            throw ShapeError("chain: link " + std::to_string(i) + " has dim " + std::to_string(links_[i]->dim()) +
                             ", expected " + std::to_string(links_[0]->dim()));
        }
    }
}

FlowResult Chain::forward(Context& ctx, Var x, std::optional<Var> cond) const {
    Var ld = zeros_col(ctx.graph(), x.rows());
    for (const auto& link : links_) {
        FlowResult r = link->forward(ctx, x, cond);
        x = r.value;
        ld = add(ld, r.log_det);
    }
    return {x, ld};
}

FlowResult Chain::inverse(Context& ctx, Var y, std::optional<Var> cond) const {
    Var ld = zeros_col(ctx.graph(), y.rows());
    for (auto it = links_.rbegin(); it != links_.rend(); ++it) {
        FlowResult r = (*it)->inverse(ctx, y, cond);
        y = r.value;
        ld = add(ld, r.log_det);
    }
    return {y, ld};
}

void Chain::init(ParameterStore& store, Rng& rng) const {
    for (const auto& link : links_) link->init(store, rng);
}

// ---------------------------------------------------------------------------

namespace {
void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 0.5)) throw Error("logit transform: alpha must lie in (0, 0.5), got " + std::to_string(alpha));
}
}  // namespace

LogitTransform logit_forward(const Tensor& v, double alpha) {
    check_alpha(alpha);
    LogitTransform out{Tensor(v.shape()), Tensor(v.shape())};
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double p = alpha + (1.0 - alpha) * v[i];
        out.value[i] = scalar::logit(p);
        out.log_det[i] = std::log1p(-alpha) - std::log(p) - std::log1p(-p);
    }
    return out;
}

LogitTransform logit_dequantize(const Tensor& pixels, double alpha, Rng& rng) {
    check_alpha(alpha);
    Tensor v(pixels.shape());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        if (pixels[i] < 0.0 || pixels[i] > 255.0) throw Error("logit_dequantize: pixel value out of [0,255]");
        v[i] = (pixels[i] + rng.uniform()) / 256.0;
    }
    return logit_forward(v, alpha);
}

Tensor logit_inverse(const Tensor& y, double alpha) {
    check_alpha(alpha);
    Tensor v(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) v[i] = (scalar::sigmoid(y[i]) - alpha) / (1.0 - alpha);
    return v;
}

}  // namespace sere
