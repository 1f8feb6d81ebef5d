#include "sere/maf.hpp"

namespace sere {

ResidualParamHead::ResidualParamHead(std::string name, std::size_t param_dim, std::size_t z_dim,
                                     const MlpSpec& hidden, std::size_t feature)
    : name_(std::move(name)),
      param_dim_(param_dim),
      z_dim_(z_dim),
      hidden_(name_ + "/hidden", param_dim, feature, hidden),
      residual_(name_ + "/residual", feature + z_dim, param_dim, hidden) {}

void ResidualParamHead::init(ParameterStore& store, Rng& rng) const {
    hidden_.init(store, rng);
    residual_.init(store, rng);
}

Var ResidualParamHead::residual(Context& ctx, Var prev, Var z) const {
    if (prev.cols() != param_dim_ || z.cols() != z_dim_) {
        throw ShapeError("residual head '" + name_ + "': got " + shape_str(prev.value().shape()) + " and " +
                         shape_str(z.value().shape()) + ", expected " + std::to_string(param_dim_) + " and " +
                         std::to_string(z_dim_) + " columns");
    }
    if (prev.rows() != z.rows()) {
        if (prev.rows() != 1) throw ShapeError("residual head '" + name_ + "': batch mismatch");
        prev = repeat_rows(prev, z.rows());
    }
    const Var parts[] = {hidden_.forward(ctx, prev), z};
    return residual_.forward(ctx, concat_cols(parts));
}

Var ResidualParamHead::update(Context& ctx, Var prev, Var z) const { return add(prev, residual(ctx, prev, z)); }

// ---------------------------------------------------------------------------

namespace {
constexpr const char* kBaseParts[3] = {"loc", "raw_diag", "perturb"};
}

ResidualBase::ResidualBase(std::string name, std::size_t dim, std::vector<std::size_t> code_dims,
                           const MafSpec& spec)
    : name_(std::move(name)), dim_(dim), code_dims_(std::move(code_dims)) {
    for (std::size_t l = 0; l < code_dims_.size(); ++l) {
        auto head = [&](const char* part) {
            return ResidualParamHead(name_ + "/level" + std::to_string(l + 1) + "/" + part, dim_, code_dims_[l],
                                     spec.base_hidden, spec.base_feature);
        };
        heads_.push_back({head(kBaseParts[0]), head(kBaseParts[1]), head(kBaseParts[2])});
    }
}

void ResidualBase::init(ParameterStore& store, Rng& rng) const {
    store.add(name_ + "/gamma0/loc", Tensor({1, dim_}));
    store.add(name_ + "/gamma0/raw_diag", Tensor({1, dim_}, raw_from_scale(1.0)));
    Tensor perturb = rng.normal_tensor(1, dim_);
    for (double& v : perturb.storage()) v *= 0.1;
    store.add(name_ + "/gamma0/perturb", std::move(perturb));
    for (const auto& level : heads_)
        for (const auto& h : level) h.init(store, rng);
}

std::size_t ResidualBase::parameter_count() const {
    std::size_t n = 3 * dim_;
    for (const auto& level : heads_)
        for (const auto& h : level) n += h.parameter_count();
    return n;
}

BaseParams ResidualBase::params(Context& ctx, std::span<const Var> codes, std::size_t rows) const {
    if (codes.size() != code_dims_.size()) {
        throw ShapeError("residual base '" + name_ + "': expected " + std::to_string(code_dims_.size()) +
                         " conditioning codes, got " + std::to_string(codes.size()));
    }
    if (!codes.empty()) rows = codes.front().rows();
    std::array<Var, 3> gamma;
    for (std::size_t p = 0; p < 3; ++p) {
        gamma[p] = repeat_rows(ctx.param(name_ + "/gamma0/" + kBaseParts[p]), rows);
        for (std::size_t l = 0; l < codes.size(); ++l) gamma[p] = heads_[l][p].update(ctx, gamma[p], codes[l]);
    }
    return {gamma[0], gamma[1], gamma[2]};
}

// ---------------------------------------------------------------------------

MafStack::MafStack(std::string name, std::size_t dim, std::size_t context_dim, const MafSpec& spec)
    : name_(std::move(name)), dim_(dim), context_dim_(context_dim) {
    if (spec.ordering != "alternate" && spec.ordering != "random") {
        throw Error("maf: ordering must be 'alternate' or 'random', got '" + spec.ordering + "'");
    }
    std::vector<BijectorPtr> links;
    std::size_t index = 0;
    for (std::size_t t = 0; t < spec.flows; ++t) {
        if (t > 0 && spec.batch_norm) {
            auto bn = std::make_shared<BatchNormBijector>(name_ + "/bn" + std::to_string(t), dim_, spec.bn_momentum);
            links.push_back(std::make_shared<InverseBijector>(bn));
        }
        for (std::size_t k = 0; k < spec.mades_per_flow; ++k, ++index) {
            Ordering order = Ordering::random;
            if (spec.ordering == "alternate") order = index % 2 == 0 ? Ordering::natural : Ordering::reverse;
            MaskSet masks = build_masks(context_dim_, dim_, spec.made_hidden, order, spec.degrees, spec.seed + index);
            const std::string made_name = name_ + "/flow" + std::to_string(t + 1) + "/made" + std::to_string(k + 1);
            auto step = std::make_shared<MadeAffineStep>(MadeNet(made_name, std::move(masks), spec.made_activation));
            steps_.push_back(step);
            links.push_back(step);
        }
    }
    chain_ = std::make_shared<Chain>(std::move(links));
}

void MafStack::init(ParameterStore& store, Rng& rng) const { chain_->init(store, rng); }

std::size_t MafStack::parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : steps_) n += s->made().parameter_count();
    const std::size_t bn = chain_->links().size() - steps_.size();
    return n + bn * 2 * dim_;
}

FlowResult MafStack::forward(Context& ctx, Var u, std::optional<Var> context) const {
    if (chain_->links().empty()) return {u, ctx.constant(Tensor({u.rows(), 1}))};
    return chain_->forward(ctx, u, context);
}

FlowResult MafStack::inverse(Context& ctx, Var x, std::optional<Var> context) const {
    if (chain_->links().empty()) return {x, ctx.constant(Tensor({x.rows(), 1}))};
    return chain_->inverse(ctx, x, context);
}

Var MafStack::log_prob(Context& ctx, Var x, std::optional<Var> context, const BaseParams& base) const {
    if (x.cols() != dim_) {
        throw ShapeError("maf '" + name_ + "': data has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(dim_));
    }
    const FlowResult r = inverse(ctx, x, context);
    return add(gauss_rank1_log_prob(base.distribution(), r.value), r.log_det);
}

Var MafStack::sample(Context& ctx, std::optional<Var> context, const BaseParams& base, Rng& rng) const {
    Var u = gauss_rank1_sample(base.distribution(), rng);
    return forward(ctx, u, context).value;
}

}  // namespace sere
