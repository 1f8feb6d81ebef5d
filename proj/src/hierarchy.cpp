#include "sere/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sere {

Wiring wiring_from_string(const std::string& s) {
    if (s == "self_reflective" || s == "sere") return Wiring::self_reflective;
    if (s == "independent" || s == "dlgm") return Wiring::independent;
    throw Error("unknown wiring '" + s + "' (self_reflective | independent)");
}

VariationalStyle style_from_string(const std::string& s) {
    if (s == "concat") return VariationalStyle::concat;
    if (s == "residual") return VariationalStyle::residual;
    throw Error("unknown variational style '" + s + "' (concat | residual)");
}

DecoderKind decoder_from_string(const std::string& s) {
    if (s == "bernoulli") return DecoderKind::bernoulli;
    if (s == "maf") return DecoderKind::maf;
    throw Error("unknown decoder '" + s + "' (bernoulli | maf)");
}

PriorStyle prior_from_string(const std::string& s) {
    if (s == "conditioned") return PriorStyle::conditioned;
    if (s == "standard_normal") return PriorStyle::standard_normal;
    throw Error("unknown prior style '" + s + "' (conditioned | standard_normal)");
}

std::string to_string(Wiring w) { return w == Wiring::self_reflective ? "self_reflective" : "independent"; }
std::string to_string(VariationalStyle s) { return s == VariationalStyle::concat ? "concat" : "residual"; }
std::string to_string(DecoderKind d) { return d == DecoderKind::bernoulli ? "bernoulli" : "maf"; }
std::string to_string(PriorStyle p) { return p == PriorStyle::conditioned ? "conditioned" : "standard_normal"; }

std::size_t HierarchySpec::total_latent() const {
    std::size_t n = 0;
    for (auto d : latent_dims) n += d;
    return n;
}

std::size_t HierarchySpec::residual_feature_for(std::size_t l) const {
    if (residual_feature > 0) return residual_feature;
    return std::max<std::size_t>(1, latent_dims[l] / 3);
}

void HierarchySpec::validate() const {
    if (latent_dims.empty()) throw Error("hierarchy: at least one latent layer is required");
    if (data_dim == 0) throw Error("hierarchy: data_dim must be at least 1");
    for (auto d : latent_dims)
        if (d == 0) throw Error("hierarchy: latent dims must be at least 1");
    if (evidence_feature == 0 || latent_feature == 0) throw Error("hierarchy: feature sizes must be at least 1");
}

// ---------------------------------------------------------------------------

Hierarchy::Hierarchy(HierarchySpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const std::size_t L = spec_.layers();
    for (std::size_t l = 0; l < L; ++l) {
        const std::string n = layer_name(l);
        const std::size_t D = spec_.latent_dims[l];
        Layer layer;
        layer.evidence = Mlp(n + "/evidence", spec_.data_dim, spec_.evidence_feature, spec_.evidence);
        std::size_t post_in = spec_.evidence_feature;
        if (conditioned(l)) {
            const std::size_t prev = spec_.latent_dims[l - 1];
            layer.latent_encoder = Mlp(n + "/latent_enc", prev, spec_.latent_feature, spec_.latent_encoder);
            if (spec_.batch_norm) layer.bn = BatchNormLayer{n + "/bn", prev, spec_.bn_momentum};
            if (spec_.prior == PriorStyle::conditioned) {
                layer.prior_loc = Mlp(n + "/prior/loc", prev, D, spec_.prior_net);
                layer.prior_scale = Mlp(n + "/prior/scale", prev, D, spec_.prior_net);
            }
            if (spec_.style == VariationalStyle::concat) {
                post_in = spec_.latent_feature + spec_.evidence_feature;
            } else {
                post_in = spec_.latent_feature;
                const std::size_t F = spec_.residual_feature_for(l);
                layer.loc_hidden = Mlp(n + "/posterior/loc/hidden", D, F, spec_.posterior);
                layer.scale_hidden = Mlp(n + "/posterior/scale/hidden", D, F, spec_.posterior);
                layer.loc_residual = Mlp(n + "/posterior/loc/residual", F + spec_.evidence_feature, D, spec_.posterior);
                layer.scale_residual =
                    Mlp(n + "/posterior/scale/residual", F + spec_.evidence_feature, D, spec_.posterior);
            }
        }
        layer.loc = Mlp(n + "/posterior/loc", post_in, D, spec_.posterior);
        layer.scale = Mlp(n + "/posterior/scale", post_in, D, spec_.posterior);
        layers_.push_back(std::move(layer));

        const bool learned = !conditioned(l);
        const std::size_t cond_dim = learned ? D : spec_.latent_dims[l - 1];
        bijectors_.push_back(
            std::make_shared<ConditionedAffineBijector>(n + "/bijector", D, cond_dim, spec_.bijector, learned));
    }

    if (spec_.decoder == DecoderKind::bernoulli) {
        decoder_mlp_ = Mlp("decoder/logits", spec_.total_latent(), spec_.data_dim, spec_.decoder_net);
    } else {
        decoder_base_ = ResidualBase("decoder/base", spec_.data_dim, spec_.latent_dims, spec_.maf);
        decoder_maf_ = MafStack("decoder/maf", spec_.data_dim, spec_.total_latent(), spec_.maf);
    }
}

void Hierarchy::init(ParameterStore& store, Rng& rng) const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& layer = layers_[l];
        const std::string n = layer_name(l);
        const std::size_t D = spec_.latent_dims[l];
        layer.evidence.init(store, rng);
        if (layer.latent_encoder) layer.latent_encoder->init(store, rng);
        if (layer.bn) layer.bn->init(store);
        layer.loc.init(store, rng);
        layer.scale.init(store, rng);
        for (const auto* m : {&layer.loc_hidden, &layer.scale_hidden, &layer.loc_residual, &layer.scale_residual})
            if (*m) (*m)->init(store, rng);
        if (layer.prior_loc) {
            layer.prior_loc->init(store, rng);
            layer.prior_scale->init(store, rng);
        } else if (spec_.prior == PriorStyle::conditioned) {
            store.add(n + "/prior/loc", Tensor({1, D}));
            store.add(n + "/prior/raw_scale", Tensor({1, D}, raw_from_scale(1.0)));
        }
        bijectors_[l]->init(store, rng);
    }
    if (decoder_mlp_) decoder_mlp_->init(store, rng);
    if (decoder_base_) decoder_base_->init(store, rng);
    if (decoder_maf_) decoder_maf_->init(store, rng);
}

std::size_t Hierarchy::parameter_count() const {
    ParameterStore store;
    Rng rng(1);
    init(store, rng);
    return store.trainable_size();
}

std::optional<Var> Hierarchy::layer_input(Context& ctx, std::size_t l, std::optional<Var> z_prev) const {
    if (!conditioned(l)) return std::nullopt;
    if (!z_prev) throw Error(layer_name(l) + ": conditioning code z^{l-1} is missing");
    if (layers_[l].bn) return layers_[l].bn->forward(ctx, *z_prev);
    return z_prev;
}

GaussianDiag Hierarchy::prior(Context& ctx, std::size_t l, std::optional<Var> cond, std::size_t rows) const {
    const std::size_t D = spec_.latent_dims[l];
    if (spec_.prior == PriorStyle::standard_normal) {
        return {ctx.constant(Tensor({rows, D})), ctx.constant(Tensor({rows, D}, 1.0))};
    }
    const Layer& layer = layers_[l];
    if (layer.prior_loc) {
        if (!cond) throw Error(layer_name(l) + ": conditioned prior needs its input");
        return GaussianDiag::from_raw(layer.prior_loc->forward(ctx, *cond), layer.prior_scale->forward(ctx, *cond));
    }
    const std::string n = layer_name(l);
    return GaussianDiag::from_raw(repeat_rows(ctx.param(n + "/prior/loc"), rows),
                                  repeat_rows(ctx.param(n + "/prior/raw_scale"), rows));
}

Var Hierarchy::evidence(Context& ctx, std::size_t l, Var x) const { return layers_[l].evidence.forward(ctx, x); }

GaussianDiag Hierarchy::posterior(Context& ctx, std::size_t l, std::optional<Var> cond, Var x) const {
    if (x.cols() != spec_.data_dim) {
        throw ShapeError("hierarchy: data has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(spec_.data_dim));
    }
    const Layer& layer = layers_[l];
    Var e = evidence(ctx, l, x);
    if (!conditioned(l)) return GaussianDiag::from_raw(layer.loc.forward(ctx, e), layer.scale.forward(ctx, e));
    if (!cond) throw Error(layer_name(l) + ": posterior needs the conditioning code");
    Var h = layer.latent_encoder->forward(ctx, *cond);
    if (spec_.style == VariationalStyle::concat) {
        const Var parts[] = {h, e};
        Var in = concat_cols(parts);
        return GaussianDiag::from_raw(layer.loc.forward(ctx, in), layer.scale.forward(ctx, in));
    }
    auto rectify = [&](const Mlp& first_net, const Mlp& hidden, const Mlp& residual) {
        Var first = first_net.forward(ctx, h);
        const Var parts[] = {hidden.forward(ctx, first), e};
        return add(first, residual.forward(ctx, concat_cols(parts)));
    };
    return GaussianDiag::from_raw(rectify(layer.loc, *layer.loc_hidden, *layer.loc_residual),
                                  rectify(layer.scale, *layer.scale_hidden, *layer.scale_residual));
}

FlowResult Hierarchy::transform(Context& ctx, std::size_t l, Var eps, std::optional<Var> cond) const {
    return bijectors_[l]->forward(ctx, eps, cond);
}

Var Hierarchy::decoder_log_prob(Context& ctx, std::span<const Var> z, Var x) const {
    if (z.size() != spec_.layers()) throw ShapeError("decoder: expected one code per layer");
    Var codes = concat_cols(z);
    if (decoder_mlp_) return bernoulli_log_prob(decoder_mlp_->forward(ctx, codes), x);
    const BaseParams base = decoder_base_->params(ctx, z, x.rows());
    return decoder_maf_->log_prob(ctx, x, codes, base);
}

std::vector<LayerState> Hierarchy::infer(Context& ctx, Var x, const std::vector<Tensor>* noise) const {
    if (noise && noise->size() != spec_.layers()) throw ShapeError("infer: one noise tensor per layer expected");
    std::vector<LayerState> states;
    std::optional<Var> z_prev;
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
        std::optional<Var> cond = layer_input(ctx, l, z_prev);
        LayerState s;
        s.posterior = posterior(ctx, l, cond, x);
        s.prior = prior(ctx, l, cond, x.rows());
        s.noise = noise ? (*noise)[l] : ctx.rng().normal_tensor(x.rows(), spec_.latent_dims[l]);
        s.eps = gauss_diag_reparam(s.posterior, s.noise);
        s.z = transform(ctx, l, s.eps, cond).value;
        s.kl = kl_diag_diag(s.posterior, s.prior);
        s.log_q = gauss_diag_log_prob(s.posterior, s.eps);
        s.log_p = gauss_diag_log_prob(s.prior, s.eps);
        z_prev = s.z;
        states.push_back(std::move(s));
    }
    return states;
}

Generated Hierarchy::generate(Context& ctx, std::size_t count) const {
    Generated out;
    std::vector<Var> zs;
    std::optional<Var> z_prev;
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
        std::optional<Var> cond = layer_input(ctx, l, z_prev);
        const GaussianDiag p = prior(ctx, l, cond, count);
        Var eps = gauss_diag_sample(p, ctx.rng()).value;
        Var z = transform(ctx, l, eps, cond).value;
        zs.push_back(z);
        out.z.push_back(z.value());
        z_prev = z;
    }
    Var codes = concat_cols(zs);
    if (decoder_mlp_) {
        Var logits = decoder_mlp_->forward(ctx, codes);
        out.mean = sigmoid(logits).value();
        out.x = bernoulli_sample(logits.value(), ctx.rng());
    } else {
        const BaseParams base = decoder_base_->params(ctx, zs, count);
        out.x = decoder_maf_->sample(ctx, codes, base, ctx.rng()).value();
        out.mean = out.x;
    }
    return out;
}

ElboTerms Hierarchy::elbo(Context& ctx, Var x, double beta, std::size_t n_mc) const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error("elbo: beta must lie in [0,1], got " + std::to_string(beta));
    if (n_mc < 1) throw Error("elbo: n_mc must be at least 1");
    if (n_mc > 1) x = repeat_rows(x, n_mc);
    const auto states = infer(ctx, x);
    std::vector<Var> zs;
    for (const auto& s : states) zs.push_back(s.z);
    ElboTerms t;
    t.recon = decoder_log_prob(ctx, zs, x);
    Var kl_total = ctx.constant(Tensor({x.rows(), 1}));
    for (const auto& s : states) {
        t.kls.push_back(s.kl);
        kl_total = add(kl_total, s.kl);
    }
    t.elbo = sub(t.recon, kl_total);
    t.objective = mean(sub(t.recon, mul(kl_total, beta)));
    return t;
}

Var Hierarchy::log_weights(Context& ctx, Var x, const std::vector<Tensor>* noise) const {
    const auto states = infer(ctx, x, noise);
    std::vector<Var> zs;
    Var lw = ctx.constant(Tensor({x.rows(), 1}));
    for (const auto& s : states) {
        zs.push_back(s.z);
        lw = add(lw, sub(s.log_p, s.log_q));
    }
    return add(lw, decoder_log_prob(ctx, zs, x));
}

Var Hierarchy::joint_log_prob(Context& ctx, const std::vector<Var>& eps, Var x) const {
    if (eps.size() != spec_.layers()) throw ShapeError("joint_log_prob: one ε per layer expected");
    std::vector<Var> zs;
    std::optional<Var> z_prev;
    Var total = ctx.constant(Tensor({x.rows(), 1}));
    for (std::size_t l = 0; l < spec_.layers(); ++l) {
        if (eps[l].cols() != spec_.latent_dims[l]) throw ShapeError("joint_log_prob: ε dimension mismatch");
        std::optional<Var> cond = layer_input(ctx, l, z_prev);
        total = add(total, gauss_diag_log_prob(prior(ctx, l, cond, x.rows()), eps[l]));
        z_prev = transform(ctx, l, eps[l], cond).value;
        zs.push_back(*z_prev);
    }
    return add(total, decoder_log_prob(ctx, zs, x));
}

// ---------------------------------------------------------------------------

namespace {

Tensor replicate_rows(const Tensor& x, std::size_t begin, std::size_t count, std::size_t times) {
    const std::size_t cols = x.cols();
    Tensor out({count * times, cols});
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t t = 0; t < times; ++t)
            std::copy_n(x.data().begin() + (begin + i) * cols, cols, out.storage().begin() + (i * times + t) * cols);
    return out;
}

double log_mean_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s / static_cast<double>(v.size()));
}

}  // namespace

std::vector<double> iwae_bound_rows(const Hierarchy& model, ParameterStore& params, const Tensor& x, std::size_t k,
                                    Rng& rng, std::size_t chunk) {
    if (k < 1) throw Error("iwae_bound: K must be at least 1");
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t n = x.rows();
    const std::size_t per = std::min(k, chunk);
    const std::size_t group = std::max<std::size_t>(1, chunk / k);
    std::vector<double> out(n);
    std::vector<std::vector<double>> lw;
    for (std::size_t begin = 0; begin < n; begin += group) {
        const std::size_t count = std::min(group, n - begin);
        lw.assign(count, {});
        for (std::size_t done = 0; done < k; done += per) {
            const std::size_t times = std::min(per, k - done);
            Graph g(false);
            Context ctx(g, params, Mode::eval, rng);
            Var w = model.log_weights(ctx, ctx.constant(replicate_rows(x, begin, count, times)));
            for (std::size_t i = 0; i < count; ++i)
                for (std::size_t t = 0; t < times; ++t) lw[i].push_back(w.value()[i * times + t]);
        }
        for (std::size_t i = 0; i < count; ++i) out[begin + i] = log_mean_exp(lw[i]);
    }
    return out;
}

double iwae_bound(const Hierarchy& model, ParameterStore& params, const Tensor& x, std::size_t k, Rng& rng) {
    const auto rows = iwae_bound_rows(model, params, x, k, rng);
    double s = 0.0;
    for (double v : rows) s += v;
    return s / static_cast<double>(rows.size());
}

EvalReport evaluate(const Hierarchy& model, ParameterStore& params, const Tensor& x, std::size_t k, Rng& rng,
                    std::size_t batch) {
    const std::size_t n = x.rows();
    if (n == 0) throw Error("evaluate: empty data set");
    EvalReport r;
    r.kls.assign(model.spec().layers(), 0.0);
    batch = std::max<std::size_t>(batch, 1);
    for (std::size_t begin = 0; begin < n; begin += batch) {
        const std::size_t count = std::min(batch, n - begin);
        Graph g(false);
        Context ctx(g, params, Mode::eval, rng);
        const ElboTerms t = model.elbo(ctx, ctx.constant(x.row_slice(begin, count)), 1.0);
        for (std::size_t i = 0; i < count; ++i) {
            r.elbo += t.elbo.value()[i];
            r.recon += t.recon.value()[i];
            for (std::size_t l = 0; l < r.kls.size(); ++l) r.kls[l] += t.kls[l].value()[i];
        }
    }
    const double dn = static_cast<double>(n);
    r.elbo /= dn;
    r.recon /= dn;
    for (auto& v : r.kls) v /= dn;
    if (k > 0) {
        const auto rows = iwae_bound_rows(model, params, x, k, rng);
        double s = 0.0, s2 = 0.0;
        for (double v : rows) {
            s += v;
            s2 += v * v;
        }
        r.iwae = s / dn;
        const double var = n > 1 ? std::max(0.0, (s2 - dn * r.iwae * r.iwae) / (dn - 1.0)) : 0.0;
        r.iwae_se = std::sqrt(var / dn);
        r.iw_samples = k;
    }
    return r;
}

HierarchySpec match_budget(HierarchySpec spec, std::size_t budget) {
    spec.wiring = Wiring::independent;
    auto count = [&](std::size_t feature) {
        HierarchySpec s = spec;
        s.evidence_feature = feature;
        return Hierarchy(s).parameter_count();
    };
    std::size_t lo = spec.evidence_feature;
    if (count(lo) >= budget) return spec;
    std::size_t hi = lo * 2;
    while (count(hi) < budget) {
        lo = hi;
        hi *= 2;
        if (hi > (1u << 20)) throw Error("match_budget: budget unreachable by widening evidence features");
    }
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        (count(mid) >= budget ? hi : lo) = mid;
    }
    spec.evidence_feature = hi;
    return spec;
}

}  // namespace sere
