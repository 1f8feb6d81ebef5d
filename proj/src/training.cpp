#include "sere/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

namespace sere {

WarmupKind warmup_kind_from_string(const std::string& s) {
    if (s == "geometric") return WarmupKind::geometric;
    if (s == "linear") return WarmupKind::linear;
    if (s == "hard_then_geometric") return WarmupKind::hard_then_geometric;
    if (s == "none") return WarmupKind::none;
    throw Error("unknown warm-up kind '" + s + "' (geometric | linear | hard_then_geometric | none)");
}

std::string to_string(WarmupKind k) {
    switch (k) {
        case WarmupKind::geometric: return "geometric";
        case WarmupKind::linear: return "linear";
        case WarmupKind::hard_then_geometric: return "hard_then_geometric";
        case WarmupKind::none: return "none";
    }
    return "?";
}

double WarmupSchedule::geometric_beta(std::size_t levels, std::size_t epoch) {
    if (levels == 0) return 1.0;
    const std::size_t e = epoch + 1;
    std::size_t n = 0;
    while ((std::size_t{2} << n) <= e) ++n;  // n = floor(log2(epoch + 1))
    if (n >= levels) return 1.0;
    if (n == 0) return 0.0;
    return std::pow(10.0, static_cast<double>(n) / static_cast<double>(levels) - 1.0);
}

double warmup_beta(const WarmupSchedule& s, std::size_t epoch) {
    switch (s.kind) {
        case WarmupKind::geometric: return WarmupSchedule::geometric_beta(s.levels, epoch);
        case WarmupKind::linear:
            if (s.linear_epochs == 0) return 1.0;
            return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(s.linear_epochs));
        case WarmupKind::hard_then_geometric:
            if (epoch < s.hard_epochs) return 0.0;
            return WarmupSchedule::geometric_beta(s.levels, epoch - s.hard_epochs);
        case WarmupKind::none: return 1.0;
    }
    return 1.0;
}

Var free_bits_objective(Var recon, std::span<const Var> kls, double lambda, double beta) {
    if (!(lambda >= 0.0)) throw Error("free bits: lambda must be nonnegative");
    Var loss = -recon;
    for (Var kl : kls) {
        Var term = lambda > 0.0 ? clamp_min(kl, lambda) : kl;
        loss = add(loss, mul(term, beta));
    }
    return loss;
}

LrKind lr_kind_from_string(const std::string& s) {
    if (s == "constant") return LrKind::constant;
    if (s == "cosine") return LrKind::cosine;
    throw Error("unknown learning-rate schedule '" + s + "' (constant | cosine)");
}

std::string to_string(LrKind k) { return k == LrKind::constant ? "constant" : "cosine"; }

double LearningRate::at(std::size_t epoch) const {
    if (kind == LrKind::constant || epoch >= period) return base;
    const double t = static_cast<double>(epoch) / static_cast<double>(period);
    return std::max(0.0, base * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

void Adam::step(ParameterStore& params, const std::map<std::string, Tensor>& grads, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (const auto& [name, g] : grads) {
        auto& e = params.entry(name);
        if (!e.trainable) continue;
        Tensor& p = e.value;
        if (g.shape() != p.shape()) {
            throw ShapeError("adam: gradient of '" + name + "' has shape " + shape_str(g.shape()) + ", parameter " +
                             shape_str(p.shape()));
        }
        auto [mit, fresh_m] = m_.try_emplace(name, Tensor(p.shape()));
        auto [vit, fresh_v] = v_.try_emplace(name, Tensor(p.shape()));
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        const double l2 = e.regularized ? config_.l2 : 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i] + l2 * p[i];
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
        }
    }
}

Tensor dynamic_binarize(const Tensor& gray, Rng& rng) {
    Tensor out(gray.shape());
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const double p = gray[i];
        if (!(p >= 0.0 && p <= 1.0)) throw Error("dynamic_binarize: pixel value " + std::to_string(p) + " outside [0,1]");
        out[i] = rng.uniform() < p ? 1.0 : 0.0;
    }
    return out;
}

void TrainConfig::validate() const {
    if (batch_size < 2) throw Error("batch_size must be at least 2 (batch normalization needs batch statistics)");
    if (!(lr.base >= 0.0)) throw Error("learning_rate must be nonnegative");
    if (lr.kind == LrKind::cosine && lr.period == 0) throw Error("cosine learning rate needs a positive period");
    if (!(adam.l2 >= 0.0)) throw Error("l2 must be nonnegative");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw Error("adam betas must lie in [0,1)");
    if (!(adam.epsilon > 0.0)) throw Error("adam epsilon must be positive");
    if (!(free_bits >= 0.0)) throw Error("free_bits must be nonnegative");
    if (n_mc < 1) throw Error("n_mc must be at least 1");
}

Dataset split_dataset(const Tensor& data, std::size_t valid_count, std::uint64_t seed) {
    const std::size_t n = data.rows();
    if (valid_count == 0) valid_count = std::max<std::size_t>(1, n / 10);
    if (valid_count >= n) throw Error("validation split leaves no training rows");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t cols = data.cols();
    auto gather = [&](std::size_t begin, std::size_t count) {
        Tensor t({count, cols});
        for (std::size_t i = 0; i < count; ++i)
            std::copy_n(data.data().begin() + order[begin + i] * cols, cols, t.storage().begin() + i * cols);
        return t;
    };
    return {gather(0, n - valid_count), gather(n - valid_count, valid_count)};
}

TrainState init_train_state(const Hierarchy& model, const TrainConfig& config) {
    TrainState s{ParameterStore{}, Adam(config.adam), Rng(config.seed), 0};
    Rng init_rng = s.rng.split(0x1a17);
    model.init(s.params, init_rng);
    return s;
}

namespace {

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
    const std::size_t cols = x.cols();
    Tensor out({idx.size(), cols});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.data().begin() + idx[i] * cols, cols, out.storage().begin() + i * cols);
    return out;
}

void check_finite(const ElboTerms& t, const Var& loss, std::size_t epoch) {
    if (std::isfinite(loss.item())) return;
    std::string term = "loss";
    if (!t.recon.value().all_finite()) {
        term = "reconstruction log-likelihood";
    } else {
        for (std::size_t l = 0; l < t.kls.size(); ++l) {
            if (!t.kls[l].value().all_finite()) {
                term = "KL of layer " + std::to_string(l + 1);
                break;
            }
        }
    }
    throw NumericError("non-finite " + term + " at epoch " + std::to_string(epoch));
}

}  // namespace

Tensor validation_data(const TrainConfig& config, const Tensor& valid) {
    if (!config.binarize || valid.rows() == 0) return valid;
    Rng vr(config.seed ^ 0xbadc0ffeeULL);
    return dynamic_binarize(valid, vr);
}

void train(const TrainConfig& config, const Hierarchy& model, const Dataset& data, TrainState& state,
           const EpochCallback& on_epoch) {
    config.validate();
    const std::size_t n = data.train.rows();
    if (n < 2) throw Error("train: need at least 2 training rows");
    if (data.train.cols() != model.spec().data_dim) throw ShapeError("train: data width does not match the model");

    const Tensor valid = validation_data(config, data.valid);

    std::vector<std::size_t> order(n);
    while (state.epoch < config.epochs) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t epoch = state.epoch;
        EpochMetrics m;
        m.epoch = epoch;
        m.beta = warmup_beta(config.warmup, epoch);
        m.lr = config.lr.at(epoch);

        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), state.rng);
        const Tensor epoch_data = config.binarize ? dynamic_binarize(data.train, state.rng) : data.train;

        double obj_sum = 0.0, elbo_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - begin);
            if (count < 2) break;
            const Tensor xb = gather_rows(epoch_data, std::span(order).subspan(begin, count));
            Graph g;
            Context ctx(g, state.params, Mode::train, state.rng);
            const ElboTerms t = model.elbo(ctx, ctx.constant(xb), m.beta, config.n_mc);
            std::vector<Var> kls;
            for (const Var& kl : t.kls) kls.push_back(mean(kl));
            Var loss = free_bits_objective(mean(t.recon), kls, config.free_bits, m.beta);
            check_finite(t, loss, epoch);
            g.backward(loss);
            auto grads = ctx.gradients();
            for (const auto& [name, gt] : grads) {
                if (!gt.all_finite()) throw NumericError("non-finite gradient for '" + name + "' at epoch " + std::to_string(epoch));
            }
            state.adam.step(state.params, grads, m.lr);
            for (const auto& [name, e] : state.params.entries())
                if (e.trainable && !e.value.all_finite())
                    throw NumericError("parameter '" + name + "' became non-finite at epoch " + std::to_string(epoch));
            obj_sum += -loss.item() * static_cast<double>(count);
            elbo_sum += mean(t.elbo).item() * static_cast<double>(count);
            seen += count;
        }
        m.train_objective = obj_sum / static_cast<double>(seen);
        m.train_elbo = elbo_sum / static_cast<double>(seen);

        if (valid.rows() > 0) {
            Rng vr(config.seed + 0x5eed);
            const EvalReport r = evaluate(model, state.params, valid, 0, vr);
            m.valid_elbo = r.elbo;
            m.valid_recon = r.recon;
            m.valid_kls = r.kls;
            if (!std::isfinite(r.elbo)) throw NumericError("non-finite validation ELBO at epoch " + std::to_string(epoch));
        }
        m.checksum = state.params.checksum();
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ++state.epoch;
        if (on_epoch) on_epoch(m, state);
    }
}

}  // namespace sere
