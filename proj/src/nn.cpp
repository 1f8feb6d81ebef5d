#include "sere/nn.hpp"

#include <cmath>
#include <cstring>

namespace sere {

void ParameterStore::add(const std::string& name, Tensor value, bool trainable, bool regularized) {
    if (entries_.count(name)) throw Error("parameter '" + name + "' registered twice");
    entries_.emplace(name, Entry{std::move(value), trainable, regularized});
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParameterStore::at(const std::string& name) { return entry(name).value; }
const Tensor& ParameterStore::at(const std::string& name) const { return entry(name).value; }

std::size_t ParameterStore::trainable_size() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_)
        if (e.trainable) n += e.value.size();
    return n;
}

std::uint64_t ParameterStore::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, e] : entries_) {
        if (!e.trainable) continue;
        mix(name.data(), name.size());
        mix(e.value.data().data(), e.value.size() * sizeof(double));
    }
    return h;
}

Var Context::param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& e = params_.entry(name);
    Var v = e.trainable ? graph_.leaf(e.value) : graph_.constant(e.value);
    bound_.emplace(name, v);
    return v;
}

std::map<std::string, Tensor> Context::gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, v] : bound_) {
        if (!params_.entry(name).trainable) continue;
        out.emplace(name, graph_.grad(v));
    }
    return out;
}

Tensor glorot_normal(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    Tensor w({fan_in, fan_out});
    for (auto& v : w.storage()) v = stddev * rng.normal();
    return w;
}

void DenseLayer::init(ParameterStore& store, Rng& rng) const {
    store.add(name + "/W", glorot_normal(in, out, rng));
    store.add(name + "/b", Tensor({1, out}));
}

Var DenseLayer::forward(Context& ctx, Var x, const Tensor* mask) const {
    if (x.cols() != in) {
        throw ShapeError("dense '" + name + "': input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(in));
    }
    Var w = ctx.param(name + "/W");
    if (mask) w = mul(w, ctx.constant(*mask));
    return activate(add(matmul(x, w), ctx.param(name + "/b")), activation);
}

Mlp::Mlp(std::string name, std::size_t in, std::size_t out, MlpSpec spec)
    : name_(std::move(name)), in_(in), out_(out), spec_(std::move(spec)) {
    std::size_t prev = in;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        layers_.push_back({name_ + "/dense" + std::to_string(i), prev, spec_.hidden[i], spec_.activation});
        prev = spec_.hidden[i];
    }
    layers_.push_back({name_ + "/out", prev, out, spec_.output_activation});
}

void Mlp::init(ParameterStore& store, Rng& rng) const {
    for (const auto& l : layers_) l.init(store, rng);
}

Var Mlp::forward(Context& ctx, Var x) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i].forward(ctx, x);
        if (i + 1 < layers_.size() && spec_.dropout > 0.0) x = dropout_forward(x, spec_.dropout, ctx.mode(), ctx.rng());
    }
    return x;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
}

void BatchNormLayer::init(ParameterStore& store) const {
    store.add(name + "/gamma", Tensor({1, dim}, 1.0), true, false);
    store.add(name + "/beta", Tensor({1, dim}), true, false);
    store.add(name + "/running_mean", Tensor({1, dim}), false, false);
    store.add(name + "/running_var", Tensor({1, dim}, 1.0), false, false);
}

Var BatchNormLayer::forward(Context& ctx, Var x) const {
    if (x.cols() != dim) throw ShapeError("batchnorm '" + name + "': expected " + std::to_string(dim) + " columns");
    Var gamma = ctx.param(name + "/gamma");
    Var beta = ctx.param(name + "/beta");
    if (ctx.training()) {
        if (x.rows() < 2) throw Error("batchnorm '" + name + "': train mode needs a batch of at least 2");
        Var mu = col_mean(x);
        Var centered = sub(x, mu);
        Var var = col_mean(square(centered));
        if (ctx.update_running_stats) {
            Tensor& rm = ctx.params().at(name + "/running_mean");
            Tensor& rv = ctx.params().at(name + "/running_var");
            for (std::size_t i = 0; i < dim; ++i) {
                rm[i] = momentum * rm[i] + (1.0 - momentum) * mu.value()[i];
                rv[i] = momentum * rv[i] + (1.0 - momentum) * var.value()[i];
            }
        }
        return add(mul(gamma, div(centered, sqrt(add(var, epsilon)))), beta);
    }
    Var mu = ctx.param(name + "/running_mean");
    Var var = ctx.param(name + "/running_var");
    return add(mul(gamma, div(sub(x, mu), sqrt(add(var, epsilon)))), beta);
}

Var dropout_forward(Var x, double p, Mode mode, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw Error("dropout probability must lie in [0,1), got " + std::to_string(p));
    if (mode == Mode::eval || p == 0.0) return x;
    Tensor mask({x.rows(), x.cols()});
    const double keep = 1.0 / (1.0 - p);
    for (auto& v : mask.storage()) v = rng.uniform() < p ? 0.0 : keep;
    return mul(x, x.graph->constant(std::move(mask)));
}

}  // namespace sere
