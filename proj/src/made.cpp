#include "sere/made.hpp"

#include <algorithm>
#include <numeric>

namespace sere {

Ordering ordering_from_string(const std::string& s) {
    if (s == "natural") return Ordering::natural;
    if (s == "reverse") return Ordering::reverse;
    if (s == "random") return Ordering::random;
    throw Error("unknown MADE ordering '" + s + "'");
}

DegreeRule degree_rule_from_string(const std::string& s) {
    if (s == "equal") return DegreeRule::equal;
    if (s == "random") return DegreeRule::random;
    throw Error("unknown MADE degree rule '" + s + "'");
}

MaskSet build_masks(std::size_t cond_dim, std::size_t dim, const std::vector<std::size_t>& hidden_sizes,
                    Ordering ordering, DegreeRule rule, std::uint64_t seed) {
    if (dim < 1) throw Error("build_masks: modeled dimension must be at least 1");
    for (auto h : hidden_sizes)
        if (h < 1) throw Error("build_masks: hidden layer sizes must be at least 1");

    const int C = static_cast<int>(cond_dim);
    const int D = static_cast<int>(dim);
    Rng rng(seed);

    MaskSet masks;
    MadeDegrees& deg = masks.degrees;
    deg.cond_dim = cond_dim;
    deg.dim = dim;
    deg.input.resize(cond_dim + dim);
    std::iota(deg.input.begin(), deg.input.end(), 1);
    auto modeled = deg.input.begin() + C;
    switch (ordering) {
        case Ordering::natural: break;
        case Ordering::reverse: std::reverse(modeled, deg.input.end()); break;
        case Ordering::random:
            for (int i = D - 1; i > 0; --i) std::swap(modeled[i], modeled[static_cast<int>(rng.below(i + 1))]);
            break;
    }

    int low = C + 1;
    for (std::size_t layer = 0; layer < hidden_sizes.size(); ++layer) {
        const std::size_t H = hidden_sizes[layer];
        std::vector<int> m(H);
        if (D == 1) {
            std::fill(m.begin(), m.end(), C);
        } else if (rule == DegreeRule::equal) {
            for (std::size_t k = 0; k < H; ++k) {
                const auto num = static_cast<long long>(k + 1) * (D - 1);
                const auto den = static_cast<long long>(H + 1);
                m[k] = C + static_cast<int>((num + den - 1) / den);
            }
        } else {
            const int high = C + D - 1;
            for (auto& v : m) v = low + static_cast<int>(rng.below(static_cast<std::uint64_t>(high - low + 1)));
            low = *std::min_element(m.begin(), m.end());
        }
        deg.hidden.push_back(std::move(m));
    }

    const std::vector<int>* prev = &deg.input;
    for (const auto& m : deg.hidden) {
        Tensor mask({prev->size(), m.size()});
        for (std::size_t k = 0; k < prev->size(); ++k)
            for (std::size_t j = 0; j < m.size(); ++j) mask(k, j) = m[j] >= (*prev)[k] ? 1.0 : 0.0;
        masks.hidden.push_back(std::move(mask));
        prev = &m;
    }
    masks.output = Tensor({prev->size(), dim});
    for (std::size_t k = 0; k < prev->size(); ++k)
        for (std::size_t d = 0; d < dim; ++d) masks.output(k, d) = deg.output(d) > (*prev)[k] ? 1.0 : 0.0;
    return masks;
}

Tensor mask_connectivity(const MaskSet& masks) {
    auto product = [](const Tensor& a, const Tensor& b) {
        Tensor out({a.rows(), b.cols()});
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t k = 0; k < a.cols(); ++k)
                if (a(i, k) != 0.0)
                    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += a(i, k) * b(k, j);
        return out;
    };
    const std::size_t n_in = masks.degrees.input.size();
    Tensor acc = Tensor::identity(n_in);
    for (const auto& m : masks.hidden) acc = product(acc, m);
    Tensor out = product(acc, masks.output);
    for (std::size_t c = 0; c < masks.degrees.cond_dim; ++c)
        for (std::size_t d = 0; d < masks.degrees.dim; ++d) out(c, d) += 1.0;
    return out;
}

// ---------------------------------------------------------------------------

MadeNet::MadeNet(std::string name, MaskSet masks, Activation activation)
    : name_(std::move(name)), masks_(std::move(masks)), activation_(activation) {
    std::size_t prev = masks_.degrees.input.size();
    for (std::size_t i = 0; i < masks_.hidden.size(); ++i) {
        const std::size_t h = masks_.hidden[i].cols();
        hidden_.push_back({name_ + "/hidden" + std::to_string(i), prev, h, activation_});
        prev = h;
    }
    shift_out_ = {name_ + "/shift", prev, masks_.degrees.dim, Activation::identity};
    scale_out_ = {name_ + "/log_scale", prev, masks_.degrees.dim, Activation::identity};
}

void MadeNet::init(ParameterStore& store, Rng& rng) const {
    for (const auto& l : hidden_) l.init(store, rng);
    shift_out_.init(store, rng);
    scale_out_.init(store, rng);
    if (cond_dim() > 0) store.add(name_ + "/context/W", glorot_normal(cond_dim(), 2 * dim(), rng));
}

std::size_t MadeNet::parameter_count() const {
    std::size_t n = shift_out_.parameter_count() + scale_out_.parameter_count() + 2 * cond_dim() * dim();
    for (const auto& l : hidden_) n += l.parameter_count();
    return n;
}

MadeOutput MadeNet::forward(Context& ctx, std::optional<Var> cond, Var x) const {
    if (x.cols() != dim()) {
        throw ShapeError("made '" + name_ + "': input has " + std::to_string(x.cols()) + " columns, expected " +
                         std::to_string(dim()));
    }
    Var h = x;
    if (cond_dim() > 0) {
        if (!cond || cond->cols() != cond_dim()) {
            throw ShapeError("made '" + name_ + "': expected a conditioning input with " + std::to_string(cond_dim()) +
                             " columns");
        }
        const Var parts[] = {*cond, x};
        h = concat_cols(parts);
    }
    for (std::size_t i = 0; i < hidden_.size(); ++i) h = hidden_[i].forward(ctx, h, &masks_.hidden[i]);
    MadeOutput out{shift_out_.forward(ctx, h, &masks_.output), scale_out_.forward(ctx, h, &masks_.output)};
    if (cond_dim() > 0) {
        Var direct = matmul(*cond, ctx.param(name_ + "/context/W"));
        out.shift = add(out.shift, slice_cols(direct, 0, dim()));
        out.log_scale = add(out.log_scale, slice_cols(direct, dim(), dim()));
    }
    return out;
}

// ---------------------------------------------------------------------------

FlowResult MadeAffineStep::inverse(Context& ctx, Var y, std::optional<Var> cond) const {
    const MadeOutput out = made_.forward(ctx, cond, y);
    Var u = mul(sub(y, out.shift), exp(-out.log_scale));
    return {u, -row_sum(out.log_scale)};
}

FlowResult MadeAffineStep::forward(Context& ctx, Var u, std::optional<Var> cond) const {
    // After pass k every coordinate of degree rank <= k is final.
    Var y = ctx.constant(Tensor({u.rows(), u.cols()}));
    MadeOutput out{};
    for (std::size_t pass = 0; pass < dim(); ++pass) {
        out = made_.forward(ctx, cond, y);
        y = add(mul(u, exp(out.log_scale)), out.shift);
    }
    return {y, row_sum(out.log_scale)};
}

}  // namespace sere
