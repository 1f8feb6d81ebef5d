#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sere/bijectors.hpp"
#include "sere/nn.hpp"

namespace sere {

enum class Ordering { natural, reverse, random };
enum class DegreeRule { equal, random };

Ordering ordering_from_string(const std::string& s);
DegreeRule degree_rule_from_string(const std::string& s);

// Degrees of a conditional MADE. Inputs 1..C are conditioning inputs with
// m(d) = d; inputs C+1..C+D carry a permutation of C+1..C+D. Hidden
// degrees lie in {C+1, …, C+D−1} (or equal C when D = 1, so the single
// output sees only the conditioning inputs).
struct MadeDegrees {
    std::size_t cond_dim = 0;
    std::size_t dim = 0;
    std::vector<int> input;               // length C + D
    std::vector<std::vector<int>> hidden;  // one vector per hidden layer

    // Degree of modeled coordinate d (0-based), i.e. input(C + d).
    int output(std::size_t d) const { return input[cond_dim + d]; }
};

// Masks are stored as [fan_in, fan_out] to multiply dense weights.
struct MaskSet {
    MadeDegrees degrees;
    std::vector<Tensor> hidden;  // input->h1, h1->h2, ...
    Tensor output;               // h_last -> D outputs (conditioning rows dropped)
};

MaskSet build_masks(std::size_t cond_dim, std::size_t dim, const std::vector<std::size_t>& hidden_sizes,
                    Ordering ordering, DegreeRule rule, std::uint64_t seed);

// Number of paths from each input (rows, C + D) to each output (cols, D),
// counting the unmasked direct connection from every conditioning input.
// Zero entries mean the output cannot depend on that input.
Tensor mask_connectivity(const MaskSet& masks);

struct MadeOutput {
    Var shift;
    Var log_scale;
};

// Masked network plus an unmasked linear map from the conditioning input
// straight to both outputs, so that the first coordinate in the ordering
// (which no hidden unit may feed) still depends on the context.
class MadeNet {
public:
    MadeNet(std::string name, MaskSet masks, Activation activation = Activation::relu);

    void init(ParameterStore& store, Rng& rng) const;
    // cond may be absent only when the MADE has no conditioning inputs.
    MadeOutput forward(Context& ctx, std::optional<Var> cond, Var x) const;

    const MaskSet& masks() const { return masks_; }
    std::size_t cond_dim() const { return masks_.degrees.cond_dim; }
    std::size_t dim() const { return masks_.degrees.dim; }
    std::size_t parameter_count() const;

private:
    std::string name_;
    MaskSet masks_;
    Activation activation_;
    std::vector<DenseLayer> hidden_;
    DenseLayer shift_out_, scale_out_;
};

// One MAF step: forward (sampling) y_d = u_d·exp(s_d) + μ_d, computed one
// degree at a time; inverse (density) u = (y − μ(y))·exp(−s(y)) in a
// single pass with log-det −Σ s.
class MadeAffineStep final : public Bijector {
public:
    explicit MadeAffineStep(MadeNet made) : made_(std::move(made)) {}
    FlowResult forward(Context& ctx, Var x, std::optional<Var> cond) const override;
    FlowResult inverse(Context& ctx, Var y, std::optional<Var> cond) const override;
    std::size_t dim() const override { return made_.dim(); }
    void init(ParameterStore& store, Rng& rng) const override { made_.init(store, rng); }
    const MadeNet& made() const { return made_; }

private:
    MadeNet made_;
};

}  // namespace sere
