#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sere/autodiff.hpp"
#include "sere/rng.hpp"
#include "sere/tensor.hpp"

namespace sere {

// Named learnable tensors plus non-learnable buffers (batch-norm running
// statistics). Iteration order is the lexicographic order of names.
class ParameterStore {
public:
    struct Entry {
        Tensor value;
        bool trainable = true;
        bool regularized = true;
    };

    void add(const std::string& name, Tensor value, bool trainable = true, bool regularized = true);
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    Entry& entry(const std::string& name);
    const Entry& entry(const std::string& name) const;

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    // Number of learnable scalars.
    std::size_t trainable_size() const;
    // FNV-1a over names and bytes of trainable values.
    std::uint64_t checksum() const;

private:
    std::map<std::string, Entry> entries_;
};

enum class Mode { train, eval };

// Everything a forward pass needs: the tape, the parameters (bound to
// leaves on first use, so a tensor used by several sub-networks is a single
// leaf), the mode and the noise stream.
class Context {
public:
    Context(Graph& graph, ParameterStore& params, Mode mode, Rng& rng)
        : graph_(graph), params_(params), mode_(mode), rng_(rng) {}

    Graph& graph() { return graph_; }
    ParameterStore& params() { return params_; }
    Mode mode() const { return mode_; }
    Rng& rng() { return rng_; }
    bool training() const { return mode_ == Mode::train; }

    Var param(const std::string& name);
    Var constant(Tensor t) { return graph_.constant(std::move(t)); }

    // Gradients of every bound trainable parameter after graph().backward().
    std::map<std::string, Tensor> gradients() const;

    // Whether train-mode batch norms write their running averages.
    bool update_running_stats = true;

private:
    Graph& graph_;
    ParameterStore& params_;
    Mode mode_;
    Rng& rng_;
    std::map<std::string, Var> bound_;
};

// Glorot-normal weights, zero biases.
Tensor glorot_normal(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct DenseLayer {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;
    Activation activation = Activation::identity;

    void init(ParameterStore& store, Rng& rng) const;
    // activation(x W + b); with a mask, W is replaced by W ⊙ mask.
    Var forward(Context& ctx, Var x, const Tensor* mask = nullptr) const;
    std::size_t parameter_count() const { return in * out + out; }
};

struct MlpSpec {
    std::vector<std::size_t> hidden;
    Activation activation = Activation::relu;
    Activation output_activation = Activation::identity;
    double dropout = 0.0;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(std::string name, std::size_t in, std::size_t out, MlpSpec spec);

    void init(ParameterStore& store, Rng& rng) const;
    Var forward(Context& ctx, Var x) const;

    const std::vector<DenseLayer>& layers() const { return layers_; }
    std::size_t parameter_count() const;
    std::size_t in() const { return in_; }
    std::size_t out() const { return out_; }

private:
    std::string name_;
    std::size_t in_ = 0, out_ = 0;
    MlpSpec spec_;
    std::vector<DenseLayer> layers_;
};

struct BatchNormLayer {
    std::string name;
    std::size_t dim = 0;
    double momentum = 0.99;
    double epsilon = 1e-3;

    void init(ParameterStore& store) const;
    // Train: batch statistics (batch >= 2) and running-average update.
    // Eval: running statistics.
    Var forward(Context& ctx, Var x) const;
};

// Inverted dropout. Identity in eval mode or when p == 0.
Var dropout_forward(Var x, double p, Mode mode, Rng& rng);

}  // namespace sere
