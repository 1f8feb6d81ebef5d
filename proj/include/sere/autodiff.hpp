#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sere/tensor.hpp"

namespace sere {

class Graph;

// Handle to a node recorded on a Graph. Cheap to copy; valid while the
// graph is alive.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double item() const { return value().item(); }
};

// Append-only tape of primitive operations. Node ids are assigned in
// creation order, so every node's inputs precede it and a reverse sweep
// over ids is a valid reverse topological order.
class Graph {
public:
    explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    // Differentiable input. On an untracked graph this is a constant.
    Var leaf(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    // Gradient of the last backward() root w.r.t. v; zeros if v did not
    // influence the root.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    const std::string& op_name(Var v) const { return nodes_[v.id].op; }

    // Reverse sweep from a scalar root. Each node's backward rule runs at
    // most once; gradients of earlier calls are cleared first.
    void backward(Var root);

    std::size_t size() const { return nodes_.size(); }
    bool tracking() const { return track_; }

    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    // Low-level hook for primitive implementations.
    Var record(std::string op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
    Tensor& grad_slot(std::size_t id);
    const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
    };

    bool track_;
    std::vector<Node> nodes_;
};

enum class Activation { identity, relu, tanh, elu, softplus, sigmoid };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Elementwise binary ops broadcast over rank-2 shapes where a dimension is
// equal or 1 on one side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add(Var a, double c);
Var mul(Var a, double c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double c) { return add(a, c); }
inline Var operator-(Var a, double c) { return add(a, -c); }
inline Var operator*(Var a, double c) { return mul(a, c); }
inline Var operator*(double c, Var a) { return mul(a, c); }
Var operator-(Var a);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
Var relu(Var a);
Var tanh(Var a);
Var elu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var logit(Var a);
Var activate(Var a, Activation act);

// max(a, floor) elementwise; gradient is zero where a < floor.
Var clamp_min(Var a, double floor);
Var stop_gradient(Var a);

Var matmul(Var a, Var b);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
// Each row repeated `times` times consecutively.
Var repeat_rows(Var a, std::size_t times);

Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);   // [n,m] -> [n,1]
Var col_sum(Var a);   // [n,m] -> [1,m]
Var col_mean(Var a);  // [n,m] -> [1,m]

// Scalar closed forms shared by the ops and their reference tests.
namespace scalar {
double softplus(double x);
double sigmoid(double x);
double elu(double x);
double logit(double p);
}  // namespace scalar

}  // namespace sere
