#include "sere/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace sere {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

namespace {

ConstMap as_matrix(const Tensor& t) {
    return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
    return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_rank2(const char* op, const Tensor& t) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_str(t.shape()));
}

Graph& graph_of(const char* op, Var a) {
    if (!a.graph) throw Error(std::string(op) + ": variable is not attached to a graph");
    return *a.graph;
}

Graph& graph_of(const char* op, Var a, Var b) {
    if (!a.graph || a.graph != b.graph) throw Error(std::string(op) + ": operands belong to different graphs");
    return *a.graph;
}

}  // namespace

namespace scalar {
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
double elu(double x) { return x > 0 ? x : std::expm1(x); }
double logit(double p) { return std::log(p) - std::log1p(-p); }
}  // namespace scalar

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::constant(Tensor value) {
    Node n;
    n.op = "const";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::leaf(Tensor value) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.requires_grad = track_;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Graph::record(std::string op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    if (track_) {
        for (const Var& v : inputs) {
            n.inputs.push_back(v.id);
            n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Tensor& Graph::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

Tensor Graph::grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

void Graph::backward(Var root) {
    if (root.graph != this) throw Error("backward: root belongs to another graph");
    if (nodes_[root.id].value.size() != 1) {
        throw ShapeError("backward: root must be scalar, got shape " + shape_str(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor();
    grad_slot(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
    }
}

Activation activation_from_string(const std::string& name) {
    if (name == "identity" || name == "linear" || name == "none") return Activation::identity;
    if (name == "relu") return Activation::relu;
    if (name == "tanh") return Activation::tanh;
    if (name == "elu") return Activation::elu;
    if (name == "softplus") return Activation::softplus;
    if (name == "sigmoid") return Activation::sigmoid;
    throw Error("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::elu: return "elu";
        case Activation::softplus: return "softplus";
        case Activation::sigmoid: return "sigmoid";
    }
    return "identity";
}

// ---------------------------------------------------------------------------
// broadcasting binary ops

namespace {

struct Broadcast {
    std::size_t rows, cols;
};

Broadcast broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
    require_rank2(op, a);
    require_rank2(op, b);
    auto dim = [&](std::size_t x, std::size_t y) {
        if (x == y || y == 1) return x;
        if (x == 1) return y;
        throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    };
    return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

inline double at(const Tensor& t, std::size_t r, std::size_t c) {
    return t.data()[(t.rows() == 1 ? 0 : r) * t.cols() + (t.cols() == 1 ? 0 : c)];
}

// Sums a full-shape gradient down onto a (possibly broadcast) input slot.
void accumulate_reduced(Tensor& slot, const Tensor& full) {
    const std::size_t R = full.rows(), C = full.cols();
    if (slot.rows() == R && slot.cols() == C) {
        for (std::size_t i = 0; i < full.size(); ++i) slot[i] += full[i];
        return;
    }
    const bool rr = slot.rows() == 1, rc = slot.cols() == 1;
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) slot((rr ? 0 : r), (rc ? 0 : c)) += full(r, c);
}

template <class F, class DA, class DB>
Var binary(const char* op, Var a, Var b, F f, DA dfa, DB dfb) {
    Graph& g = graph_of(op, a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const auto bs = broadcast_shape(op, av, bv);
    Tensor out({bs.rows, bs.cols});
    const bool same = av.rows() == bs.rows && av.cols() == bs.cols && bv.rows() == bs.rows && bv.cols() == bs.cols;
    if (same) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    } else {
        for (std::size_t r = 0; r < bs.rows; ++r)
            for (std::size_t c = 0; c < bs.cols; ++c) out(r, c) = f(at(av, r, c), at(bv, r, c));
    }
    const Var inputs[] = {a, b};
    return g.record(op, std::move(out), inputs, [dfa, dfb](Graph& gr, std::size_t self) {
        const auto ids = gr.inputs(self);
        const Tensor& up = gr.upstream(self);
        const Tensor& x = gr.value(Var{&gr, ids[0]});
        const Tensor& y = gr.value(Var{&gr, ids[1]});
        const std::size_t R = up.rows(), C = up.cols();
        for (int side = 0; side < 2; ++side) {
            if (!gr.needs_grad(ids[side])) continue;
            Tensor full({R, C});
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const double xv = at(x, r, c), yv = at(y, r, c);
                    full(r, c) = up(r, c) * (side == 0 ? dfa(xv, yv) : dfb(xv, yv));
                }
            accumulate_reduced(gr.grad_slot(ids[side]), full);
        }
    });
}

template <class F, class D>
Var unary(const char* op, Var a, F f, D df) {
    Graph& g = graph_of(op, a);
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    const Var inputs[] = {a};
    return g.record(op, std::move(out), inputs, [df](Graph& gr, std::size_t self) {
        const std::size_t in = gr.inputs(self)[0];
        const Tensor& up = gr.upstream(self);
        const Tensor& x = gr.value(Var{&gr, in});
        const Tensor& y = gr.value(Var{&gr, self});
        Tensor& slot = gr.grad_slot(in);
        for (std::size_t i = 0; i < up.size(); ++i) slot[i] += up[i] * df(x[i], y[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                  [](double, double) { return 1.0; });
}
Var sub(Var a, Var b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                  [](double, double) { return -1.0; });
}
Var mul(Var a, Var b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                  [](double x, double) { return x; });
}
Var div(Var a, Var b) {
    return binary("div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                  [](double x, double y) { return -x / (y * y); });
}
Var add(Var a, double c) {
    return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
Var mul(Var a, double c) {
    return unary("mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
Var operator-(Var a) {
    return unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var exp(Var a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Var log(Var a) {
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Var sqrt(Var a) {
    return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
Var square(Var a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
Var relu(Var a) {
    return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Var tanh(Var a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
Var elu(Var a) {
    return unary("elu", a, scalar::elu, [](double x, double) { return x > 0 ? 1.0 : std::exp(x); });
}
Var softplus(Var a) {
    return unary("softplus", a, scalar::softplus, [](double x, double) { return scalar::sigmoid(x); });
}
Var sigmoid(Var a) {
    return unary("sigmoid", a, scalar::sigmoid, [](double, double y) { return y * (1.0 - y); });
}
Var logit(Var a) {
    return unary("logit", a, scalar::logit, [](double p, double) { return 1.0 / (p * (1.0 - p)); });
}

Var activate(Var a, Activation act) {
    switch (act) {
        case Activation::identity: return a;
        case Activation::relu: return relu(a);
        case Activation::tanh: return tanh(a);
        case Activation::elu: return elu(a);
        case Activation::softplus: return softplus(a);
        case Activation::sigmoid: return sigmoid(a);
    }
    return a;
}

Var clamp_min(Var a, double floor) {
    return unary("clamp_min", a, [floor](double x) { return x < floor ? floor : x; },
                 [floor](double x, double) { return x < floor ? 0.0 : 1.0; });
}

Var stop_gradient(Var a) { return graph_of("stop_gradient", a).constant(a.value()); }

// ---------------------------------------------------------------------------
// structural ops

Var matmul(Var a, Var b) {
    Graph& g = graph_of("matmul", a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank2("matmul", av);
    require_rank2("matmul", bv);
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions differ for " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    Tensor out({av.rows(), bv.cols()});
    as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
    const Var inputs[] = {a, b};
    return g.record("matmul", std::move(out), inputs, [](Graph& gr, std::size_t self) {
        const auto ids = gr.inputs(self);
        const auto up = as_matrix(gr.upstream(self));
        if (gr.needs_grad(ids[0])) {
            as_matrix(gr.grad_slot(ids[0])).noalias() += up * as_matrix(gr.value(Var{&gr, ids[1]})).transpose();
        }
        if (gr.needs_grad(ids[1])) {
            as_matrix(gr.grad_slot(ids[1])).noalias() += as_matrix(gr.value(Var{&gr, ids[0]})).transpose() * up;
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    Graph& g = graph_of("concat_cols", parts[0]);
    const std::size_t R = parts[0].value().rows();
    std::size_t C = 0;
    for (const Var& p : parts) {
        graph_of("concat_cols", parts[0], p);
        require_rank2("concat_cols", p.value());
        if (p.value().rows() != R) {
            throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].value().shape()) + " vs " +
                             shape_str(p.value().shape()));
        }
        C += p.value().cols();
    }
    Tensor out({R, C});
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t r = 0; r < R; ++r)
            std::copy_n(&pv.data()[r * pv.cols()], pv.cols(), &out.data()[r * C + offset]);
        offset += pv.cols();
    }
    return g.record("concat_cols", std::move(out), parts, [](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        const std::size_t R = up.rows(), C = up.cols();
        std::size_t offset = 0;
        for (std::size_t id : gr.inputs(self)) {
            const std::size_t w = gr.value(Var{&gr, id}).cols();
            if (gr.needs_grad(id)) {
                Tensor& slot = gr.grad_slot(id);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < w; ++c) slot(r, c) += up.data()[r * C + offset + c];
            }
            offset += w;
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    Graph& g = graph_of("slice_cols", a);
    const Tensor& av = a.value();
    require_rank2("slice_cols", av);
    if (begin + count > av.cols()) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") exceeds shape " + shape_str(av.shape()));
    }
    Tensor out({av.rows(), count});
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
    const Var inputs[] = {a};
    return g.record("slice_cols", std::move(out), inputs, [begin, count](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        Tensor& slot = gr.grad_slot(gr.inputs(self)[0]);
        for (std::size_t r = 0; r < up.rows(); ++r)
            for (std::size_t c = 0; c < count; ++c) slot(r, begin + c) += up(r, c);
    });
}

Var repeat_rows(Var a, std::size_t times) {
    Graph& g = graph_of("repeat_rows", a);
    const Tensor& av = a.value();
    require_rank2("repeat_rows", av);
    const std::size_t R = av.rows(), C = av.cols();
    Tensor out({R * times, C});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < times; ++k)
            std::copy_n(&av.data()[r * C], C, &out.data()[(r * times + k) * C]);
    const Var inputs[] = {a};
    return g.record("repeat_rows", std::move(out), inputs, [times](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        Tensor& slot = gr.grad_slot(gr.inputs(self)[0]);
        const std::size_t C = up.cols();
        for (std::size_t r = 0; r < up.rows(); ++r)
            for (std::size_t c = 0; c < C; ++c) slot(r / times, c) += up(r, c);
    });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var a) {
    Graph& g = graph_of("sum", a);
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const Var inputs[] = {a};
    return g.record("sum", Tensor::scalar(s), inputs, [](Graph& gr, std::size_t self) {
        const double up = gr.upstream(self)[0];
        Tensor& slot = gr.grad_slot(gr.inputs(self)[0]);
        for (auto& v : slot.storage()) v += up;
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    return mul(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
    Graph& g = graph_of("row_sum", a);
    const Tensor& av = a.value();
    require_rank2("row_sum", av);
    Tensor out({av.rows(), 1});
    for (std::size_t r = 0; r < av.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < av.cols(); ++c) s += av(r, c);
        out(r, 0) = s;
    }
    const Var inputs[] = {a};
    return g.record("row_sum", std::move(out), inputs, [](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        Tensor& slot = gr.grad_slot(gr.inputs(self)[0]);
        for (std::size_t r = 0; r < slot.rows(); ++r)
            for (std::size_t c = 0; c < slot.cols(); ++c) slot(r, c) += up(r, 0);
    });
}

Var col_sum(Var a) {
    Graph& g = graph_of("col_sum", a);
    const Tensor& av = a.value();
    require_rank2("col_sum", av);
    Tensor out({1, av.cols()});
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) out(0, c) += av(r, c);
    const Var inputs[] = {a};
    return g.record("col_sum", std::move(out), inputs, [](Graph& gr, std::size_t self) {
        const Tensor& up = gr.upstream(self);
        Tensor& slot = gr.grad_slot(gr.inputs(self)[0]);
        for (std::size_t r = 0; r < slot.rows(); ++r)
            for (std::size_t c = 0; c < slot.cols(); ++c) slot(r, c) += up(0, c);
    });
}

Var col_mean(Var a) { return mul(col_sum(a), 1.0 / static_cast<double>(a.value().rows())); }

}  // namespace sere
