#include "sere/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sere {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// value = A w + c with w the model's standard-normal noise vector.
struct Affine {
    MatrixXd A;
    VectorXd c;
};

struct Elimination {
    std::vector<Affine> eps, z;
    Affine x;
    std::size_t noise_dim = 0;
};

MatrixXd scale_matrix(const LinearLayer& layer) {
    MatrixXd S = layer.u * layer.u.transpose();
    S.diagonal() += layer.d;
    return S;
}

Elimination eliminate(const LinearGaussianModel& model) {
    model.validate();
    const std::size_t L = model.layers.size();
    std::size_t N = model.x_dim();
    for (std::size_t l = 0; l < L; ++l) N += model.latent_dim(l);
    Elimination e;
    e.noise_dim = N;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < L; ++l) {
        const LinearLayer& layer = model.layers[l];
        const auto D = static_cast<Eigen::Index>(model.latent_dim(l));
        Affine eps{MatrixXd::Zero(D, static_cast<Eigen::Index>(N)), layer.m};
        if (l > 0) {
            eps.A += layer.M * e.z[l - 1].A;
            eps.c += layer.M * e.z[l - 1].c;
        }
        eps.A.block(0, static_cast<Eigen::Index>(offset), D, D) += layer.prior_var.cwiseSqrt().asDiagonal();
        const MatrixXd S = scale_matrix(layer);
        Affine z{S * eps.A, S * eps.c + layer.b};
        if (l > 0) {
            z.A += layer.B * e.z[l - 1].A;
            z.c += layer.B * e.z[l - 1].c;
        }
        e.eps.push_back(std::move(eps));
        e.z.push_back(std::move(z));
        offset += static_cast<std::size_t>(D);
    }
    const auto X = static_cast<Eigen::Index>(model.x_dim());
    e.x = {MatrixXd::Zero(X, static_cast<Eigen::Index>(N)), model.x_offset};
    for (std::size_t l = 0; l < L; ++l) {
        e.x.A += model.layers[l].C * e.z[l].A;
        e.x.c += model.layers[l].C * e.z[l].c;
    }
    Eigen::LLT<MatrixXd> chol(model.noise_cov());
    if (chol.info() != Eigen::Success) throw Error("linear model: observation noise covariance is not positive definite");
    e.x.A.block(0, static_cast<Eigen::Index>(offset), X, X) += MatrixXd(chol.matrixL());
    return e;
}

Affine stack(std::initializer_list<const Affine*> parts) {
    Eigen::Index rows = 0, cols = 0;
    for (const auto* p : parts) {
        rows += p->A.rows();
        cols = p->A.cols();
    }
    Affine out{MatrixXd(rows, cols), VectorXd(rows)};
    Eigen::Index r = 0;
    for (const auto* p : parts) {
        out.A.middleRows(r, p->A.rows()) = p->A;
        out.c.segment(r, p->c.size()) = p->c;
        r += p->A.rows();
    }
    return out;
}

Eigen::VectorXd uniform_vec(Rng& rng, std::size_t n, double lo, double hi) {
    VectorXd v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

Eigen::MatrixXd normal_mat(Rng& rng, std::size_t r, std::size_t c, double scale) {
    MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
    return m;
}

Eigen::VectorXd normal_vec(Rng& rng, std::size_t n, double scale) { return normal_mat(rng, n, 1, scale).col(0); }

LinearGaussianModel random_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim, double coupling,
                                 bool chained, bool observe_all) {
    if (dims.empty() || x_dim == 0) throw Error("random linear model: need at least one layer and one observed dim");
    LinearGaussianModel model;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        LinearLayer layer;
        const std::size_t D = dims[l];
        const std::size_t P = l > 0 ? dims[l - 1] : 0;
        layer.M = chained ? normal_mat(rng, D, P, coupling) : MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(P));
        layer.m = normal_vec(rng, D, 0.5);
        layer.prior_var = uniform_vec(rng, D, 0.5, 2.0);
        layer.d = uniform_vec(rng, D, 0.5, 2.0);
        layer.u = normal_vec(rng, D, 0.5);
        layer.B = chained ? normal_mat(rng, D, P, coupling) : MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(P));
        layer.b = normal_vec(rng, D, 0.5);
        const bool observed = observe_all || l + 1 == dims.size();
        layer.C = observed ? normal_mat(rng, x_dim, D, coupling)
                           : MatrixXd::Zero(static_cast<Eigen::Index>(x_dim), static_cast<Eigen::Index>(D));
        model.layers.push_back(std::move(layer));
    }
    model.x_offset = normal_vec(rng, x_dim, 1.0);
    model.r_diag = uniform_vec(rng, x_dim, 0.5, 1.5);
    model.r_perturb = normal_vec(rng, x_dim, 0.3);
    return model;
}

}  // namespace

std::vector<std::size_t> LinearGaussianModel::latent_dims() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < layers.size(); ++l) out.push_back(latent_dim(l));
    return out;
}

Eigen::MatrixXd LinearGaussianModel::noise_cov() const {
    MatrixXd R = r_perturb * r_perturb.transpose();
    R.diagonal() += r_diag;
    return R;
}

void LinearGaussianModel::validate() const {
    if (layers.empty()) throw Error("linear model: no layers");
    const auto X = x_offset.size();
    if (X == 0 || r_diag.size() != X || r_perturb.size() != X) throw Error("linear model: observation dims inconsistent");
    if ((r_diag.array() <= 0.0).any()) throw Error("linear model: noise diagonal must be positive");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const LinearLayer& y = layers[l];
        const auto D = y.d.size();
        const auto P = l > 0 ? layers[l - 1].d.size() : 0;
        const std::string at = "linear model layer " + std::to_string(l + 1) + ": ";
        if (D == 0) throw Error(at + "empty latent");
        if (y.m.size() != D || y.prior_var.size() != D || y.u.size() != D || y.b.size() != D)
            throw Error(at + "vector dims inconsistent");
        if (y.M.rows() != D || y.M.cols() != P || y.B.rows() != D || y.B.cols() != P)
            throw Error(at + "conditional maps have the wrong shape");
        if (y.C.rows() != X || y.C.cols() != D) throw Error(at + "observation map has the wrong shape");
        if ((y.d.array() <= 0.0).any()) throw Error(at + "bijector diagonal must be positive");
        if ((y.prior_var.array() <= 0.0).any()) throw Error(at + "prior variances must be positive");
    }
}

GaussianJoint build_joint(const LinearGaussianModel& model) {
    const Elimination e = eliminate(model);
    const Eigen::Index total = static_cast<Eigen::Index>(e.noise_dim);
    Affine all{MatrixXd(total, total), VectorXd(total)};
    GaussianJoint j;
    Eigen::Index r = 0;
    auto put = [&](const Affine& a) {
        j.block_offsets.push_back(static_cast<std::size_t>(r));
        all.A.middleRows(r, a.A.rows()) = a.A;
        all.c.segment(r, a.c.size()) = a.c;
        r += a.A.rows();
    };
    for (const auto& eps : e.eps) put(eps);
    put(e.x);
    j.mean = all.c;
    j.cov = all.A * all.A.transpose();
    return j;
}

double exact_log_marginal(const LinearGaussianModel& model, const Eigen::VectorXd& x) {
    const Elimination e = eliminate(model);
    if (x.size() != e.x.c.size()) throw ShapeError("exact_log_marginal: x has the wrong dimension");
    const MatrixXd cov = e.x.A * e.x.A.transpose();
    Eigen::LLT<MatrixXd> chol(cov);
    if (chol.info() != Eigen::Success) throw Error("exact_log_marginal: singular marginal covariance");
    const VectorXd r = x - e.x.c;
    const VectorXd s = chol.matrixL().solve(r);
    const double logdet = 2.0 * chol.matrixLLT().diagonal().array().log().sum();
    const double k = static_cast<double>(x.size());
    return -0.5 * (s.squaredNorm() + logdet + k * std::log(2.0 * std::numbers::pi));
}

Eigen::MatrixXd simulate(const LinearGaussianModel& model, std::size_t n, Rng& rng) {
    const Elimination e = eliminate(model);
    Affine all = e.eps.front();
    for (std::size_t l = 1; l < e.eps.size(); ++l) all = stack({&all, &e.eps[l]});
    all = stack({&all, &e.x});
    MatrixXd out(static_cast<Eigen::Index>(n), all.A.rows());
    VectorXd w(all.A.cols());
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : w) v = rng.normal();
        out.row(static_cast<Eigen::Index>(i)) = (all.A * w + all.c).transpose();
    }
    return out;
}

double verify_factorization(const LinearGaussianModel& model, Conditioning conditioning) {
    const std::size_t L = model.layers.size();
    if (L < 3) throw Error("verify_factorization: needs at least 3 layers");
    const Elimination e = eliminate(model);
    double worst = 0.0;
    for (std::size_t l = 2; l < L; ++l) {
        Affine older = e.eps[0];
        for (std::size_t k = 1; k + 1 < l; ++k) older = stack({&older, &e.eps[k]});
        const Affine& prev = conditioning == Conditioning::z_prev ? e.z[l - 1] : e.eps[l - 1];
        const Affine cond = stack({&prev, &e.x});
        const MatrixXd& T = e.eps[l].A;
        const MatrixXd& O = older.A;
        const MatrixXd& C = cond.A;
        Eigen::LLT<MatrixXd> chol(C * C.transpose());
        if (chol.info() != Eigen::Success) throw Error("verify_factorization: conditioning block is rank deficient");
        const MatrixXd residual = T * O.transpose() - (T * C.transpose()) * chol.solve(C * O.transpose());
        worst = std::max(worst, residual.cwiseAbs().maxCoeff());
    }
    return worst;
}

LinearGaussianModel random_sere_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim,
                                      double coupling) {
    return random_model(rng, dims, x_dim, coupling, true, false);
}

LinearGaussianModel random_broken_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim) {
    return random_model(rng, dims, x_dim, 0.7, false, true);
}

LinearGaussianModel random_all_observed_model(Rng& rng, const std::vector<std::size_t>& dims, std::size_t x_dim) {
    return random_model(rng, dims, x_dim, 0.7, true, true);
}

// ---------------------------------------------------------------------------

Tensor to_tensor(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) t(i, j) = m(i, j);
    return t;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
    MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
    return m;
}

namespace {
Tensor row_tensor(const Eigen::VectorXd& v) { return to_tensor(v.transpose()); }

Tensor raw_row(const Eigen::VectorXd& scales) {
    Tensor t({1, static_cast<std::size_t>(scales.size())});
    for (Eigen::Index i = 0; i < scales.size(); ++i) t[static_cast<std::size_t>(i)] = raw_from_scale(scales(i));
    return t;
}
}  // namespace

LinearMatch match_linear_model(const LinearGaussianModel& model, double inflate) {
    const Elimination e = eliminate(model);
    const std::size_t L = model.layers.size();
    const std::size_t X = model.x_dim();
    const MlpSpec linear{{}, Activation::identity, Activation::identity, 0.0};

    HierarchySpec spec;
    spec.data_dim = X;
    spec.latent_dims = model.latent_dims();
    spec.wiring = Wiring::self_reflective;
    spec.style = VariationalStyle::concat;
    spec.decoder = DecoderKind::maf;
    spec.prior = PriorStyle::conditioned;
    spec.batch_norm = false;
    spec.evidence = spec.latent_encoder = spec.posterior = spec.prior_net = spec.bijector = linear;
    spec.evidence_feature = X;
    spec.latent_feature = *std::max_element(spec.latent_dims.begin(), spec.latent_dims.end());
    spec.maf.flows = 0;
    spec.maf.base_hidden = linear;
    spec.maf.base_feature = 1;
    const std::size_t F = spec.latent_feature;

    LinearMatch out{spec, ParameterStore{}};
    Hierarchy h(spec);
    Rng rng(0);
    h.init(out.params, rng);
    for (auto& [name, entry] : out.params.entries())
        for (auto& v : entry.value.storage()) v = 0.0;
    auto set = [&](const std::string& name, Tensor t) {
        Tensor& dst = out.params.at(name);
        if (dst.shape() != t.shape()) {
            throw ShapeError("match_linear_model: '" + name + "' expects " + shape_str(dst.shape()) + ", got " +
                             shape_str(t.shape()));
        }
        dst = std::move(t);
    };

    const double floor = scale_floor() * 1.02;
    for (std::size_t l = 0; l < L; ++l) {
        const LinearLayer& y = model.layers[l];
        const std::string n = "layer" + std::to_string(l + 1);
        const auto D = static_cast<Eigen::Index>(model.latent_dim(l));

        set(n + "/evidence/out/W", to_tensor(MatrixXd::Identity(static_cast<Eigen::Index>(X), static_cast<Eigen::Index>(X))));

        // Exact conditional of ε^l given (z^{l−1}, x).
        const Affine cond = l > 0 ? stack({&e.z[l - 1], &e.x}) : e.x;
        const MatrixXd& A = e.eps[l].A;
        const MatrixXd scc = cond.A * cond.A.transpose();
        Eigen::LLT<MatrixXd> chol(scc);
        if (chol.info() != Eigen::Success) throw Error("match_linear_model: singular conditioning covariance");
        const MatrixXd K = chol.solve(cond.A * A.transpose()).transpose();
        const VectorXd bias = e.eps[l].c - K * cond.c;
        const MatrixXd cov = A * A.transpose() - K * (cond.A * A.transpose());
        VectorXd var = inflate * cov.diagonal();
        for (auto& v : var) v = std::max(v, floor);

        const auto Xi = static_cast<Eigen::Index>(X);
        if (l == 0) {
            set(n + "/posterior/loc/out/W", to_tensor(K.transpose()));
        } else {
            const auto P = static_cast<Eigen::Index>(model.latent_dim(l - 1));
            MatrixXd enc = MatrixXd::Zero(P, static_cast<Eigen::Index>(F));
            enc.leftCols(P) = MatrixXd::Identity(P, P);
            set(n + "/latent_enc/out/W", to_tensor(enc));
            MatrixXd W = MatrixXd::Zero(static_cast<Eigen::Index>(F) + Xi, D);
            W.topRows(P) = K.leftCols(P).transpose();
            W.bottomRows(Xi) = K.rightCols(Xi).transpose();
            set(n + "/posterior/loc/out/W", to_tensor(W));
        }
        set(n + "/posterior/loc/out/b", row_tensor(bias));
        set(n + "/posterior/scale/out/b", raw_row(var));

        if (l == 0) {
            set(n + "/prior/loc", row_tensor(y.m));
            set(n + "/prior/raw_scale", raw_row(y.prior_var));
        } else {
            set(n + "/prior/loc/out/W", to_tensor(y.M.transpose()));
            set(n + "/prior/loc/out/b", row_tensor(y.m));
            set(n + "/prior/scale/out/b", raw_row(y.prior_var));
            set(n + "/bijector/shift/out/W", to_tensor(y.B.transpose()));
        }
        set(n + "/bijector/shift/out/b", row_tensor(y.b));
        set(n + "/bijector/diag/out/b", raw_row(y.d));
        set(n + "/bijector/perturb/out/b", row_tensor(y.u));

        MatrixXd R = MatrixXd::Zero(1 + D, Xi);
        R.bottomRows(D) = y.C.transpose();
        set("decoder/base/level" + std::to_string(l + 1) + "/loc/residual/out/W", to_tensor(R));
    }
    set("decoder/base/gamma0/loc", row_tensor(model.x_offset));
    set("decoder/base/gamma0/raw_diag", raw_row(model.r_diag));
    set("decoder/base/gamma0/perturb", row_tensor(model.r_perturb));
    return out;
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Var(Context&)>& fn, ParameterStore& params, double h,
                           std::size_t max_per_tensor, double floor, std::uint64_t seed) {
    auto evaluate = [&]() {
        Graph g(false);
        Rng rng(seed);
        Context ctx(g, params, Mode::train, rng);
        ctx.update_running_stats = false;
        const double v = fn(ctx).item();
        if (!std::isfinite(v)) throw Error("grad_check: function value is not finite");
        return v;
    };

    std::map<std::string, Tensor> grads;
    {
        Graph g;
        Rng rng(seed);
        Context ctx(g, params, Mode::train, rng);
        ctx.update_running_stats = false;
        Var y = fn(ctx);
        g.backward(y);
        grads = ctx.gradients();
    }

    GradCheckResult result;
    for (auto& [name, entry] : params.entries()) {
        if (!entry.trainable) continue;
        Tensor& p = entry.value;
        const auto git = grads.find(name);
        const std::size_t count = max_per_tensor == 0 ? p.size() : std::min(p.size(), max_per_tensor);
        for (std::size_t k = 0; k < count; ++k) {
            const std::size_t i = max_per_tensor == 0 || p.size() <= max_per_tensor ? k : (k * p.size()) / count;
            const double saved = p[i];
            auto quotient = [&](double step) {
                p[i] = saved + step;
                const double up = evaluate();
                p[i] = saved - step;
                const double down = evaluate();
                p[i] = saved;
                return (up - down) / (2.0 * step);
            };
            const double fd1 = quotient(h);
            const double fd2 = quotient(h / 2.0);
            const double mid = evaluate();
            auto gap = [&](double step) {
                p[i] = saved + step;
                const double up = evaluate();
                p[i] = saved - step;
                const double down = evaluate();
                p[i] = saved;
                return (up - mid) / step - (mid - down) / step;
            };
            const double gap1 = gap(h);
            const double gap2 = gap(h / 2.0);
            const double ad = git == grads.end() ? 0.0 : git->second[i];
            const double scale = std::max({std::abs(fd1), std::abs(fd2), floor});
            // Smooth points halve the one-sided gap with the step, kinks keep it.
            const bool kink = std::abs(gap1) > 1e-3 * scale && std::abs(gap2) > 0.75 * std::abs(gap1);
            if (std::abs(fd1 - fd2) > 1e-3 * scale || kink) {
                ++result.skipped;
                continue;
            }
            const double rel = std::abs(ad - fd2) / std::max({std::abs(ad), std::abs(fd2), floor});
            ++result.checked;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return result;
}

}  // namespace sere
