#include "sere/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "sere/io.hpp"

namespace sere {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::vector<std::size_t> dims_for(Rng& rng, std::size_t layers) {
    std::vector<std::size_t> d(layers);
    for (auto& v : d) v = 1 + rng.below(3);
    return d;
}

void factorization_suite(std::uint64_t seed, std::vector<VerifyCheck>& out) {
    Rng rng(seed);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const auto m = random_sere_model(rng, dims_for(rng, 3 + rep % 2), 1 + rng.below(3));
        worst = std::max(worst, verify_factorization(m));
    }
    out.push_back({"factorization residual, 50 self-reflective models", worst, 1e-8, true});
    double least = INFINITY;
    for (int rep = 0; rep < 20; ++rep) {
        const auto m = random_broken_model(rng, std::vector<std::size_t>(3 + rep % 2, 2), 2);
        least = std::min(least, verify_factorization(m, Conditioning::eps_prev));
    }
    out.push_back({"factorization residual, 20 broken models (min)", least, 1e-3, false});
}

void gradient_suite(std::uint64_t seed, std::vector<VerifyCheck>& out) {
    HierarchySpec s;
    s.data_dim = 4;
    s.latent_dims = {3, 3};
    s.evidence = MlpSpec{{8}, Activation::tanh};
    s.evidence_feature = 5;
    s.latent_encoder = MlpSpec{{8}, Activation::tanh};
    s.latent_feature = 4;
    s.posterior = MlpSpec{{8}, Activation::tanh};
    s.prior_net = MlpSpec{{8}, Activation::tanh};
    s.bijector = MlpSpec{{6}, Activation::tanh, Activation::tanh};
    s.decoder_net = MlpSpec{{10}, Activation::tanh};
    Hierarchy h(s);
    ParameterStore store;
    Rng rng(seed);
    h.init(store, rng);
    Tensor x({6, 4});
    for (auto& v : x.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const GradCheckResult r = grad_check(
        [&](Context& ctx) { return -h.elbo(ctx, ctx.constant(x), 0.7).objective; }, store, 1e-5, 0, 1e-4, seed);
    out.push_back({"ELBO gradient max rel. error (L=2, D=3, " + std::to_string(r.checked) + " entries)",
                   r.max_rel_error, 1e-4, true});
}

void bijector_suite(std::uint64_t seed, std::vector<VerifyCheck>& out) {
    Rng rng(seed);
    double trip = 0.0, det = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t D = 1 + rep % 8;
        Tensor shift = rng.normal_tensor(1, D), d = rng.uniform_tensor(1, D), u = rng.normal_tensor(1, D);
        for (auto& v : d.storage()) v = 0.2 + 2.0 * v;
        const Tensor eps = rng.normal_tensor(1, D);
        Graph g(false);
        const AffineParams p{g.constant(shift), g.constant(d), g.constant(u)};
        const FlowResult f = affine_forward(p, g.constant(eps));
        const FlowResult b = affine_inverse(p, f.value);
        for (std::size_t i = 0; i < D; ++i) trip = std::max(trip, std::abs(b.value.value()[i] - eps[i]));
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
        for (std::size_t i = 0; i < D; ++i)
            for (std::size_t j = 0; j < D; ++j)
                J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = u[i] * u[j] + (i == j ? d[i] : 0.0);
        const double want = std::log(std::abs(J.determinant()));
        det = std::max(det, std::abs(f.log_det.item() - want) / std::max(std::abs(want), 1.0));
    }
    out.push_back({"affine round-trip error, 1000 instances", trip, 1e-9, true});
    out.push_back({"affine log-det rel. error vs dense Jacobian, 1000 instances", det, 1e-8, true});
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream o(path);
    if (!o) throw Error("cannot write " + path.string());
    o << text;
}

void write_run_config(const fs::path& dir, const RunConfig& c) {
    write_text(dir / "config.json", config_json(c));
    write_text(dir / "provenance.json", json(c.provenance).dump(2) + "\n");
}

struct Loaded {
    RunConfig config;
    Checkpoint ckpt;
};

Loaded load_run(const std::string& ckpt_path) {
    if (!fs::exists(ckpt_path)) throw Error("checkpoint not found: " + ckpt_path);
    Loaded l{RunConfig{}, load_checkpoint(ckpt_path)};
    l.config = parse_config(l.ckpt.config, ckpt_path + " (embedded config)");
    apply_seed_override(l.config);
    return l;
}

int cmd_train(const std::string& config_path, const std::string& resume, const std::string& out_dir,
              std::ostream& out) {
    RunConfig c = load_config(config_path);
    apply_seed_override(c);
    if (!out_dir.empty()) {
        c.out_dir = out_dir;
        c.provenance["out_dir"] = "cli";
    }
    const fs::path dir(c.out_dir);
    fs::create_directories(dir);
    write_run_config(dir, c);
    const std::string resolved = config_json(c);

    const Dataset data = load_dataset(c);
    const Hierarchy model(c.model);
    TrainState state = resume.empty() ? init_train_state(model, c.training) : to_train_state(load_checkpoint(resume));
    for (const auto& [name, e] : state.params.entries())
        if (e.trainable && !e.value.all_finite()) throw NumericError("checkpoint holds non-finite '" + name + "'");

    const fs::path metrics = dir / "metrics.csv";
    std::vector<std::string> kept;
    if (!resume.empty() && fs::exists(metrics)) {
        for (const EpochMetrics& m : read_metrics(metrics.string()))
            if (m.epoch < state.epoch) kept.push_back(metrics_row(m));
    }
    {
        std::ofstream o(metrics);
        o << metrics_header(c.model.layers()) << "\n";
        for (const auto& r : kept) o << r << "\n";
    }
    out << "training " << model.parameter_count() << " parameters on " << data.train.rows() << " rows ("
        << data.valid.rows() << " validation), epochs " << state.epoch << ".." << c.training.epochs << "\n";

    const fs::path ckpt = dir / "checkpoint.bin";
    train(c.training, model, data, state, [&](const EpochMetrics& m, const TrainState& s) {
        {
            std::ofstream o(metrics, std::ios::app);
            o << metrics_row(m) << "\n";
        }
        out << "epoch " << m.epoch + 1 << " beta " << m.beta << " train " << m.train_objective << " valid "
            << m.valid_elbo << " (" << std::fixed << std::setprecision(1) << m.seconds << "s)\n"
            << std::defaultfloat << std::setprecision(6);
        if (s.epoch % c.checkpoint_every == 0 || s.epoch == c.training.epochs) save_checkpoint(ckpt.string(), s, resolved);
    });
    if (state.epoch == c.training.epochs && !fs::exists(ckpt)) save_checkpoint(ckpt.string(), state, resolved);
    out << "wrote " << metrics.string() << " and " << ckpt.string() << "\n";
    return exit_ok;
}

int cmd_eval(const std::string& ckpt_path, std::size_t k, std::size_t rows, const std::string& split,
             const std::string& out_dir, std::ostream& out) {
    Loaded l = load_run(ckpt_path);
    const Dataset data = load_dataset(l.config);
    Tensor x = split == "train" ? data.train : validation_data(l.config.training, data.valid);
    if (split == "train" && l.config.training.binarize) {
        Rng br(l.config.seed ^ 0x7a1bULL);
        x = dynamic_binarize(x, br);
    }
    if (rows > 0 && rows < x.rows()) {
        Tensor head({rows, x.cols()});
        std::copy_n(x.data().begin(), rows * x.cols(), head.storage().begin());
        x = std::move(head);
    }
    const Hierarchy model(l.config.model);
    Rng rng(l.config.seed ^ 0xe7a1ULL);
    const EvalReport r = evaluate(model, l.ckpt.params, x, k, rng);
    if (!std::isfinite(r.elbo) || (k > 0 && !std::isfinite(r.iwae)))
        throw NumericError("evaluation produced a non-finite bound");
    json summary = {{"checkpoint", ckpt_path}, {"epoch", l.ckpt.epoch}, {"split", split},
                    {"rows", x.rows()},        {"seed", l.config.seed}, {"elbo", r.elbo},
                    {"recon", r.recon},        {"kls", r.kls},          {"iw_samples", k},
                    {"iwae", r.iwae},          {"iwae_se", r.iwae_se}};
    out << summary.dump() << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "summary.json", summary.dump(2) + "\n");
        write_run_config(out_dir, l.config);
    }
    return exit_ok;
}

int cmd_sample(const std::string& ckpt_path, std::size_t count, const std::string& out_dir, bool binary,
               std::ostream& out) {
    Loaded l = load_run(ckpt_path);
    const Hierarchy model(l.config.model);
    Rng rng(l.config.seed ^ 0x5a3bULL);
    Graph g(false);
    Context ctx(g, l.ckpt.params, Mode::eval, rng);
    const Generated gen = model.generate(ctx, count);
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_run_config(dir, l.config);
    const auto [h, w] = image_shape(l.config);
    if (h == 0) {
        write_csv((dir / "samples.csv").string(), gen.x);
        out << "wrote " << count << " rows to " << (dir / "samples.csv").string() << "\n";
        return exit_ok;
    }
    const Tensor& img = binary ? gen.x : gen.mean;
    for (std::size_t i = 0; i < count; ++i) {
        std::ostringstream name;
        name << "sample_" << std::setw(4) << std::setfill('0') << i << ".pgm";
        write_pgm((dir / name.str()).string(), img, i, h, w);
    }
    out << "wrote " << count << " " << h << "x" << w << " images to " << dir.string() << "\n";
    return exit_ok;
}

int cmd_verify(const std::string& suite, std::uint64_t seed, std::ostream& out) {
    const auto checks = run_verify_suite(suite, seed);
    bool ok = true;
    for (const auto& c : checks) {
        out << (c.pass() ? "PASS " : "FAIL ") << c.name << ": " << std::scientific << std::setprecision(3)
            << c.value << (c.upper ? " <= " : " > ") << c.limit << std::defaultfloat << "\n";
        ok = ok && c.pass();
    }
    out << (ok ? "verify: all checks passed\n" : "verify: violations found\n");
    return ok ? exit_ok : exit_validation;
}

}  // namespace

std::vector<VerifyCheck> run_verify_suite(const std::string& suite, std::uint64_t seed) {
    std::vector<VerifyCheck> out;
    const bool all = suite == "all";
    if (!all && suite != "factorization" && suite != "gradients" && suite != "bijectors")
        throw Error("unknown verify suite '" + suite + "'");
    if (all || suite == "factorization") factorization_suite(seed, out);
    if (all || suite == "gradients") gradient_suite(seed, out);
    if (all || suite == "bijectors") bijector_suite(seed, out);
    return out;
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Self-reflective variational autoencoder", "sere"};
    app.require_subcommand(1);

    std::string config_path, resume, out_dir, ckpt, split = "valid", suite = "all", sample_dir;
    std::size_t k = 1000, rows = 0, count = 16;
    std::uint64_t verify_seed = 1;
    bool binary = false;

    auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
    train_cmd->add_option("--config", config_path, "config file")->required();
    train_cmd->add_option("--resume", resume, "checkpoint to continue from");
    train_cmd->add_option("--out", out_dir, "output directory (overrides out_dir)");

    auto* eval_cmd = app.add_subcommand("eval", "ELBO and importance-weighted bound of a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
    eval_cmd->add_option("--iw-samples", k, "importance samples K (0 skips the bound)");
    eval_cmd->add_option("--rows", rows, "evaluate only the first rows (0 = all)");
    eval_cmd->add_option("--split", split, "valid or train")->check(CLI::IsMember({"valid", "train"}));
    eval_cmd->add_option("--out", out_dir, "also write summary.json and config.json here");

    auto* sample_cmd = app.add_subcommand("sample", "draw from the generative model");
    sample_cmd->add_option("--ckpt", ckpt, "checkpoint")->required();
    sample_cmd->add_option("--count", count, "number of samples");
    sample_cmd->add_option("--out", sample_dir, "output directory")->required();
    sample_cmd->add_flag("--binary", binary, "write sampled pixels instead of Bernoulli means");

    auto* verify_cmd = app.add_subcommand("verify", "run the oracle suites");
    verify_cmd->add_option("--suite", suite, "all, factorization, gradients or bijectors")
        ->check(CLI::IsMember({"all", "factorization", "gradients", "bijectors"}));
    verify_cmd->add_option("--seed", verify_seed, "seed of the randomized instances");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (*train_cmd) return cmd_train(config_path, resume, out_dir, out);
        if (*eval_cmd) return cmd_eval(ckpt, k, rows, split, out_dir, out);
        if (*sample_cmd) return cmd_sample(ckpt, count, sample_dir, binary, out);
        return cmd_verify(suite, verify_seed, out);
    } catch (const NumericError& e) {
        err << "sere: numeric failure: " << e.what() << "\n";
        return exit_numeric;
    } catch (const std::exception& e) {
        err << "sere: " << e.what() << "\n";
        return exit_validation;
    }
}

}  // namespace sere
