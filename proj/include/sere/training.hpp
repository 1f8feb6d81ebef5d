#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sere/hierarchy.hpp"

namespace sere {

enum class WarmupKind { geometric, linear, hard_then_geometric, none };

WarmupKind warmup_kind_from_string(const std::string& s);
std::string to_string(WarmupKind k);

struct WarmupSchedule {
    WarmupKind kind = WarmupKind::geometric;
    std::size_t levels = 10;          // N, geometric kinds
    std::size_t linear_epochs = 256;  // linear kind
    std::size_t hard_epochs = 0;      // hard_then_geometric: β = 0 for this many epochs

    // Level n of the geometric schedule holds epochs [2^n − 1, 2^{n+1} − 1).
    static double geometric_beta(std::size_t levels, std::size_t epoch);
};

double warmup_beta(const WarmupSchedule& schedule, std::size_t epoch);

// −recon + β Σ_l max(λ, KL_l). `recon` and each KL are scalars (batch means).
Var free_bits_objective(Var recon, std::span<const Var> kls, double lambda, double beta);

enum class LrKind { constant, cosine };
LrKind lr_kind_from_string(const std::string& s);
std::string to_string(LrKind k);

// cosine: η₀·½(1 + cos(πt/T)) for t < T, then η₀.
struct LearningRate {
    LrKind kind = LrKind::constant;
    double base = 1e-3;
    std::size_t period = 0;

    double at(std::size_t epoch) const;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double l2 = 0.0;  // added to the gradient as l2·θ for regularized tensors
};

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // Descends along `grads` (gradients of a loss to be minimized).
    void step(ParameterStore& params, const std::map<std::string, Tensor>& grads, double lr);

    std::size_t steps() const { return steps_; }
    void set_steps(std::size_t s) { steps_ = s; }
    std::map<std::string, Tensor>& first() { return m_; }
    std::map<std::string, Tensor>& second() { return v_; }
    const std::map<std::string, Tensor>& first() const { return m_; }
    const std::map<std::string, Tensor>& second() const { return v_; }
    const AdamConfig& config() const { return config_; }

private:
    AdamConfig config_;
    std::size_t steps_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Each pixel becomes 1 with probability equal to its gray value.
Tensor dynamic_binarize(const Tensor& gray, Rng& rng);

struct TrainConfig {
    std::size_t batch_size = 256;
    std::size_t epochs = 4000;
    LearningRate lr;
    AdamConfig adam{0.9, 0.999, 1e-8, 1e-5};
    WarmupSchedule warmup;
    double free_bits = 0.0;
    std::size_t n_mc = 1;
    // Gray-scale data are re-binarized every epoch; validation once.
    bool binarize = true;
    std::uint64_t seed = 1;

    void validate() const;
};

struct Dataset {
    Tensor train;
    Tensor valid;
};

// Last `valid_count` rows (default 10%) of a seeded permutation become the
// validation split.
Dataset split_dataset(const Tensor& data, std::size_t valid_count, std::uint64_t seed);

struct EpochMetrics {
    std::size_t epoch = 0;
    double beta = 0.0;
    double lr = 0.0;
    double train_objective = 0.0;  // regularized ELBO (β, free bits), batch average
    double train_elbo = 0.0;
    double valid_elbo = 0.0;
    double valid_recon = 0.0;
    std::vector<double> valid_kls;
    double seconds = 0.0;
    std::uint64_t checksum = 0;
};

struct TrainState {
    ParameterStore params;
    Adam adam;
    Rng rng;
    std::size_t epoch = 0;  // epochs completed
};

TrainState init_train_state(const Hierarchy& model, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochMetrics&, const TrainState&)>;

// Validation rows as training scores them: binarized once per seed.
Tensor validation_data(const TrainConfig& config, const Tensor& valid);

// Runs epochs state.epoch .. config.epochs − 1.
void train(const TrainConfig& config, const Hierarchy& model, const Dataset& data, TrainState& state,
           const EpochCallback& on_epoch = {});

}  // namespace sere
