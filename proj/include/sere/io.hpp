#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sere/hierarchy.hpp"
#include "sere/oracle.hpp"
#include "sere/training.hpp"

namespace sere {

enum class DataKind { idx, gaussian_mixture, checkerboard, linear_model };
DataKind data_kind_from_string(const std::string& s);
std::string to_string(DataKind k);

struct DataConfig {
    DataKind kind = DataKind::idx;
    std::string images;  // idx: image file, optionally gzip-compressed
    bool downscale = true;
    std::size_t train_count = 5000;  // idx: first train_count + valid_count images
    std::size_t valid_count = 1000;  // 0: 10% of the rows
    std::size_t n = 10000;           // synthetic kinds: rows generated
    std::uint64_t seed = 3;          // synthetic kinds
    std::vector<std::size_t> linear_dims{2, 2, 2};
    std::size_t linear_x_dim = 4;
};

struct RunConfig {
    HierarchySpec model;
    TrainConfig training;
    DataConfig data;
    std::uint64_t seed = 1;
    std::string out_dir = "run";
    std::size_t checkpoint_every = 10;  // epochs; the final epoch is always saved
    // Key path -> "config", "default", "derived" or "env".
    std::map<std::string, std::string> provenance;
};

// Config errors carry the offending key path or source line.
class ConfigError : public Error {
public:
    using Error::Error;
};

RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);
// Fully resolved document; parse_config(config_json(c)) reproduces c.
std::string config_json(const RunConfig& config);
// SERE_SEED, when set, replaces the seed of the run and of training.
void apply_seed_override(RunConfig& config);

std::size_t levenshtein(const std::string& a, const std::string& b);

struct IdxData {
    std::vector<std::size_t> dims;  // as stored
    Tensor values;  // images: [N, rows·cols] in [0,1]; labels: [N,1] raw
    std::size_t rows = 0, cols = 0;  // image side lengths after downscaling
};

// IDX images (magic 2051) or labels (2049); gzip input is detected. `limit`
// keeps the first rows (0 = all).
IdxData load_idx(const std::string& path, bool downscale = false, std::size_t limit = 0);
void save_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels, std::size_t count,
                     std::size_t rows, std::size_t cols, bool gzip);
// 2×2 average pooling of row-major images.
Tensor downscale2(const Tensor& images, std::size_t rows, std::size_t cols);

Tensor synth_dataset(DataKind kind, std::size_t n, std::uint64_t seed, const DataConfig& data = {});
LinearGaussianModel synth_linear_model(const DataConfig& data);
// Support squares of the checkerboard kind: cells of [−2,2]² with even
// ⌊x⌋ + ⌊y⌋.
bool in_checkerboard(double x, double y);

Dataset load_dataset(const RunConfig& config);
// Image side lengths of the dataset, or {0,0} for synthetic data.
std::pair<std::size_t, std::size_t> image_shape(const RunConfig& config);

struct Checkpoint {
    ParameterStore params;
    Adam adam;
    Rng::State rng{};
    std::size_t epoch = 0;
    std::string config;  // resolved JSON of the run
};

inline constexpr char checkpoint_magic[] = "SEREv1";

void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config);
Checkpoint load_checkpoint(const std::string& path);
TrainState to_train_state(Checkpoint ckpt);

std::string metrics_header(std::size_t layers);
std::string metrics_row(const EpochMetrics& m);
std::vector<EpochMetrics> read_metrics(const std::string& path);

void write_pgm(const std::string& path, const Tensor& images, std::size_t row, std::size_t rows, std::size_t cols);
void write_csv(const std::string& path, const Tensor& data);

}  // namespace sere
