#include "sere/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace sere {

using nlohmann::json;

DataKind data_kind_from_string(const std::string& s) {
    if (s == "idx") return DataKind::idx;
    if (s == "gaussian-mixture") return DataKind::gaussian_mixture;
    if (s == "checkerboard") return DataKind::checkerboard;
    if (s == "linear-model") return DataKind::linear_model;
    throw Error("unknown dataset kind '" + s + "' (idx, gaussian-mixture, checkerboard, linear-model)");
}

std::string to_string(DataKind k) {
    switch (k) {
        case DataKind::idx: return "idx";
        case DataKind::gaussian_mixture: return "gaussian-mixture";
        case DataKind::checkerboard: return "checkerboard";
        case DataKind::linear_model: return "linear-model";
    }
    return "?";
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// ---------------------------------------------------------------------------
// config

namespace {

class Reader {
public:
    Reader(const json& obj, std::string prefix, std::map<std::string, std::string>& prov)
        : obj_(obj), prefix_(std::move(prefix)), prov_(prov) {
        if (!obj_.is_object()) throw ConfigError(where() + "expected an object");
    }

    bool has(const std::string& key) const { return obj_.contains(key); }

    template <class T>
    bool get(const std::string& key, T& out) {
        known_.insert(key);
        const std::string path = prefix_ + key;
        auto it = obj_.find(key);
        if (it == obj_.end()) {
            prov_.emplace(path, "default");
            return false;
        }
        convert(*it, path, out);
        prov_[path] = "config";
        return true;
    }

    template <class E, class F>
    bool get_enum(const std::string& key, E& out, F parse) {
        std::string s;
        if (!get(key, s)) return false;
        try {
            out = parse(s);
        } catch (const Error& e) {
            throw ConfigError(prefix_ + key + ": " + e.what());
        }
        return true;
    }

    Reader sub(const std::string& key) {
        known_.insert(key);
        static const json empty = json::object();
        auto it = obj_.find(key);
        return Reader(it == obj_.end() ? empty : *it, prefix_ + key + ".", prov_);
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (known_.count(it.key())) continue;
            std::string best;
            std::size_t dist = std::string::npos;
            for (const auto& k : known_) {
                const std::size_t d = levenshtein(it.key(), k);
                if (d < dist) dist = d, best = k;
            }
            std::string msg = "unknown key \"" + prefix_ + it.key() + "\"";
            if (!best.empty()) msg += "; did you mean \"" + prefix_ + best + "\"?";
            throw ConfigError(msg);
        }
    }

private:
    std::string where() const { return prefix_.empty() ? "" : prefix_.substr(0, prefix_.size() - 1) + ": "; }

    static void convert(const json& v, const std::string& path, std::string& out) {
        if (!v.is_string()) throw ConfigError(path + ": expected a string");
        out = v.get<std::string>();
    }
    static void convert(const json& v, const std::string& path, bool& out) {
        if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
        out = v.get<bool>();
    }
    static void convert(const json& v, const std::string& path, double& out) {
        if (!v.is_number()) throw ConfigError(path + ": expected a number");
        out = v.get<double>();
        if (!std::isfinite(out)) throw ConfigError(path + ": expected a finite number");
    }
    template <class U>
        requires std::is_unsigned_v<U>
    static void convert(const json& v, const std::string& path, U& out) {
        if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a nonnegative integer");
        out = v.get<U>();
    }
    static void convert(const json& v, const std::string& path, std::vector<std::size_t>& out) {
        if (!v.is_array()) throw ConfigError(path + ": expected an array of nonnegative integers");
        out.clear();
        for (const auto& e : v) {
            std::size_t x = 0;
            convert(e, path, x);
            out.push_back(x);
        }
    }

    const json& obj_;
    std::string prefix_;
    std::map<std::string, std::string>& prov_;
    std::set<std::string> known_;
};

void read_mlp(Reader r, MlpSpec& m) {
    r.get("hidden", m.hidden);
    r.get_enum("activation", m.activation, activation_from_string);
    r.get_enum("output_activation", m.output_activation, activation_from_string);
    r.get("dropout", m.dropout);
    if (!(m.dropout >= 0.0 && m.dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
    r.finish();
}

json mlp_json(const MlpSpec& m) {
    return {{"hidden", m.hidden},
            {"activation", to_string(m.activation)},
            {"output_activation", to_string(m.output_activation)},
            {"dropout", m.dropout}};
}

std::string degree_rule_name(DegreeRule r) { return r == DegreeRule::equal ? "equal" : "random"; }

void derive(RunConfig& c, const std::string& path, bool given, auto& field, auto value) {
    if (given) return;
    field = value;
    c.provenance[path] = "derived";
}

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
        const std::size_t line = 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + upto, '\n'));
        const std::size_t nl = text.rfind('\n', upto == 0 ? 0 : upto - 1);
        const std::size_t col = nl == std::string::npos ? upto + 1 : upto - nl;
        std::string what = e.what();
        const auto colon = what.find("syntax error");
        throw ConfigError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": parse error: " +
                          (colon == std::string::npos ? what : what.substr(colon)));
    }

    RunConfig c;
    auto& prov = c.provenance;
    Reader top(doc, "", prov);
    top.get("seed", c.seed);
    top.get("out_dir", c.out_dir);
    top.get("checkpoint_every", c.checkpoint_every);

    DataConfig& d = c.data;
    {
        Reader r = top.sub("data");
        r.get_enum("kind", d.kind, data_kind_from_string);
        r.get("images", d.images);
        r.get("downscale", d.downscale);
        r.get("train_count", d.train_count);
        r.get("valid_count", d.valid_count);
        r.get("n", d.n);
        r.get("seed", d.seed);
        r.get("linear_dims", d.linear_dims);
        r.get("linear_x_dim", d.linear_x_dim);
        r.finish();
    }

    HierarchySpec& m = c.model;
    bool given_dim = false, given_decoder = false;
    {
        Reader r = top.sub("model");
        given_dim = r.get("data_dim", m.data_dim);
        r.get("latent_dims", m.latent_dims);
        r.get_enum("wiring", m.wiring, wiring_from_string);
        r.get_enum("style", m.style, style_from_string);
        given_decoder = r.get_enum("decoder", m.decoder, decoder_from_string);
        r.get_enum("prior", m.prior, prior_from_string);
        r.get("batch_norm", m.batch_norm);
        r.get("bn_momentum", m.bn_momentum);
        read_mlp(r.sub("evidence"), m.evidence);
        r.get("evidence_feature", m.evidence_feature);
        read_mlp(r.sub("latent_encoder"), m.latent_encoder);
        r.get("latent_feature", m.latent_feature);
        read_mlp(r.sub("posterior"), m.posterior);
        read_mlp(r.sub("prior_net"), m.prior_net);
        read_mlp(r.sub("bijector"), m.bijector);
        read_mlp(r.sub("decoder_net"), m.decoder_net);
        r.get("residual_feature", m.residual_feature);
        {
            Reader f = r.sub("maf");
            f.get("flows", m.maf.flows);
            f.get("mades_per_flow", m.maf.mades_per_flow);
            f.get("made_hidden", m.maf.made_hidden);
            f.get_enum("made_activation", m.maf.made_activation, activation_from_string);
            f.get("ordering", m.maf.ordering);
            f.get_enum("degrees", m.maf.degrees, degree_rule_from_string);
            f.get("batch_norm", m.maf.batch_norm);
            f.get("bn_momentum", m.maf.bn_momentum);
            read_mlp(f.sub("base_hidden"), m.maf.base_hidden);
            f.get("base_feature", m.maf.base_feature);
            f.get("seed", m.maf.seed);
            f.finish();
        }
        r.finish();
    }

    TrainConfig& t = c.training;
    bool given_binarize = false;
    {
        Reader r = top.sub("training");
        r.get("batch_size", t.batch_size);
        r.get("epochs", t.epochs);
        r.get("learning_rate", t.lr.base);
        r.get_enum("lr_schedule", t.lr.kind, lr_kind_from_string);
        r.get("lr_period", t.lr.period);
        r.get("l2", t.adam.l2);
        r.get("adam_beta1", t.adam.beta1);
        r.get("adam_beta2", t.adam.beta2);
        r.get("adam_epsilon", t.adam.epsilon);
        r.get_enum("warmup_schedule", t.warmup.kind, warmup_kind_from_string);
        r.get("warmup_levels", t.warmup.levels);
        r.get("warmup_linear_epochs", t.warmup.linear_epochs);
        r.get("warmup_hard_epochs", t.warmup.hard_epochs);
        r.get("free_bits", t.free_bits);
        r.get("n_mc", t.n_mc);
        given_binarize = r.get("binarize", t.binarize);
        r.finish();
    }
    top.finish();

    const bool images = d.kind == DataKind::idx;
    std::size_t dim = 2;
    if (images) dim = d.downscale ? 196 : 784;
    if (d.kind == DataKind::linear_model) dim = d.linear_x_dim;
    derive(c, "model.data_dim", given_dim, m.data_dim, dim);
    derive(c, "model.decoder", given_decoder, m.decoder, images ? DecoderKind::bernoulli : DecoderKind::maf);
    derive(c, "training.binarize", given_binarize, t.binarize, images);
    t.seed = c.seed;
    prov["training.seed"] = "derived";

    try {
        t.validate();
        m.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (m.maf.ordering != "alternate" && m.maf.ordering != "random")
        throw ConfigError("model.maf.ordering: expected alternate or random");
    if (!(m.bn_momentum >= 0.0 && m.bn_momentum < 1.0)) throw ConfigError("model.bn_momentum must lie in [0,1)");
    if (images && d.images.empty()) throw ConfigError("data.images is required for idx data");
    if (!images && m.decoder == DecoderKind::bernoulli)
        throw ConfigError("model.decoder: bernoulli needs binary image data");
    if (!images && t.binarize) throw ConfigError("training.binarize applies to image data only");
    if (!images && d.n < 2) throw ConfigError("data.n must be at least 2");
    if (d.kind == DataKind::linear_model && (d.linear_dims.empty() || d.linear_x_dim == 0))
        throw ConfigError("data.linear_dims and data.linear_x_dim must be nonempty");
    if (c.checkpoint_every == 0) throw ConfigError("checkpoint_every must be at least 1");
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

std::string config_json(const RunConfig& c) {
    const HierarchySpec& m = c.model;
    const TrainConfig& t = c.training;
    const DataConfig& d = c.data;
    json doc = {
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"checkpoint_every", c.checkpoint_every},
        {"data",
         {{"kind", to_string(d.kind)},
          {"images", d.images},
          {"downscale", d.downscale},
          {"train_count", d.train_count},
          {"valid_count", d.valid_count},
          {"n", d.n},
          {"seed", d.seed},
          {"linear_dims", d.linear_dims},
          {"linear_x_dim", d.linear_x_dim}}},
        {"model",
         {{"data_dim", m.data_dim},
          {"latent_dims", m.latent_dims},
          {"wiring", to_string(m.wiring)},
          {"style", to_string(m.style)},
          {"decoder", to_string(m.decoder)},
          {"prior", to_string(m.prior)},
          {"batch_norm", m.batch_norm},
          {"bn_momentum", m.bn_momentum},
          {"evidence", mlp_json(m.evidence)},
          {"evidence_feature", m.evidence_feature},
          {"latent_encoder", mlp_json(m.latent_encoder)},
          {"latent_feature", m.latent_feature},
          {"posterior", mlp_json(m.posterior)},
          {"prior_net", mlp_json(m.prior_net)},
          {"bijector", mlp_json(m.bijector)},
          {"decoder_net", mlp_json(m.decoder_net)},
          {"residual_feature", m.residual_feature},
          {"maf",
           {{"flows", m.maf.flows},
            {"mades_per_flow", m.maf.mades_per_flow},
            {"made_hidden", m.maf.made_hidden},
            {"made_activation", to_string(m.maf.made_activation)},
            {"ordering", m.maf.ordering},
            {"degrees", degree_rule_name(m.maf.degrees)},
            {"batch_norm", m.maf.batch_norm},
            {"bn_momentum", m.maf.bn_momentum},
            {"base_hidden", mlp_json(m.maf.base_hidden)},
            {"base_feature", m.maf.base_feature},
            {"seed", m.maf.seed}}}}},
        {"training",
         {{"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"learning_rate", t.lr.base},
          {"lr_schedule", to_string(t.lr.kind)},
          {"lr_period", t.lr.period},
          {"l2", t.adam.l2},
          {"adam_beta1", t.adam.beta1},
          {"adam_beta2", t.adam.beta2},
          {"adam_epsilon", t.adam.epsilon},
          {"warmup_schedule", to_string(t.warmup.kind)},
          {"warmup_levels", t.warmup.levels},
          {"warmup_linear_epochs", t.warmup.linear_epochs},
          {"warmup_hard_epochs", t.warmup.hard_epochs},
          {"free_bits", t.free_bits},
          {"n_mc", t.n_mc},
          {"binarize", t.binarize}}},
    };
    return doc.dump(2) + "\n";
}

void apply_seed_override(RunConfig& config) {
    const char* env = std::getenv("SERE_SEED");
    if (env == nullptr || *env == '\0') return;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ConfigError(std::string("SERE_SEED is not an unsigned integer: ") + env);
    config.seed = v;
    config.training.seed = v;
    config.provenance["seed"] = "env";
    config.provenance["training.seed"] = "env";
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::string read_all_gz(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw Error("cannot open " + path);
    std::string out;
    char buf[1 << 16];
    for (;;) {
        const int n = gzread(f, buf, sizeof buf);
        if (n < 0) {
            int code = 0;
            const std::string msg = gzerror(f, &code);
            gzclose(f);
            throw Error(path + ": " + msg);
        }
        if (n == 0) break;
        out.append(buf, static_cast<std::size_t>(n));
    }
    gzclose(f);
    return out;
}

std::uint32_t be32(const std::string& b, std::size_t at) {
    return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
           (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

}  // namespace

Tensor downscale2(const Tensor& images, std::size_t rows, std::size_t cols) {
    if (rows % 2 != 0 || cols % 2 != 0) throw Error("downscale needs even image sides");
    if (images.cols() != rows * cols) throw Error("downscale: image size does not match the row width");
    const std::size_t r2 = rows / 2, c2 = cols / 2;
    Tensor out({images.rows(), r2 * c2});
    for (std::size_t n = 0; n < images.rows(); ++n)
        for (std::size_t i = 0; i < r2; ++i)
            for (std::size_t j = 0; j < c2; ++j) {
                const std::size_t a = (2 * i) * cols + 2 * j, b = a + cols;
                out(n, i * c2 + j) = 0.25 * (images(n, a) + images(n, a + 1) + images(n, b) + images(n, b + 1));
            }
    return out;
}

IdxData load_idx(const std::string& path, bool downscale, std::size_t limit) {
    const std::string raw = read_all_gz(path);
    if (raw.size() < 4) throw Error(path + ": truncated header");
    const std::uint32_t magic = be32(raw, 0);
    if (magic != 2051 && magic != 2049)
        throw Error(path + ": bad magic " + std::to_string(magic) + " (expected 2051 or 2049)");
    const std::size_t rank = magic & 0xff;
    if (raw.size() < 4 + 4 * rank) throw Error(path + ": truncated header");
    IdxData out;
    std::size_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        out.dims.push_back(be32(raw, 4 + 4 * i));
        count *= out.dims.back();
    }
    const std::size_t offset = 4 + 4 * rank;
    if (raw.size() - offset < count)
        throw Error(path + ": truncated payload (" + std::to_string(raw.size() - offset) + " of " +
                    std::to_string(count) + " bytes)");
    const std::size_t n = out.dims[0];
    const std::size_t keep = limit == 0 ? n : std::min(limit, n);
    const std::size_t width = n == 0 ? 0 : count / n;
    const bool images = magic == 2051;
    out.values = Tensor({keep, width});
    for (std::size_t i = 0; i < keep * width; ++i) {
        const double v = std::uint8_t(raw[offset + i]);
        out.values.storage()[i] = images ? v / 255.0 : v;
    }
    if (images) {
        out.rows = out.dims[1];
        out.cols = out.dims[2];
        if (downscale) {
            out.values = downscale2(out.values, out.rows, out.cols);
            out.rows /= 2;
            out.cols /= 2;
        }
    }
    return out;
}

void save_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels, std::size_t count,
                     std::size_t rows, std::size_t cols, bool gzip) {
    if (pixels.size() != count * rows * cols) throw Error("save_idx_images: pixel count mismatch");
    std::string buf;
    auto put = [&](std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) buf.push_back(static_cast<char>((v >> s) & 0xff));
    };
    put(2051);
    put(static_cast<std::uint32_t>(count));
    put(static_cast<std::uint32_t>(rows));
    put(static_cast<std::uint32_t>(cols));
    buf.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    if (gzip) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (f == nullptr) throw Error("cannot write " + path);
        const int n = gzwrite(f, buf.data(), static_cast<unsigned>(buf.size()));
        gzclose(f);
        if (n != static_cast<int>(buf.size())) throw Error("short write to " + path);
    } else {
        std::ofstream o(path, std::ios::binary);
        if (!o) throw Error("cannot write " + path);
        o.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
}

// ---------------------------------------------------------------------------
// synthetic data

bool in_checkerboard(double x, double y) {
    if (x < -2 || x >= 2 || y < -2 || y >= 2) return false;
    const auto s = static_cast<long>(std::floor(x)) + static_cast<long>(std::floor(y));
    return s % 2 == 0;
}

LinearGaussianModel synth_linear_model(const DataConfig& data) {
    Rng rng(data.seed);
    return random_sere_model(rng, data.linear_dims, data.linear_x_dim);
}

Tensor synth_dataset(DataKind kind, std::size_t n, std::uint64_t seed, const DataConfig& data) {
    if (n < 1) throw Error("synthetic dataset needs n >= 1");
    Rng rng(seed);
    switch (kind) {
        case DataKind::gaussian_mixture: {
            Tensor out({n, 2});
            for (std::size_t i = 0; i < n; ++i) {
                const double a = 2 * std::numbers::pi * static_cast<double>(rng.below(8)) / 8.0;
                out(i, 0) = 2 * std::cos(a) + 0.2 * rng.normal();
                out(i, 1) = 2 * std::sin(a) + 0.2 * rng.normal();
            }
            return out;
        }
        case DataKind::checkerboard: {
            Tensor out({n, 2});
            for (std::size_t i = 0; i < n; ++i) {
                const auto cell = static_cast<long>(rng.below(8));
                const long row = cell / 2;
                const long col = 2 * (cell % 2) + (row % 2);
                out(i, 0) = static_cast<double>(col - 2) + rng.uniform();
                out(i, 1) = static_cast<double>(row - 2) + rng.uniform();
            }
            return out;
        }
        case DataKind::linear_model: {
            DataConfig d = data;
            d.seed = seed;
            const LinearGaussianModel m = synth_linear_model(d);
            Rng draw = rng.split(0x11);
            return to_tensor(simulate(m, n, draw).rightCols(static_cast<Eigen::Index>(m.x_dim())));
        }
        case DataKind::idx: break;
    }
    throw Error("synth_dataset: idx is not a synthetic kind");
}

Dataset load_dataset(const RunConfig& c) {
    const DataConfig& d = c.data;
    Tensor all;
    if (d.kind == DataKind::idx) {
        const std::size_t want = d.train_count + d.valid_count;
        IdxData idx = load_idx(d.images, d.downscale, want);
        if (idx.rows == 0) throw Error(d.images + ": not an image file");
        if (idx.values.rows() < want)
            throw Error(d.images + ": holds " + std::to_string(idx.values.rows()) + " images, " +
                        std::to_string(want) + " requested");
        all = std::move(idx.values);
    } else {
        all = synth_dataset(d.kind, d.n, d.seed, d);
    }
    if (all.cols() != c.model.data_dim)
        throw Error("dataset rows have " + std::to_string(all.cols()) + " values, model.data_dim is " +
                    std::to_string(c.model.data_dim));
    return split_dataset(all, d.valid_count, d.seed);
}

std::pair<std::size_t, std::size_t> image_shape(const RunConfig& c) {
    if (c.data.kind != DataKind::idx) return {0, 0};
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(c.model.data_dim))));
    if (side * side != c.model.data_dim) return {1, c.model.data_dim};
    return {side, side};
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int s = 0; s < 32; s += 8) u8(static_cast<std::uint8_t>(v >> s));
    }
    void u64(std::uint64_t v) {
        for (int s = 0; s < 64; s += 8) u8(static_cast<std::uint8_t>(v >> s));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        buf_.append(s);
    }
    void raw(const char* p, std::size_t n) { buf_.append(p, n); }
    void tensor(const std::string& name, const Tensor& t, std::uint8_t flags) {
        u32(static_cast<std::uint32_t>(name.size()));
        raw(name.data(), name.size());
        u8(1);  // dtype f64
        u8(flags);
        u32(2);
        u64(t.rows());
        u64(t.cols());
        for (double v : t.data()) f64(v);
    }
    void table(const std::map<std::string, Tensor>& m) {
        u32(static_cast<std::uint32_t>(m.size()));
        for (const auto& [k, v] : m) tensor(k, v, 0);
    }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string b) : buf_(std::move(b)) {}
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw Error("checkpoint truncated");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int s = 0; s < 32; s += 8) v |= std::uint32_t(u8()) << s;
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int s = 0; s < 64; s += 8) v |= std::uint64_t(u8()) << s;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string str() { return raw(u64()); }
    std::pair<std::string, Tensor> tensor(std::uint8_t& flags) {
        std::string name = raw(u32());
        if (u8() != 1) throw Error("checkpoint: unsupported dtype for " + name);
        flags = u8();
        const std::uint32_t rank = u32();
        if (rank != 2) throw Error("checkpoint: unsupported rank for " + name);
        const std::uint64_t r = u64(), c = u64();
        need(r * c * 8);
        Tensor t({r, c});
        for (auto& v : t.storage()) v = f64();
        return {std::move(name), std::move(t)};
    }
    std::map<std::string, Tensor> table() {
        std::map<std::string, Tensor> m;
        const std::uint32_t n = u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            std::uint8_t flags = 0;
            auto [k, v] = tensor(flags);
            m.emplace(std::move(k), std::move(v));
        }
        return m;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    std::string buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config) {
    ByteWriter w;
    w.raw(checkpoint_magic, 6);
    const auto& entries = state.params.entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, e] : entries)
        w.tensor(name, e.value, static_cast<std::uint8_t>((e.trainable ? 1 : 0) | (e.regularized ? 2 : 0)));
    const AdamConfig& ac = state.adam.config();
    w.f64(ac.beta1);
    w.f64(ac.beta2);
    w.f64(ac.epsilon);
    w.f64(ac.l2);
    w.u64(state.adam.steps());
    w.table(state.adam.first());
    w.table(state.adam.second());
    for (auto s : state.rng.state()) w.u64(s);
    w.u64(state.epoch);
    w.str(config);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream o(tmp, std::ios::binary);
        if (!o) throw Error("cannot write " + tmp);
        o.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
        if (!o) throw Error("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    ByteReader r(ss.str());
    if (r.raw(6) != std::string(checkpoint_magic, 6)) throw Error(path + ": not a SEREv1 checkpoint");
    Checkpoint c;
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint8_t flags = 0;
        auto [name, t] = r.tensor(flags);
        c.params.add(name, std::move(t), flags & 1, flags & 2);
    }
    AdamConfig ac;
    ac.beta1 = r.f64();
    ac.beta2 = r.f64();
    ac.epsilon = r.f64();
    ac.l2 = r.f64();
    c.adam = Adam(ac);
    c.adam.set_steps(r.u64());
    c.adam.first() = r.table();
    c.adam.second() = r.table();
    for (auto& s : c.rng) s = r.u64();
    c.epoch = r.u64();
    c.config = r.str();
    if (!r.done()) throw Error(path + ": trailing bytes after checkpoint");
    return c;
}

TrainState to_train_state(Checkpoint ckpt) {
    Rng rng;
    rng.set_state(ckpt.rng);
    return TrainState{std::move(ckpt.params), std::move(ckpt.adam), rng, ckpt.epoch};
}

// ---------------------------------------------------------------------------
// metrics and samples

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw Error("metrics: bad number '" + s + "'");
    return v;
}

}  // namespace

std::string metrics_header(std::size_t layers) {
    std::string h = "epoch,beta,lr,train_objective,train_elbo,valid_elbo,valid_recon";
    for (std::size_t l = 1; l <= layers; ++l) h += ",kl_" + std::to_string(l);
    return h + ",seconds,checksum";
}

std::string metrics_row(const EpochMetrics& m) {
    std::string r = std::to_string(m.epoch) + "," + fmt(m.beta) + "," + fmt(m.lr) + "," + fmt(m.train_objective) +
                    "," + fmt(m.train_elbo) + "," + fmt(m.valid_elbo) + "," + fmt(m.valid_recon);
    for (double k : m.valid_kls) r += "," + fmt(k);
    return r + "," + fmt(m.seconds) + "," + std::to_string(m.checksum);
}

std::vector<EpochMetrics> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw Error(path + ": empty metrics file");
    const auto head = split_csv(line);
    if (head.size() < 9 || head[0] != "epoch") throw Error(path + ": unexpected metrics header");
    const std::size_t layers = head.size() - 9;
    if (line != metrics_header(layers)) throw Error(path + ": unexpected metrics header");
    std::vector<EpochMetrics> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != head.size()) throw Error(path + ": ragged metrics row");
        EpochMetrics m;
        m.epoch = std::stoull(cells[0]);
        m.beta = parse_double(cells[1]);
        m.lr = parse_double(cells[2]);
        m.train_objective = parse_double(cells[3]);
        m.train_elbo = parse_double(cells[4]);
        m.valid_elbo = parse_double(cells[5]);
        m.valid_recon = parse_double(cells[6]);
        for (std::size_t l = 0; l < layers; ++l) m.valid_kls.push_back(parse_double(cells[7 + l]));
        m.seconds = parse_double(cells[7 + layers]);
        m.checksum = std::stoull(cells[8 + layers]);
        rows.push_back(std::move(m));
    }
    return rows;
}

void write_pgm(const std::string& path, const Tensor& images, std::size_t row, std::size_t rows, std::size_t cols) {
    if (rows * cols != images.cols()) throw Error("write_pgm: shape does not match the row width");
    std::ofstream o(path, std::ios::binary);
    if (!o) throw Error("cannot write " + path);
    o << "P5\n" << cols << " " << rows << "\n255\n";
    for (std::size_t j = 0; j < images.cols(); ++j) {
        const double v = std::clamp(images(row, j), 0.0, 1.0);
        o.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
    }
}

void write_csv(const std::string& path, const Tensor& data) {
    std::ofstream o(path);
    if (!o) throw Error("cannot write " + path);
    for (std::size_t i = 0; i < data.rows(); ++i) {
        for (std::size_t j = 0; j < data.cols(); ++j) o << (j ? "," : "") << fmt(data(i, j));
        o << "\n";
    }
}

}  // namespace sere
