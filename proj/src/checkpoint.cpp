#include "naic/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace naic::ckpt {

namespace {

constexpr char kModelMagic[8] = {'N', 'A', 'I', 'C', 'C', 'K', 'P', 'T'};
constexpr char kStateMagic[8] = {'N', 'A', 'I', 'C', 'S', 'T', 'A', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
int32_t read_i32(std::istream& is) {
    int32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

void write_tensors(std::ostream& os, const Parameters& params) {
    write_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) write_i32(os, d);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

Parameters read_tensors(std::istream& is) {
    Parameters params;
    const uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t ndim = read_u32(is);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_i32(is);
        Tensor t = Tensor::zeros(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        params.emplace(std::move(name), std::move(t));
    }
    if (!is) throw std::runtime_error("checkpoint: truncated tensor section");
    return params;
}

void write_config(std::ostream& os, const ModelConfig& cfg) {
    write_i32(os, cfg.num_layers);
    write_i32(os, cfg.model_dim);
    write_i32(os, cfg.num_heads);
    write_i32(os, cfg.ffn_dim);
    write_i32(os, cfg.vocab_size);
    write_i32(os, cfg.num_agents);
    write_i32(os, cfg.max_regions);
    write_i32(os, cfg.feature_dim);
}

ModelConfig read_config(std::istream& is) {
    ModelConfig cfg;
    cfg.num_layers = read_i32(is);
    cfg.model_dim = read_i32(is);
    cfg.num_heads = read_i32(is);
    cfg.ffn_dim = read_i32(is);
    cfg.vocab_size = read_i32(is);
    cfg.num_agents = read_i32(is);
    cfg.max_regions = read_i32(is);
    cfg.feature_dim = read_i32(is);
    return cfg;
}

void check_magic(std::istream& is, const char (&magic)[8], const std::string& what) {
    char buf[8];
    is.read(buf, 8);
    if (!is || std::memcmp(buf, magic, 8) != 0) throw std::runtime_error(what + ": bad magic");
    const uint32_t version = read_u32(is);
    if (version != kVersion)
        throw std::runtime_error(what + ": unsupported format version " + std::to_string(version));
}

}  // namespace

void save_model(const std::string& path, const ModelConfig& cfg, const Parameters& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kModelMagic, 8);
    write_u32(os, kVersion);
    write_config(os, cfg);
    write_tensors(os, params);
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

std::pair<ModelConfig, Parameters> load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    check_magic(is, kModelMagic, "model checkpoint");
    ModelConfig cfg = read_config(is);
    cfg.validate();
    Parameters params = read_tensors(is);
    return {cfg, std::move(params)};
}

void save_train_state(const std::string& path, const TrainState& state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("train state: cannot open '" + path + "' for writing");
    os.write(kStateMagic, 8);
    write_u32(os, kVersion);
    write_i64(os, state.step);
    write_i64(os, state.epoch);
    write_i64(os, state.adam_t);
    os.write(reinterpret_cast<const char*>(&state.ma_value), sizeof state.ma_value);
    const uint32_t ma_init = state.ma_initialized ? 1 : 0;
    write_u32(os, ma_init);
    Parameters merged;
    for (const auto& [name, t] : state.adam_m) merged["m." + name] = t;
    for (const auto& [name, t] : state.adam_v) merged["v." + name] = t;
    write_tensors(os, merged);
    if (!os) throw std::runtime_error("train state: write failed for '" + path + "'");
}

TrainState load_train_state(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("train state: cannot open '" + path + "'");
    check_magic(is, kStateMagic, "train state");
    TrainState state;
    state.step = read_i64(is);
    state.epoch = read_i64(is);
    state.adam_t = read_i64(is);
    is.read(reinterpret_cast<char*>(&state.ma_value), sizeof state.ma_value);
    state.ma_initialized = read_u32(is) != 0;
    Parameters merged = read_tensors(is);
    for (auto& [name, t] : merged) {
        if (name.rfind("m.", 0) == 0) state.adam_m[name.substr(2)] = std::move(t);
        else if (name.rfind("v.", 0) == 0) state.adam_v[name.substr(2)] = std::move(t);
        else throw std::runtime_error("train state: unexpected tensor '" + name + "'");
    }
    return state;
}

std::string file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checksum: cannot open '" + path + "'");
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof buf);
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

}  // namespace naic::ckpt
