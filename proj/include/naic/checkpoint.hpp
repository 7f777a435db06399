#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "naic/model.hpp"

namespace naic::ckpt {

// Model checkpoint: magic, format version, ModelConfig, then named tensors
// as (name, dims, raw little-endian f64). Round trips bit-exactly.
void save_model(const std::string& path, const ModelConfig& cfg, const Parameters& params);
std::pair<ModelConfig, Parameters> load_model(const std::string& path);

// Optimizer/progress state for resumable training. Moment tensors are stored
// in the same named-tensor container with "m."/"v." prefixes.
struct TrainState {
    int64_t step = 0;
    int64_t epoch = 0;
    int64_t adam_t = 0;
    double ma_value = 0.0;  // moving-average baseline state
    bool ma_initialized = false;
    Parameters adam_m;
    Parameters adam_v;
};
void save_train_state(const std::string& path, const TrainState& state);
TrainState load_train_state(const std::string& path);

// FNV-1a over the file bytes, hex encoded; used for provenance headers.
std::string file_checksum(const std::string& path);

}  // namespace naic::ckpt
