#pragma once

#include <cstdint>
#include <string>

#include "naic/cmal.hpp"
#include "naic/metrics.hpp"
#include "naic/model.hpp"
#include "naic/synth.hpp"

namespace naic {

// Per-stage optimizer settings; the learning rate decays by lr_decay every
// lr_decay_every epochs.
struct StageOpt {
    int epochs = 10;
    int batch_size = 16;
    double lr = 1e-3;
    double lr_decay = 1.0;
    int lr_decay_every = 1;
    double clip_norm = 5.0;

    double lr_at_epoch(int epoch) const;
    cmal::AdamConfig adam_at_epoch(int epoch) const;
    void validate(const std::string& stage) const;
};

// Whole-run configuration. Model vocabulary and feature dimensions are
// derived from the grammar, never specified independently.
struct RunConfig {
    int num_layers = 2;
    int model_dim = 64;
    int num_heads = 4;
    int ffn_dim = 128;
    int num_agents = 16;

    synth::GrammarConfig grammar;

    struct Data {
        uint64_t seed = 7;
        int train = 2000;
        int val = 200;
        int test = 200;
        int unlabeled = 4000;
    } data;

    StageOpt teacher;
    StageOpt xe;
    StageOpt cmal_stage;

    std::string cmal_baseline = "cf";
    int cmal_k = 2;
    double cmal_ma_decay = 0.9;
    std::string cmal_metric = "cider";

    int distill_beam_width = 3;
    uint64_t train_seed = 1;
    int threads = 0;  // 0: NAIC_THREADS env var, else hardware up to 4

    ModelConfig model_config() const;
    cmal::BaselineKind baseline_kind() const;
    metrics::MetricKind metric_kind() const;
    void validate() const;
};

RunConfig default_config();

// Strict parse: unknown keys anywhere are rejected to catch typos.
RunConfig load_config(const std::string& path);
RunConfig parse_config_json(const std::string& text);
std::string config_to_json(const RunConfig& cfg);

// FNV-1a over the canonical serialized form; embedded in logs and reports.
std::string config_checksum(const RunConfig& cfg);

// Worker-thread count: explicit config value, else the NAIC_THREADS
// environment variable, else hardware concurrency capped at 4.
int resolve_threads(const RunConfig& cfg);

}  // namespace naic
