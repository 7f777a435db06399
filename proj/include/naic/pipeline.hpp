#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "naic/checkpoint.hpp"
#include "naic/config.hpp"
#include "naic/oracle.hpp"
#include "naic/synth.hpp"

namespace naic::pipeline {

using LogFn = std::function<void(const std::string&)>;

// Labeled records with split indices, the unlabeled pool, and the CIDEr
// corpus statistics built over the training reference sets (the reward
// corpus for CMAL).
struct LoadedData {
    synth::GrammarConfig grammar;
    std::vector<synth::DatasetRecord> records;
    std::vector<ImageFeatures> unlabeled;
    std::vector<int> train_idx, val_idx, test_idx;
    metrics::CiderCorpusStats train_stats;

    const std::vector<int>& split_indices(synth::Split s) const;
};

LoadedData make_data(const RunConfig& cfg);
void index_data(LoadedData& data);  // rebuilds indices and train_stats

// --- training stages (in-memory; the CLI wraps these with files) -------------

Model train_teacher_model(const RunConfig& cfg, const LoadedData& data, uint64_t seed, int threads,
                          const LogFn& log, ckpt::TrainState* state = nullptr, Model* resume_from = nullptr);

// Pseudo captions for the labeled training images followed by the unlabeled
// pool (KD applies to both, per the training-with-unlabeled-data recipe).
struct DistillOutput {
    std::vector<synth::PseudoCaption> labeled;    // aligned with train_idx
    std::vector<synth::PseudoCaption> unlabeled;  // aligned with data.unlabeled
};
DistillOutput distill_all(const RunConfig& cfg, const Model& teacher, const LoadedData& data, int beam_width,
                          const std::string& source, int threads);

struct XeSpec {
    bool weight_init = true;
    const Model* teacher = nullptr;  // required when weight_init
    // KD path: pseudo captions for labeled (+ optionally unlabeled) images.
    // Raw path (kd == false): real references of labeled images, one sampled
    // per epoch.
    bool kd = true;
    const DistillOutput* pseudo = nullptr;
    bool include_unlabeled = true;
};

Model pretrain_xe_model(const RunConfig& cfg, const LoadedData& data, const XeSpec& spec, uint64_t seed,
                        int threads, const LogFn& log, ckpt::TrainState* state = nullptr,
                        Model* resume_from = nullptr);

Model train_cmal_model(const RunConfig& cfg, const LoadedData& data, const Model& start,
                       const cmal::BaselineKind& baseline, uint64_t seed, int threads, const LogFn& log,
                       ckpt::TrainState* state = nullptr, Model* resume_from = nullptr);

// --- evaluation ----------------------------------------------------------------

struct EvalReport {
    double bleu1 = 0.0;
    double bleu4 = 0.0;
    double cider_d = 0.0;
    double dup_rate = 0.0;  // adjacent-duplicate-token rate of the captions
    int count = 0;
};
EvalReport evaluate_model(const Model& model, const LoadedData& data, synth::Split split, int threads);

struct LatencyReport {
    int images = 0;
    int beam_width = 3;
    double na_ms = 0.0;         // per-image mean wall time
    double ar_greedy_ms = 0.0;
    double ar_beam_ms = 0.0;
    double na_fwd_per_image = 0.0;  // decoder forward passes
    double ar_greedy_fwd_per_image = 0.0;
    double ar_beam_fwd_per_image = 0.0;
    double speedup_vs_greedy = 0.0;
    double speedup_vs_beam = 0.0;
};
// Single-image decoding (no minibatching); warmup iterations are excluded.
LatencyReport bench_latency(const Model& teacher, const Model& student, const LoadedData& data, int num_images,
                            int beam_width, int warmup = 10);

// --- oracle check ----------------------------------------------------------------

struct OracleCheckReport {
    std::vector<std::string> lines;
    bool pass = false;
};
// Runs the enumeration oracle on the shipped small configs (vocab 4, N in
// {2, 3}): probability mass, counterfactual/self-critical unbiasedness at
// 1e-6, and the top-k degeneracy. mutate_advantage_sign demonstrates that a
// sign-flipped estimator is caught.
OracleCheckReport oracle_check(uint64_t seed, bool mutate_advantage_sign, int threads);

// --- run-directory layout ---------------------------------------------------------

std::string dataset_path(const std::string& dir);
std::string unlabeled_path(const std::string& dir);
std::string teacher_ckpt_path(const std::string& dir);
std::string pseudo_path(const std::string& dir);
std::string xe_ckpt_path(const std::string& dir);
std::string cmal_ckpt_path(const std::string& dir);
std::string state_path(const std::string& ckpt_path);
std::string log_path(const std::string& dir, const std::string& stage);

LoadedData load_data_files(const RunConfig& cfg, const std::string& dir);

}  // namespace naic::pipeline
