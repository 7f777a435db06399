#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "naic/graph.hpp"
#include "naic/tensor.hpp"

namespace naic {

namespace tokens {
constexpr int kPad = 0;
constexpr int kPeriod = 1;
constexpr int kBos = 2;
constexpr int kUnk = 3;
constexpr int kNumSpecial = 4;
}  // namespace tokens

struct ModelConfig {
    int num_layers = 2;
    int model_dim = 64;
    int num_heads = 4;
    int ffn_dim = 128;
    int vocab_size = 64;
    int num_agents = 16;
    int max_regions = 4;
    int feature_dim = 32;

    void validate() const;
    int head_dim() const { return model_dim / num_heads; }
    bool operator==(const ModelConfig&) const = default;
    std::string summary() const;
};

// Region feature matrix standing in for CNN output (num_regions x feature_dim).
struct ImageFeatures {
    Tensor regions;
    int num_regions() const { return regions.rows(); }
    void validate(const ModelConfig& cfg) const;
};

// Final per-agent decoder states and their vocabulary logits.
struct DecoderLogits {
    Tensor logits;        // num_agents x vocab_size
    Tensor agent_states;  // num_agents x model_dim
};

using Parameters = std::map<std::string, Tensor>;

// Fresh parameter set whose shapes are fully determined by the config.
Parameters init_parameters(const ModelConfig& cfg, uint64_t seed);

// Bit-exact copy of the teacher's tensors for the student. The decoding-mode
// difference (mask, decoder inputs) is runtime behavior, not parameters, so
// the whole set is shared. Rejects mismatched configs.
Parameters init_from_teacher(const ModelConfig& teacher_cfg, const Parameters& teacher,
                             const ModelConfig& student_cfg);

// Transformer encoder/decoder with two decoding modes over one parameter
// layout: autoregressive (causal mask, shifted token embeddings as decoder
// input) and non-autoregressive (no mask, sinusoidal position encodings as
// decoder input, all positions in one pass).
class Model {
public:
    Model(ModelConfig cfg, Parameters params);
    Model(Model&& other) noexcept
        : cfg_(other.cfg_), params_(std::move(other.params_)), enc_fwd_(other.enc_fwd_.load()),
          dec_fwd_(other.dec_fwd_.load()) {}
    Model& operator=(Model&& other) noexcept {
        cfg_ = other.cfg_;
        params_ = std::move(other.params_);
        enc_fwd_ = other.enc_fwd_.load();
        dec_fwd_ = other.dec_fwd_.load();
        return *this;
    }

    const ModelConfig& config() const { return cfg_; }
    const Parameters& parameters() const { return params_; }
    Parameters& parameters() { return params_; }

    // --- graph builders (training and inference share these paths) --------
    int encode_g(Graph& g, const ImageFeatures& feat) const;
    // Decoder stack over arbitrary inputs; returns the final states node
    // (T x model_dim). Exactly one decoder invocation per call.
    int decoder_states_g(Graph& g, int ctx, int dec_inputs, bool causal_mask) const;
    int logits_g(Graph& g, int states) const;
    // Decoder inputs for the two modes.
    int na_decoder_inputs_g(Graph& g) const;                                   // PE(1..N)
    int ar_decoder_inputs_g(Graph& g, const std::vector<int>& prev_tokens) const;  // embed + PE

    // Sinusoidal encodings for positions 1..len (len x model_dim).
    Tensor positional_encoding(int len) const;

    // --- inference ---------------------------------------------------------
    Tensor encode(const ImageFeatures& feat) const;
    DecoderLogits decode_na(const Tensor& ctx) const;
    std::vector<int> decode_ar_greedy(const Tensor& ctx, int max_len) const;
    std::vector<int> decode_ar_beam(const Tensor& ctx, int beam_width, int max_len) const;

    struct Counters {
        int64_t encoder_forwards = 0;
        int64_t decoder_forwards = 0;
    };
    Counters counters() const { return {enc_fwd_.load(), dec_fwd_.load()}; }
    void reset_counters() const {
        enc_fwd_ = 0;
        dec_fwd_ = 0;
    }

private:
    int pnode(Graph& g, const std::string& name) const;
    int attention_g(Graph& g, const std::string& prefix, int q_in, int kv_in, bool causal) const;
    int ffn_g(Graph& g, const std::string& prefix, int x) const;
    int encoder_block_g(Graph& g, int layer, int x) const;
    int decoder_block_g(Graph& g, int layer, int x, int ctx, bool causal) const;

    ModelConfig cfg_;
    Parameters params_;
    mutable std::atomic<int64_t> enc_fwd_{0};
    mutable std::atomic<int64_t> dec_fwd_{0};
};

// --- joint actions ----------------------------------------------------------

// One token per agent, sampled independently from softmax rows. Reproducible
// per rng; rejects non-finite logits.
std::vector<int> sample_joint(const DecoderLogits& logits, Rng& rng);

// Per-position argmax; ties broken by lowest token id.
std::vector<int> greedy_joint(const DecoderLogits& logits);

// Prefix strictly before the first period; the whole sequence if none.
std::vector<int> truncate_at_period(const std::vector<int>& tokens);

}  // namespace naic
