#include "naic/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace naic {

void ModelConfig::validate() const {
    if (num_layers < 1) throw std::invalid_argument("ModelConfig: num_layers must be >= 1");
    if (model_dim < 1 || ffn_dim < 1) throw std::invalid_argument("ModelConfig: dims must be positive");
    if (num_heads < 1 || model_dim % num_heads != 0)
        throw std::invalid_argument("ModelConfig: model_dim must be divisible by num_heads");
    if (vocab_size < tokens::kNumSpecial)
        throw std::invalid_argument("ModelConfig: vocab_size must be >= 4 (pad, period, bos, unk)");
    if (num_agents < 1) throw std::invalid_argument("ModelConfig: num_agents must be >= 1");
    if (max_regions < 1 || feature_dim < 1) throw std::invalid_argument("ModelConfig: region dims must be positive");
}

std::string ModelConfig::summary() const {
    return "L=" + std::to_string(num_layers) + " d=" + std::to_string(model_dim) + " h=" +
           std::to_string(num_heads) + " ffn=" + std::to_string(ffn_dim) + " V=" + std::to_string(vocab_size) +
           " N=" + std::to_string(num_agents);
}

void ImageFeatures::validate(const ModelConfig& cfg) const {
    if (regions.shape.size() != 2 || regions.rows() < 1)
        throw std::invalid_argument("ImageFeatures: need at least one region row");
    if (regions.cols() != cfg.feature_dim)
        throw std::invalid_argument("ImageFeatures: feature_dim " + std::to_string(regions.cols()) +
                                    " does not match config " + std::to_string(cfg.feature_dim));
    if (!regions.all_finite()) throw std::invalid_argument("ImageFeatures: non-finite values");
}

namespace {

void init_attn(Parameters& p, const std::string& prefix, int d, Rng& rng, double std) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) p[prefix + "." + w] = Tensor::randn({d, d}, rng, std);
    for (const char* b : {"bq", "bk", "bv", "bo"}) p[prefix + "." + b] = Tensor::zeros({1, d});
}

void init_ln(Parameters& p, const std::string& prefix, int d) {
    p[prefix + ".g"] = Tensor::full({1, d}, 1.0);
    p[prefix + ".b"] = Tensor::zeros({1, d});
}

void init_ffn(Parameters& p, const std::string& prefix, int d, int f, Rng& rng, double std) {
    p[prefix + ".w1"] = Tensor::randn({d, f}, rng, std);
    p[prefix + ".b1"] = Tensor::zeros({1, f});
    p[prefix + ".w2"] = Tensor::randn({f, d}, rng, std);
    p[prefix + ".b2"] = Tensor::zeros({1, d});
}

}  // namespace

Parameters init_parameters(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const double std = 0.02;
    Rng rng = Rng(seed).fork("params");
    Parameters p;
    p["embed.tok"] = Tensor::randn({cfg.vocab_size, cfg.model_dim}, rng, std);
    p["out.w"] = Tensor::randn({cfg.model_dim, cfg.vocab_size}, rng, std);
    p["out.b"] = Tensor::zeros({1, cfg.vocab_size});
    p["enc.in.w"] = Tensor::randn({cfg.feature_dim, cfg.model_dim}, rng, std);
    p["enc.in.b"] = Tensor::zeros({1, cfg.model_dim});
    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string e = "enc.L" + std::to_string(l);
        init_attn(p, e + ".attn", cfg.model_dim, rng, std);
        init_ln(p, e + ".ln1", cfg.model_dim);
        init_ffn(p, e + ".ffn", cfg.model_dim, cfg.ffn_dim, rng, std);
        init_ln(p, e + ".ln2", cfg.model_dim);
        const std::string d = "dec.L" + std::to_string(l);
        init_attn(p, d + ".self", cfg.model_dim, rng, std);
        init_ln(p, d + ".ln1", cfg.model_dim);
        init_attn(p, d + ".cross", cfg.model_dim, rng, std);
        init_ln(p, d + ".ln2", cfg.model_dim);
        init_ffn(p, d + ".ffn", cfg.model_dim, cfg.ffn_dim, rng, std);
        init_ln(p, d + ".ln3", cfg.model_dim);
    }
    return p;
}

Parameters init_from_teacher(const ModelConfig& teacher_cfg, const Parameters& teacher,
                             const ModelConfig& student_cfg) {
    if (!(teacher_cfg == student_cfg))
        throw std::invalid_argument("init_from_teacher: teacher and student configs differ (" +
                                    teacher_cfg.summary() + " vs " + student_cfg.summary() + ")");
    return teacher;  // same layout; the mask difference is a runtime flag
}

Model::Model(ModelConfig cfg, Parameters params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    const Parameters reference = init_parameters(cfg_, 0);
    if (params_.size() != reference.size())
        throw std::invalid_argument("Model: parameter set has wrong tensor count");
    for (const auto& [name, t] : reference) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("Model: missing parameter '" + name + "'");
        if (it->second.shape != t.shape)
            throw std::invalid_argument("Model: parameter '" + name + "' has shape " + it->second.shape_str() +
                                        ", expected " + t.shape_str());
    }
}

int Model::pnode(Graph& g, const std::string& name) const {
    auto it = g.params().find(name);
    if (it != g.params().end()) return it->second;
    return g.param(name, params_.at(name));
}

Tensor Model::positional_encoding(int len) const {
    const int d = cfg_.model_dim;
    Tensor pe = Tensor::zeros({len, d});
    for (int t = 0; t < len; ++t) {
        const double pos = static_cast<double>(t + 1);  // positions 1..len
        for (int i = 0; i < d / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / d);
            pe.at(t, 2 * i) = std::sin(pos * freq);
            pe.at(t, 2 * i + 1) = std::cos(pos * freq);
        }
    }
    return pe;
}

int Model::attention_g(Graph& g, const std::string& prefix, int q_in, int kv_in, bool causal) const {
    const int dh = cfg_.head_dim();
    const int q = g.add(g.matmul(q_in, pnode(g, prefix + ".wq")), pnode(g, prefix + ".bq"));
    const int k = g.add(g.matmul(kv_in, pnode(g, prefix + ".wk")), pnode(g, prefix + ".bk"));
    const int v = g.add(g.matmul(kv_in, pnode(g, prefix + ".wv")), pnode(g, prefix + ".bv"));
    const int tq = g.value(q).rows();
    const int tk = g.value(k).rows();
    int mask = -1;
    if (causal) {
        Tensor m = Tensor::zeros({tq, tk});
        for (int i = 0; i < tq; ++i)
            for (int j = i + 1; j < tk; ++j) m.at(i, j) = -1e9;
        mask = g.input(std::move(m));
    }
    std::vector<int> heads;
    for (int h = 0; h < cfg_.num_heads; ++h) {
        const int qh = g.slice(q, 1, h * dh, dh);
        const int kh = g.slice(k, 1, h * dh, dh);
        const int vh = g.slice(v, 1, h * dh, dh);
        int scores = g.scale(g.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) scores = g.add(scores, mask);
        heads.push_back(g.matmul(g.softmax(scores), vh));
    }
    const int merged = cfg_.num_heads == 1 ? heads[0] : g.concat(heads, 1);
    return g.add(g.matmul(merged, pnode(g, prefix + ".wo")), pnode(g, prefix + ".bo"));
}

int Model::ffn_g(Graph& g, const std::string& prefix, int x) const {
    const int h = g.gelu(g.add(g.matmul(x, pnode(g, prefix + ".w1")), pnode(g, prefix + ".b1")));
    return g.add(g.matmul(h, pnode(g, prefix + ".w2")), pnode(g, prefix + ".b2"));
}

int Model::encoder_block_g(Graph& g, int layer, int x) const {
    const std::string e = "enc.L" + std::to_string(layer);
    const int attn = attention_g(g, e + ".attn", x, x, false);
    const int h = g.layer_norm(g.add(x, attn), pnode(g, e + ".ln1.g"), pnode(g, e + ".ln1.b"));
    const int ffn = ffn_g(g, e + ".ffn", h);
    return g.layer_norm(g.add(h, ffn), pnode(g, e + ".ln2.g"), pnode(g, e + ".ln2.b"));
}

int Model::decoder_block_g(Graph& g, int layer, int x, int ctx, bool causal) const {
    const std::string d = "dec.L" + std::to_string(layer);
    const int self = attention_g(g, d + ".self", x, x, causal);
    const int h1 = g.layer_norm(g.add(x, self), pnode(g, d + ".ln1.g"), pnode(g, d + ".ln1.b"));
    const int cross = attention_g(g, d + ".cross", h1, ctx, false);
    const int h2 = g.layer_norm(g.add(h1, cross), pnode(g, d + ".ln2.g"), pnode(g, d + ".ln2.b"));
    const int ffn = ffn_g(g, d + ".ffn", h2);
    return g.layer_norm(g.add(h2, ffn), pnode(g, d + ".ln3.g"), pnode(g, d + ".ln3.b"));
}

int Model::encode_g(Graph& g, const ImageFeatures& feat) const {
    feat.validate(cfg_);
    enc_fwd_.fetch_add(1, std::memory_order_relaxed);
    int x = g.add(g.matmul(g.input(feat.regions), pnode(g, "enc.in.w")), pnode(g, "enc.in.b"));
    for (int l = 0; l < cfg_.num_layers; ++l) x = encoder_block_g(g, l, x);
    return x;
}

int Model::decoder_states_g(Graph& g, int ctx, int dec_inputs, bool causal_mask) const {
    dec_fwd_.fetch_add(1, std::memory_order_relaxed);
    int x = dec_inputs;
    for (int l = 0; l < cfg_.num_layers; ++l) x = decoder_block_g(g, l, x, ctx, causal_mask);
    return x;
}

int Model::logits_g(Graph& g, int states) const {
    return g.add(g.matmul(states, pnode(g, "out.w")), pnode(g, "out.b"));
}

int Model::na_decoder_inputs_g(Graph& g) const { return g.input(positional_encoding(cfg_.num_agents)); }

int Model::ar_decoder_inputs_g(Graph& g, const std::vector<int>& prev_tokens) const {
    const int t = static_cast<int>(prev_tokens.size());
    const int emb = g.embed(pnode(g, "embed.tok"), prev_tokens);
    return g.add(emb, g.input(positional_encoding(t)));
}

Tensor Model::encode(const ImageFeatures& feat) const {
    Graph g;
    return g.value(encode_g(g, feat));
}

DecoderLogits Model::decode_na(const Tensor& ctx) const {
    Graph g;
    const int ctx_in = g.input(ctx);
    const int states = decoder_states_g(g, ctx_in, na_decoder_inputs_g(g), false);
    const int logits = logits_g(g, states);
    return DecoderLogits{g.value(logits), g.value(states)};
}

namespace {

// Argmax with lowest-id tie break.
int argmax_row(std::span<const double> row) {
    int best = 0;
    for (size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace

std::vector<int> Model::decode_ar_greedy(const Tensor& ctx, int max_len) const {
    if (max_len < 1) throw std::invalid_argument("decode_ar_greedy: max_len must be >= 1");
    std::vector<int> out;
    std::vector<int> prev = {tokens::kBos};
    while (static_cast<int>(out.size()) < max_len) {
        Graph g;
        const int ctx_in = g.input(ctx);
        const int states = decoder_states_g(g, ctx_in, ar_decoder_inputs_g(g, prev), true);
        const Tensor& logits = g.value(logits_g(g, states));
        const int tok = argmax_row(logits.row(logits.rows() - 1));
        out.push_back(tok);
        prev.push_back(tok);
        if (tok == tokens::kPeriod) break;
    }
    return out;
}

std::vector<int> Model::decode_ar_beam(const Tensor& ctx, int beam_width, int max_len) const {
    if (beam_width < 1) throw std::invalid_argument("decode_ar_beam: beam_width must be >= 1");
    if (max_len < 1) throw std::invalid_argument("decode_ar_beam: max_len must be >= 1");

    struct Hyp {
        std::vector<int> toks;
        double score = 0.0;
    };
    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.toks < b.toks;
    };

    std::vector<Hyp> live = {Hyp{}};
    Hyp best_done;
    bool have_done = false;

    for (int step = 0; step < max_len && !live.empty(); ++step) {
        std::vector<Hyp> candidates;
        for (const Hyp& h : live) {
            Graph g;
            const int ctx_in = g.input(ctx);
            std::vector<int> prev = {tokens::kBos};
            prev.insert(prev.end(), h.toks.begin(), h.toks.end());
            const int states = decoder_states_g(g, ctx_in, ar_decoder_inputs_g(g, prev), true);
            const Tensor& logits = g.value(logits_g(g, states));
            const auto row = logits.row(logits.rows() - 1);
            const double lse = kernels::log_sum_exp(row);
            for (int t = 0; t < cfg_.vocab_size; ++t) {
                Hyp ext;
                ext.toks = h.toks;
                ext.toks.push_back(t);
                ext.score = h.score + (row[static_cast<size_t>(t)] - lse);
                candidates.push_back(std::move(ext));
            }
        }
        std::sort(candidates.begin(), candidates.end(), better);
        live.clear();
        // only the top beam_width candidates survive; completed hypotheses
        // among them leave the beam
        for (int taken = 0; taken < beam_width && taken < static_cast<int>(candidates.size()); ++taken) {
            Hyp& c = candidates[static_cast<size_t>(taken)];
            const bool done = c.toks.back() == tokens::kPeriod || static_cast<int>(c.toks.size()) >= max_len;
            if (done) {
                if (!have_done || better(c, best_done)) {
                    best_done = std::move(c);
                    have_done = true;
                }
            } else {
                live.push_back(std::move(c));
            }
        }
        // Scores only decrease with length, so a completed hypothesis at
        // least as good as every live one is final.
        if (have_done && (live.empty() || best_done.score >= live.front().score)) return best_done.toks;
    }
    if (have_done) return best_done.toks;
    return live.empty() ? std::vector<int>{} : live.front().toks;
}

std::vector<int> sample_joint(const DecoderLogits& logits, Rng& rng) {
    if (!logits.logits.all_finite()) throw std::invalid_argument("sample_joint: non-finite logits");
    const Tensor probs = kernels::softmax_rows(logits.logits);
    Rng draw = rng.fork(rng.next_u64());  // advances rng; one fork per agent below
    std::vector<int> joint(static_cast<size_t>(probs.rows()));
    for (int a = 0; a < probs.rows(); ++a) {
        Rng agent_rng = draw.fork(static_cast<uint64_t>(a));
        joint[static_cast<size_t>(a)] = agent_rng.categorical(probs.row(a));
    }
    return joint;
}

std::vector<int> greedy_joint(const DecoderLogits& logits) {
    std::vector<int> joint(static_cast<size_t>(logits.logits.rows()));
    for (int a = 0; a < logits.logits.rows(); ++a) joint[static_cast<size_t>(a)] = argmax_row(logits.logits.row(a));
    return joint;
}

std::vector<int> truncate_at_period(const std::vector<int>& toks) {
    std::vector<int> out;
    for (int t : toks) {
        if (t == tokens::kPeriod) break;
        out.push_back(t);
    }
    return out;
}

}  // namespace naic
