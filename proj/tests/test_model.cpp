#include <cmath>
#include <cstdio>
#include <set>

#include "doctest.h"
#include "naic/checkpoint.hpp"
#include "naic/cmal.hpp"
#include "naic/model.hpp"

using namespace naic;

namespace {

ModelConfig tiny_config(int vocab = 10, int num_agents = 6) {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.model_dim = 16;
    mc.num_heads = 2;
    mc.ffn_dim = 24;
    mc.vocab_size = vocab;
    mc.num_agents = num_agents;
    mc.max_regions = 3;
    mc.feature_dim = 5;
    return mc;
}

Model tiny_model(uint64_t seed, int vocab = 10, int num_agents = 6) {
    const ModelConfig mc = tiny_config(vocab, num_agents);
    return Model(mc, init_parameters(mc, seed));
}

ImageFeatures random_image(const ModelConfig& mc, uint64_t seed) {
    Rng rng = Rng(seed).fork("img");
    return ImageFeatures{Tensor::randn({mc.max_regions, mc.feature_dim}, rng, 1.0)};
}

// Sum of per-step log-probabilities of an AR continuation under the model.
double sequence_score(const Model& m, const Tensor& ctx, const std::vector<int>& toks) {
    double score = 0.0;
    std::vector<int> prev = {tokens::kBos};
    for (int tok : toks) {
        Graph g;
        const int states = m.decoder_states_g(g, g.input(ctx), m.ar_decoder_inputs_g(g, prev), true);
        const Tensor& logits = g.value(m.logits_g(g, states));
        const auto row = logits.row(logits.rows() - 1);
        score += row[static_cast<size_t>(tok)] - kernels::log_sum_exp(row);
        prev.push_back(tok);
    }
    return score;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig mc = tiny_config();
    mc.model_dim = 15;  // not divisible by heads
    CHECK_THROWS_AS(mc.validate(), std::invalid_argument);
    mc = tiny_config(3);  // vocab below the special tokens
    CHECK_THROWS_AS(mc.validate(), std::invalid_argument);
    mc = tiny_config();
    mc.num_agents = 0;
    CHECK_THROWS_AS(mc.validate(), std::invalid_argument);
}

TEST_CASE("encode: deterministic, single region works, rows permute with regions") {
    const Model m = tiny_model(1);
    const ImageFeatures img = random_image(m.config(), 5);
    const Tensor ctx1 = m.encode(img);
    const Tensor ctx2 = m.encode(img);
    CHECK(bit_equal(ctx1, ctx2));
    CHECK(ctx1.shape == std::vector<int>{3, 16});

    Rng one_rng(3);
    ImageFeatures one{Tensor::randn({1, 5}, one_rng, 1.0)};
    CHECK(m.encode(one).shape == std::vector<int>{1, 16});

    // permuting region rows permutes context rows identically (no positional
    // encoding on regions)
    ImageFeatures perm = img;
    for (int c = 0; c < 5; ++c) {
        std::swap(perm.regions.at(0, c), perm.regions.at(2, c));
    }
    const Tensor ctx_perm = m.encode(perm);
    for (int c = 0; c < 16; ++c) {
        CHECK(ctx_perm.at(0, c) == doctest::Approx(ctx1.at(2, c)).epsilon(1e-12));
        CHECK(ctx_perm.at(2, c) == doctest::Approx(ctx1.at(0, c)).epsilon(1e-12));
        CHECK(ctx_perm.at(1, c) == doctest::Approx(ctx1.at(1, c)).epsilon(1e-12));
    }

    ImageFeatures bad{Tensor::zeros({2, 7})};
    CHECK_THROWS_AS((void)m.encode(bad), std::invalid_argument);
}

TEST_CASE("decode_na: one decoder pass, logits independent of sampling") {
    const Model m = tiny_model(2);
    const Tensor ctx = m.encode(random_image(m.config(), 6));
    m.reset_counters();
    const DecoderLogits logits = m.decode_na(ctx);
    CHECK(m.counters().decoder_forwards == 1);
    CHECK(logits.logits.shape == std::vector<int>{6, 10});
    CHECK(logits.agent_states.shape == std::vector<int>{6, 16});

    // policy rows are normalized
    const Tensor probs = kernels::softmax_rows(logits.logits);
    for (int a = 0; a < probs.rows(); ++a) {
        double s = 0.0;
        for (int u = 0; u < probs.cols(); ++u) s += probs.at(a, u);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }

    const Tensor snapshot = logits.logits;
    Rng r1(11), r2(12);
    const std::vector<int> u1 = sample_joint(logits, r1);
    const std::vector<int> u2 = sample_joint(logits, r2);
    CHECK(u1.size() == 6);
    CHECK(bit_equal(snapshot, logits.logits));  // sampling never touches the logits
    (void)u2;
}

TEST_CASE("decode_na: zeroed inter-attention makes logits image-independent") {
    Model m = tiny_model(3);
    for (auto& [name, t] : m.parameters())
        if (name.find(".cross.") != std::string::npos)
            for (double& x : t.data) x = 0.0;
    const DecoderLogits a = m.decode_na(m.encode(random_image(m.config(), 1)));
    const DecoderLogits b = m.decode_na(m.encode(random_image(m.config(), 2)));
    CHECK(bit_equal(a.logits, b.logits));
}

TEST_CASE("decode_ar_greedy: forward count equals emitted length, bounded loop") {
    const Model m = tiny_model(4);
    const Tensor ctx = m.encode(random_image(m.config(), 7));
    m.reset_counters();
    const std::vector<int> out = m.decode_ar_greedy(ctx, 8);
    CHECK(m.counters().decoder_forwards == static_cast<int64_t>(out.size()));
    CHECK(out.size() >= 1);
    CHECK(out.size() <= 8);  // terminates within max_len even untrained
    CHECK_THROWS_AS((void)m.decode_ar_greedy(ctx, 0), std::invalid_argument);
}

TEST_CASE("decode_ar_beam: width 1 equals greedy on 50 random models") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        const Model m = tiny_model(seed, 8, 5);
        const Tensor ctx = m.encode(random_image(m.config(), seed + 100));
        CHECK(m.decode_ar_beam(ctx, 1, 6) == m.decode_ar_greedy(ctx, 6));
    }
}

TEST_CASE("decode_ar_beam: beam score dominates greedy score") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        const Model m = tiny_model(seed * 3 + 1, 8, 5);
        const Tensor ctx = m.encode(random_image(m.config(), seed));
        const double greedy = sequence_score(m, ctx, m.decode_ar_greedy(ctx, 6));
        const double beam = sequence_score(m, ctx, m.decode_ar_beam(ctx, 3, 6));
        CHECK(beam >= greedy - 1e-12);
    }
}

TEST_CASE("decode_ar_beam: width 2 finds the exhaustive argmax on a small system") {
    // vocab 4 (pad, period, bos, unk used as plain symbols), max_len 3:
    // enumerate every termination-consistent sequence and its model log-prob.
    const Model m = tiny_model(12345, 4, 4);
    const Tensor ctx = m.encode(random_image(m.config(), 9));
    std::vector<int> best;
    double best_score = -1e18;
    std::vector<std::vector<int>> stack = {{}};
    while (!stack.empty()) {
        std::vector<int> prefix = stack.back();
        stack.pop_back();
        for (int t = 0; t < 4; ++t) {
            std::vector<int> seq = prefix;
            seq.push_back(t);
            const bool done = t == tokens::kPeriod || seq.size() == 3;
            if (done) {
                const double s = sequence_score(m, ctx, seq);
                if (s > best_score || (s == best_score && seq < best)) {
                    best_score = s;
                    best = seq;
                }
            } else {
                stack.push_back(seq);
            }
        }
    }
    const std::vector<int> beam = m.decode_ar_beam(ctx, 2, 3);
    CHECK(sequence_score(m, ctx, beam) == doctest::Approx(best_score).epsilon(1e-9));
    CHECK(beam == best);
    CHECK_THROWS_AS((void)m.decode_ar_beam(ctx, 0, 3), std::invalid_argument);
}

TEST_CASE("sample_joint: near-one-hot logits always pick that token") {
    DecoderLogits logits;
    logits.logits = Tensor::zeros({4, 6});
    for (int a = 0; a < 4; ++a) logits.logits.at(a, 3) = 1e6;
    logits.agent_states = Tensor::zeros({4, 1});
    Rng rng(5);
    CHECK(sample_joint(logits, rng) == std::vector<int>{3, 3, 3, 3});
}

TEST_CASE("sample_joint: deterministic per seed, rejects NaN") {
    const Model m = tiny_model(6);
    const DecoderLogits logits = m.decode_na(m.encode(random_image(m.config(), 3)));
    Rng a(42), b(42);
    CHECK(sample_joint(logits, a) == sample_joint(logits, b));
    Rng c(42);
    const auto first = sample_joint(logits, c);
    const auto second = sample_joint(logits, c);  // same rng advances
    CHECK(first != second);  // overwhelmingly likely for a soft policy

    DecoderLogits bad = logits;
    bad.logits.at(0, 0) = std::nan("");
    Rng d(1);
    CHECK_THROWS_AS((void)sample_joint(bad, d), std::invalid_argument);
}

TEST_CASE("sample_joint: empirical frequencies match the policy within 3 sigma") {
    DecoderLogits logits;
    logits.logits = Tensor::zeros({1, 3});
    logits.logits.at(0, 0) = std::log(0.6);
    logits.logits.at(0, 1) = std::log(0.3);
    logits.logits.at(0, 2) = std::log(0.1);
    logits.agent_states = Tensor::zeros({1, 1});
    const int draws = 100000;
    std::vector<int> counts(3, 0);
    Rng rng(2718);
    for (int i = 0; i < draws; ++i) counts[static_cast<size_t>(sample_joint(logits, rng)[0])]++;
    const double probs[3] = {0.6, 0.3, 0.1};
    for (int t = 0; t < 3; ++t) {
        const double expect = probs[t] * draws;
        const double sigma = std::sqrt(draws * probs[t] * (1 - probs[t]));
        CHECK(std::fabs(counts[static_cast<size_t>(t)] - expect) < 3.0 * sigma);
    }
}

TEST_CASE("greedy_joint: argmax with lowest-id ties, matches brute force") {
    DecoderLogits uniform;
    uniform.logits = Tensor::full({3, 5}, 0.25);
    uniform.agent_states = Tensor::zeros({3, 1});
    CHECK(greedy_joint(uniform) == std::vector<int>{0, 0, 0});

    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        DecoderLogits logits;
        logits.logits = Tensor::randn({4, 9}, rng, 1.0);
        logits.agent_states = Tensor::zeros({4, 1});
        const std::vector<int> fast = greedy_joint(logits);
        for (int a = 0; a < 4; ++a) {
            int best = 0;
            for (int u = 1; u < 9; ++u)
                if (logits.logits.at(a, u) > logits.logits.at(a, best)) best = u;
            CHECK(fast[static_cast<size_t>(a)] == best);
        }
        // greedy probability dominates any sample's probability per position
        const Tensor probs = kernels::softmax_rows(logits.logits);
        Rng srng(trial);
        const std::vector<int> sampled = sample_joint(logits, srng);
        for (int a = 0; a < 4; ++a)
            CHECK(probs.at(a, fast[static_cast<size_t>(a)]) >= probs.at(a, sampled[static_cast<size_t>(a)]));
    }
}

TEST_CASE("truncate_at_period") {
    CHECK(truncate_at_period({4, 5, 1, 5}) == std::vector<int>{4, 5});
    CHECK(truncate_at_period({4, 5, 6}) == std::vector<int>{4, 5, 6});
    CHECK(truncate_at_period({1, 4, 5}).empty());
}

TEST_CASE("init_from_teacher: bit-exact copy, config mismatch rejected") {
    const ModelConfig mc = tiny_config();
    const Parameters teacher = init_parameters(mc, 11);
    const Parameters student = init_from_teacher(mc, teacher, mc);
    REQUIRE(student.size() == teacher.size());
    for (const auto& [name, t] : teacher) CHECK(bit_equal(t, student.at(name)));

    ModelConfig other = mc;
    other.vocab_size = mc.vocab_size + 2;
    CHECK_THROWS_AS((void)init_from_teacher(mc, teacher, other), std::invalid_argument);
}

TEST_CASE("student forward differs from teacher only by mask and inputs") {
    // with the causal mask re-enabled and teacher-style inputs, the
    // teacher-initialized student reproduces the teacher bit-exactly
    const ModelConfig mc = tiny_config();
    const Model teacher(mc, init_parameters(mc, 21));
    const Model student(mc, init_from_teacher(mc, teacher.parameters(), mc));
    const ImageFeatures img = random_image(mc, 2);
    const std::vector<int> prev = {tokens::kBos, 5, 6};

    auto run = [&](const Model& m, bool causal) {
        Graph g;
        const int ctx = m.encode_g(g, img);
        const int states = m.decoder_states_g(g, ctx, m.ar_decoder_inputs_g(g, prev), causal);
        return g.value(m.logits_g(g, states));
    };
    CHECK(bit_equal(run(teacher, true), run(student, true)));
    CHECK_FALSE(bit_equal(run(teacher, true), run(student, false)));  // the mask is the only difference
}

TEST_CASE("causal mask: logits at step t ignore future tokens") {
    const Model m = tiny_model(31);
    const ImageFeatures img = random_image(m.config(), 4);
    auto logits_at = [&](const std::vector<int>& prev, int row) {
        Graph g;
        const int ctx = m.encode_g(g, img);
        const int states = m.decoder_states_g(g, ctx, m.ar_decoder_inputs_g(g, prev), true);
        const Tensor& logits = g.value(m.logits_g(g, states));
        Tensor out = Tensor::zeros({1, logits.cols()});
        for (int c = 0; c < logits.cols(); ++c) out.at(0, c) = logits.at(row, c);
        return out;
    };
    const Tensor a = logits_at({tokens::kBos, 4, 5, 6}, 1);
    const Tensor b = logits_at({tokens::kBos, 4, 9, 8}, 1);  // positions > 1 changed
    CHECK(bit_equal(a, b));
}

TEST_CASE("parameter layout is agent-count independent (shared across positions)") {
    ModelConfig a = tiny_config(10, 4);
    ModelConfig b = tiny_config(10, 12);
    const Parameters pa = init_parameters(a, 1);
    const Parameters pb = init_parameters(b, 1);
    REQUIRE(pa.size() == pb.size());
    auto ita = pa.begin();
    auto itb = pb.begin();
    for (; ita != pa.end(); ++ita, ++itb) {
        CHECK(ita->first == itb->first);
        CHECK(ita->second.shape == itb->second.shape);
    }
}

TEST_CASE("checkpoint round trip is bit-exact") {
    const ModelConfig mc = tiny_config();
    const Parameters params = init_parameters(mc, 99);
    const std::string path = "test_model_ckpt.bin";
    ckpt::save_model(path, mc, params);
    auto [mc2, params2] = ckpt::load_model(path);
    CHECK(mc2 == mc);
    REQUIRE(params2.size() == params.size());
    for (const auto& [name, t] : params) CHECK(bit_equal(t, params2.at(name)));

    // identical content -> identical checksum; change one bit -> different
    const std::string checksum = ckpt::file_checksum(path);
    ckpt::save_model(path, mc, params);
    CHECK(ckpt::file_checksum(path) == checksum);
    Parameters mutated = params;
    mutated.at("out.b").data[0] += 1e-9;
    ckpt::save_model(path, mc, mutated);
    CHECK(ckpt::file_checksum(path) != checksum);
    std::remove(path.c_str());
}

TEST_CASE("overfit teacher reproduces its single training caption") {
    const ModelConfig mc = tiny_config(10, 8);
    Model teacher(mc, init_parameters(mc, 5));
    const ImageFeatures img = random_image(mc, 13);
    const std::vector<int> caption = {4, 5, 6, 7, 1};

    cmal::AdamState adam;
    cmal::AdamConfig opt;
    opt.lr = 3e-3;
    const std::vector<cmal::XeItem> batch = {{&img, caption}};
    double loss = 1e9;
    for (int step = 0; step < 300 && loss > 1e-3; ++step)
        loss = cmal::train_step_xe(teacher, batch, cmal::XeMode::Autoregressive, adam, opt, 1).loss;
    CHECK(loss < 1e-3);
    CHECK(teacher.decode_ar_greedy(teacher.encode(img), 8) == caption);
}
