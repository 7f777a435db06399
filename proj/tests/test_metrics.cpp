#include <cmath>

#include "doctest.h"
#include "naic/metrics.hpp"
#include "naic/rng.hpp"

using naic::Rng;
using naic::metrics::bleu;
using naic::metrics::build_corpus_stats;
using naic::metrics::cider_d;
using naic::metrics::CiderCorpusStats;
using naic::metrics::MetricKind;
using naic::metrics::ngram_counts;
using naic::metrics::team_reward;
using naic::metrics::Tokens;

namespace {

Tokens random_tokens(Rng& rng, int min_len, int max_len, int vocab) {
    Tokens t(static_cast<size_t>(min_len + rng.below(max_len - min_len + 1)));
    for (int& x : t) x = rng.below(vocab);
    return t;
}

}  // namespace

TEST_CASE("bleu: candidate equal to the sole reference scores 1") {
    const Tokens c = {5, 6, 7, 8, 9};
    CHECK(bleu(c, {c}, 4) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu(c, {c}, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bleu: clipped unigram precision, hand-counted") {
    // candidate [a, a] vs reference [a]: clip min(2,1)=1 of 2, BP = 1 since c >= r
    CHECK(bleu({4, 4}, {{4}}, 1) == 0.5);
}

TEST_CASE("bleu: disjoint vocabulary scores 0") {
    CHECK(bleu({1, 2, 3}, {{7, 8, 9}}, 4) == 0.0);
    CHECK(bleu({1, 2, 3}, {{7, 8, 9}}, 1) == 0.0);
}

TEST_CASE("bleu: empty candidate scores 0; empty reference list rejected") {
    CHECK(bleu({}, {{1, 2}}, 4) == 0.0);
    CHECK_THROWS_AS((void)bleu({1}, {}, 4), std::invalid_argument);
    CHECK_THROWS_AS((void)bleu({1}, {{1}}, 0), std::invalid_argument);
    CHECK_THROWS_AS((void)bleu({1}, {{1}}, 5), std::invalid_argument);
}

TEST_CASE("bleu: brevity penalty uses the closest reference length") {
    const Tokens c = {5, 6};
    const double score = bleu(c, {{5, 6, 7, 8}}, 1);
    CHECK(score == doctest::Approx(std::exp(1.0 - 4.0 / 2.0)).epsilon(1e-12));
    // two references at distance 1: tie broken toward the shorter (r = 1, no penalty for c = 2)
    CHECK(bleu(c, {{5}, {5, 6, 7}}, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cider-d: identical sentence with positive idf scores 10") {
    const Tokens c = {5, 6, 7, 8, 1};
    const std::vector<std::vector<Tokens>> corpus = {{c}, {{9, 10, 1}}, {{11, 12, 13, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    CHECK(cider_d(c, {c}, stats) == doctest::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("cider-d: no shared n-grams scores 0") {
    const std::vector<std::vector<Tokens>> corpus = {{{5, 6, 1}}, {{7, 8, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    CHECK(cider_d({9, 10, 11}, {{5, 6, 1}}, stats) == 0.0);
}

TEST_CASE("cider-d: empty candidate scores 0, tiny corpus rejected") {
    const std::vector<std::vector<Tokens>> corpus = {{{5, 6, 1}}, {{7, 8, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    CHECK(cider_d({}, {{5, 6, 1}}, stats) == 0.0);
    CiderCorpusStats degenerate;
    degenerate.num_docs = 1;
    CHECK_THROWS_AS((void)cider_d({5}, {{5}}, degenerate), std::invalid_argument);
    CHECK_THROWS_AS((void)build_corpus_stats({{{1, 2}}}), std::invalid_argument);
}

TEST_CASE("cider-d: widening sigma never decreases a length-mismatched score") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        Tokens cand = random_tokens(rng, 1, 8, 10);
        Tokens ref = random_tokens(rng, 1, 8, 10);
        std::vector<std::vector<Tokens>> corpus = {{ref}, {random_tokens(rng, 2, 8, 10)},
                                                   {random_tokens(rng, 2, 8, 10)}};
        CiderCorpusStats stats = build_corpus_stats(corpus);
        const double narrow = cider_d(cand, {ref}, stats);
        stats.sigma *= 2.0;
        const double wide = cider_d(cand, {ref}, stats);
        CHECK(wide >= narrow - 1e-12);
    }
}

TEST_CASE("corpus stats: document frequencies") {
    const std::vector<std::vector<Tokens>> corpus = {{{5, 6, 1}, {5, 7, 1}}, {{5, 6, 1}}, {{5, 9, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    // unigram [5] in every document -> idf log(3/3) = 0
    CHECK(stats.doc_freq.at({5}) == stats.num_docs);
    CHECK(std::log(static_cast<double>(stats.num_docs) / stats.doc_freq.at({5})) == 0.0);
    // bigram [5,9] in exactly one document
    CHECK(stats.doc_freq.at({5, 9}) == 1);
    // appearing twice within one document still counts once
    CHECK(stats.doc_freq.at({1}) == 3);
}

TEST_CASE("corpus stats: five-document corpus matches a brute-force recount") {
    Rng rng(77);
    std::vector<std::vector<Tokens>> corpus;
    for (int d = 0; d < 5; ++d) {
        std::vector<Tokens> doc;
        const int refs = 1 + rng.below(3);
        for (int r = 0; r < refs; ++r) doc.push_back(random_tokens(rng, 1, 7, 6));
        corpus.push_back(std::move(doc));
    }
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    for (const auto& [gram, df] : stats.doc_freq) {
        int recount = 0;
        for (const auto& doc : corpus) {
            bool found = false;
            for (const Tokens& ref : doc) {
                for (size_t i = 0; i + gram.size() <= ref.size(); ++i)
                    if (std::equal(gram.begin(), gram.end(), ref.begin() + static_cast<long>(i))) found = true;
            }
            if (found) ++recount;
        }
        CHECK(df == recount);
    }
}

TEST_CASE("team reward: joint action equal to a reference scores its cider value") {
    const Tokens ref = {5, 6, 7, 8, 1};
    const std::vector<std::vector<Tokens>> corpus = {{ref}, {{9, 10, 1}}, {{11, 12, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    const std::vector<int> joint = {5, 6, 7, 8, 1, 9, 9, 9};  // reference then period then junk
    const double r = team_reward(joint, {ref}, stats, MetricKind::CiderD);
    CHECK(r == cider_d({5, 6, 7, 8}, {ref}, stats));
}

TEST_CASE("team reward: leading period gives an empty caption and reward 0") {
    const std::vector<std::vector<Tokens>> corpus = {{{5, 6, 1}}, {{7, 8, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    CHECK(team_reward({1, 5, 6}, {{5, 6, 1}}, stats, MetricKind::CiderD) == 0.0);
    CHECK(team_reward({1, 5, 6}, {{5, 6, 1}}, stats, MetricKind::Bleu1) == 0.0);
}

TEST_CASE("team reward: invariant to tokens after the first period") {
    Rng rng(31);
    const std::vector<std::vector<Tokens>> corpus = {{{5, 6, 7, 1}}, {{6, 7, 8, 1}}, {{5, 8, 1}}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    for (int trial = 0; trial < 40; ++trial) {
        std::vector<int> joint = random_tokens(rng, 4, 10, 9);
        joint[static_cast<size_t>(rng.below(static_cast<int>(joint.size())))] = 1;  // plant a period
        std::vector<int> mutated = joint;
        bool after = false;
        for (size_t i = 0; i < mutated.size(); ++i) {
            if (after) mutated[i] = rng.below(9);
            if (mutated[i] == 1) after = true;
        }
        CHECK(team_reward(joint, corpus[0], stats, MetricKind::CiderD) ==
              team_reward(mutated, corpus[0], stats, MetricKind::CiderD));
    }
}

TEST_CASE("metrics are pure: repeated calls bit-identical") {
    Rng rng(8);
    const Tokens cand = random_tokens(rng, 3, 8, 8);
    const Tokens ref = random_tokens(rng, 3, 8, 8);
    const std::vector<std::vector<Tokens>> corpus = {{ref}, {random_tokens(rng, 2, 6, 8)}};
    const CiderCorpusStats stats = build_corpus_stats(corpus);
    CHECK(bleu(cand, {ref}, 4) == bleu(cand, {ref}, 4));
    CHECK(cider_d(cand, {ref}, stats) == cider_d(cand, {ref}, stats));
}

TEST_CASE("appending a reference n-gram never decreases clipped counts") {
    Rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        const Tokens ref = random_tokens(rng, 3, 9, 7);
        Tokens cand = random_tokens(rng, 1, 6, 7);
        auto clipped = [&](const Tokens& c, int n) {
            int64_t total = 0;
            const auto cc = ngram_counts(c, n);
            const auto rc = ngram_counts(ref, n);
            for (const auto& [gram, count] : cc) {
                if (static_cast<int>(gram.size()) != n) continue;
                auto it = rc.find(gram);
                if (it != rc.end()) total += std::min(count, it->second);
            }
            return total;
        };
        Tokens extended = cand;
        extended.push_back(ref[static_cast<size_t>(rng.below(static_cast<int>(ref.size())))]);
        for (int n = 1; n <= 4; ++n) CHECK(clipped(extended, n) >= clipped(cand, n));
    }
}
