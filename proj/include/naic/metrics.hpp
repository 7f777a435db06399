#pragma once

#include <map>
#include <vector>

#include "naic/model.hpp"

namespace naic::metrics {

using Tokens = std::vector<int>;
// n-gram (token-id tuple, 1 <= n <= max_n) -> count. Ordered keys keep every
// accumulation loop deterministic.
using NGramCounts = std::map<Tokens, int>;

NGramCounts ngram_counts(const Tokens& toks, int max_n);

// Sentence BLEU: clipped n-gram precision, geometric mean over orders 1..max_n,
// brevity penalty exp(1 - r/c) for c < r with r the closest reference length
// (ties to the shorter). No smoothing: any order with zero matches scores 0.
// Empty candidate scores 0; empty reference list is rejected.
double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n);

// Reference-corpus n-gram document frequencies for CIDEr-D. One document =
// one image's reference set.
struct CiderCorpusStats {
    std::map<Tokens, int> doc_freq;
    int num_docs = 0;
    int max_n = 4;
    double sigma = 6.0;
};

// Counts each n-gram once per reference set containing it. Rejects corpora
// with fewer than 2 documents (idf undefined).
CiderCorpusStats build_corpus_stats(const std::vector<std::vector<Tokens>>& corpus);

// CIDEr-D: per order n, clipped tf-idf cosine against each reference with a
// Gaussian length penalty exp(-(lc-lr)^2 / (2 sigma^2)); averaged over
// references then orders, scaled by 10. Empty candidate scores 0.
double cider_d(const Tokens& candidate, const std::vector<Tokens>& references, const CiderCorpusStats& stats);

enum class MetricKind { Bleu1, Bleu4, CiderD };

// Shared team reward: truncate the joint action at the first period, then
// score the caption with the configured metric. Empty captions score 0.
double team_reward(const std::vector<int>& joint, const std::vector<Tokens>& references,
                   const CiderCorpusStats& stats, MetricKind kind);

// Fraction of adjacent token pairs that are equal, over truncated captions.
// The consistency failure mode of XE-trained parallel decoders.
double adjacent_duplicate_rate(const std::vector<Tokens>& captions);

}  // namespace naic::metrics
