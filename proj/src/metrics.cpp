#include "naic/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace naic::metrics {

NGramCounts ngram_counts(const Tokens& toks, int max_n) {
    NGramCounts counts;
    const int len = static_cast<int>(toks.size());
    for (int n = 1; n <= max_n; ++n)
        for (int i = 0; i + n <= len; ++i) counts[Tokens(toks.begin() + i, toks.begin() + i + n)]++;
    return counts;
}

double bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n) {
    if (references.empty()) throw std::invalid_argument("bleu: reference list must be non-empty");
    if (max_n < 1 || max_n > 4) throw std::invalid_argument("bleu: max_n must be in [1, 4]");
    const int c = static_cast<int>(candidate.size());
    if (c == 0) return 0.0;

    const NGramCounts cand = ngram_counts(candidate, max_n);
    std::vector<NGramCounts> refs;
    refs.reserve(references.size());
    for (const Tokens& r : references) refs.push_back(ngram_counts(r, max_n));

    double log_prec_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        int64_t clipped = 0, total = 0;
        for (const auto& [gram, count] : cand) {
            if (static_cast<int>(gram.size()) != n) continue;
            total += count;
            int max_ref = 0;
            for (const NGramCounts& r : refs) {
                auto it = r.find(gram);
                if (it != r.end()) max_ref = std::max(max_ref, it->second);
            }
            clipped += std::min(count, max_ref);
        }
        if (total == 0 || clipped == 0) return 0.0;  // no smoothing
        log_prec_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
    }

    // closest reference length; ties broken toward the shorter reference
    int r_best = static_cast<int>(references[0].size());
    for (const Tokens& r : references) {
        const int rl = static_cast<int>(r.size());
        const int d_new = std::abs(rl - c), d_old = std::abs(r_best - c);
        if (d_new < d_old || (d_new == d_old && rl < r_best)) r_best = rl;
    }
    const double bp = c < r_best ? std::exp(1.0 - static_cast<double>(r_best) / c) : 1.0;
    return bp * std::exp(log_prec_sum / max_n);
}

CiderCorpusStats build_corpus_stats(const std::vector<std::vector<Tokens>>& corpus) {
    if (corpus.size() < 2) throw std::invalid_argument("build_corpus_stats: corpus must contain >= 2 documents");
    CiderCorpusStats stats;
    stats.num_docs = static_cast<int>(corpus.size());
    for (const std::vector<Tokens>& doc : corpus) {
        std::set<Tokens> seen;
        for (const Tokens& ref : doc) {
            for (const auto& [gram, count] : ngram_counts(ref, stats.max_n)) seen.insert(gram);
        }
        for (const Tokens& gram : seen) stats.doc_freq[gram]++;
    }
    return stats;
}

namespace {

struct TfIdfVec {
    // per order n (0-based): gram -> tf*idf, plus the vector norm
    std::vector<std::map<Tokens, double>> vecs;
    std::vector<double> norms;
};

TfIdfVec tfidf(const Tokens& toks, const CiderCorpusStats& stats) {
    TfIdfVec out;
    out.vecs.assign(static_cast<size_t>(stats.max_n), {});
    out.norms.assign(static_cast<size_t>(stats.max_n), 0.0);
    const double log_docs = std::log(static_cast<double>(stats.num_docs));
    for (const auto& [gram, count] : ngram_counts(toks, stats.max_n)) {
        const size_t n = gram.size() - 1;
        auto it = stats.doc_freq.find(gram);
        const double df = it == stats.doc_freq.end() ? 1.0 : static_cast<double>(std::max(1, it->second));
        const double idf = log_docs - std::log(df);
        const double w = static_cast<double>(count) * idf;
        out.vecs[n][gram] = w;
        out.norms[n] += w * w;
    }
    for (double& x : out.norms) x = std::sqrt(x);
    return out;
}

}  // namespace

double cider_d(const Tokens& candidate, const std::vector<Tokens>& references, const CiderCorpusStats& stats) {
    if (stats.num_docs < 2) throw std::invalid_argument("cider_d: stats must cover >= 2 documents");
    if (references.empty()) throw std::invalid_argument("cider_d: reference list must be non-empty");
    if (candidate.empty()) return 0.0;

    const TfIdfVec cand = tfidf(candidate, stats);
    std::vector<double> score(static_cast<size_t>(stats.max_n), 0.0);
    for (const Tokens& ref : references) {
        const TfIdfVec rv = tfidf(ref, stats);
        const double delta = static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
        const double len_penalty = std::exp(-(delta * delta) / (2.0 * stats.sigma * stats.sigma));
        for (int n = 0; n < stats.max_n; ++n) {
            double dot = 0.0;
            for (const auto& [gram, w] : cand.vecs[static_cast<size_t>(n)]) {
                auto it = rv.vecs[static_cast<size_t>(n)].find(gram);
                if (it != rv.vecs[static_cast<size_t>(n)].end()) dot += std::min(w, it->second) * it->second;
            }
            double val = dot;
            if (cand.norms[static_cast<size_t>(n)] != 0.0 && rv.norms[static_cast<size_t>(n)] != 0.0)
                val /= cand.norms[static_cast<size_t>(n)] * rv.norms[static_cast<size_t>(n)];
            score[static_cast<size_t>(n)] += val * len_penalty;
        }
    }
    double mean_over_n = 0.0;
    for (double s : score) mean_over_n += s;
    mean_over_n /= static_cast<double>(stats.max_n);
    return 10.0 * mean_over_n / static_cast<double>(references.size());
}

double team_reward(const std::vector<int>& joint, const std::vector<Tokens>& references,
                   const CiderCorpusStats& stats, MetricKind kind) {
    const Tokens caption = truncate_at_period(joint);
    if (caption.empty()) return 0.0;
    switch (kind) {
        case MetricKind::Bleu1: return bleu(caption, references, 1);
        case MetricKind::Bleu4: return bleu(caption, references, 4);
        case MetricKind::CiderD: return cider_d(caption, references, stats);
    }
    return 0.0;
}

double adjacent_duplicate_rate(const std::vector<Tokens>& captions) {
    int64_t pairs = 0, dups = 0;
    for (const Tokens& cap : captions) {
        for (size_t i = 0; i + 1 < cap.size(); ++i) {
            ++pairs;
            if (cap[i] == cap[i + 1]) ++dups;
        }
    }
    return pairs == 0 ? 0.0 : static_cast<double>(dups) / static_cast<double>(pairs);
}

}  // namespace naic::metrics
