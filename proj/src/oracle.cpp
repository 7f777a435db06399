#include "naic/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace naic::oracle {

namespace {

using LongAccum = std::map<std::string, std::vector<long double>>;

// Own softmax, independent of the graph kernels.
std::vector<std::vector<double>> policy_rows(const Tensor& logits) {
    std::vector<std::vector<double>> rows(static_cast<size_t>(logits.rows()));
    for (int a = 0; a < logits.rows(); ++a) {
        double mx = logits.at(a, 0);
        for (int u = 1; u < logits.cols(); ++u) mx = std::max(mx, logits.at(a, u));
        double sum = 0.0;
        std::vector<double> row(static_cast<size_t>(logits.cols()));
        for (int u = 0; u < logits.cols(); ++u) {
            row[static_cast<size_t>(u)] = std::exp(logits.at(a, u) - mx);
            sum += row[static_cast<size_t>(u)];
        }
        for (double& p : row) p /= sum;
        rows[static_cast<size_t>(a)] = std::move(row);
    }
    return rows;
}

std::vector<double> compute_baseline(const cmal::BaselineKind& kind, const Tensor& probs,
                                     const std::vector<int>& joint, const cmal::RewardFn& reward) {
    switch (kind.type) {
        case cmal::BaselineKind::Type::None: return std::vector<double>(joint.size(), 0.0);
        case cmal::BaselineKind::Type::SelfCritical: return cmal::self_critical_baseline(probs, reward);
        case cmal::BaselineKind::Type::Counterfactual:
            return cmal::topk_counterfactual_baseline(probs, joint, reward, kind.k);
        case cmal::BaselineKind::Type::MovingAverage:
            throw std::invalid_argument("oracle: moving-average baseline has no meaning under exact enumeration");
    }
    return {};
}

struct EnumerationCore {
    LongAccum sums;
    long double mass = 0.0L;
};

// Walks an index stripe of the joint-action space on one worker; partial sums
// are gathered in worker order by the caller.
EnumerationCore enumerate_stripe(const Model& model, const ImageFeatures& image, const cmal::RewardFn& reward,
                                 const cmal::BaselineKind& baseline, bool mutate_sign, int64_t begin, int64_t stride,
                                 int64_t total) {
    const int num_agents = model.config().num_agents;
    const int vocab = model.config().vocab_size;

    Graph g;
    const int ctx = model.encode_g(g, image);
    const int states = model.decoder_states_g(g, ctx, model.na_decoder_inputs_g(g), false);
    const int logits_node = model.logits_g(g, states);
    const Tensor logits = g.value(logits_node);
    const Tensor probs_mat = kernels::softmax_rows(logits);  // production policy for the baselines
    const auto pi = policy_rows(logits);                     // oracle's own probabilities
    const size_t mark = g.size();

    EnumerationCore core;
    std::vector<int> joint(static_cast<size_t>(num_agents));
    for (int64_t idx = begin; idx < total; idx += stride) {
        int64_t rem = idx;
        long double prob = 1.0L;
        for (int a = 0; a < num_agents; ++a) {
            joint[static_cast<size_t>(a)] = static_cast<int>(rem % vocab);
            rem /= vocab;
            prob *= pi[static_cast<size_t>(a)][static_cast<size_t>(joint[static_cast<size_t>(a)])];
        }
        core.mass += prob;

        const double r = reward(joint);
        std::vector<double> adv = cmal::advantages(r, compute_baseline(baseline, probs_mat, joint, reward));
        if (mutate_sign)
            for (double& a : adv) a = -a;

        const int loss = cmal::surrogate_loss_g(g, logits_node, joint, adv);
        const GradMap grad = g.backward(loss);
        g.rollback(mark);

        for (const auto& [name, t] : grad) {
            auto [it, fresh] = core.sums.try_emplace(name, t.data.size(), 0.0L);
            for (size_t i = 0; i < t.data.size(); ++i) it->second[i] += prob * static_cast<long double>(t.data[i]);
        }
    }
    return core;
}

std::pair<GradMap, double> enumerate_all(const Model& model, const ImageFeatures& image,
                                         const cmal::RewardFn& reward, const cmal::BaselineKind& baseline,
                                         const EnumerationOptions& opts) {
    const int num_agents = model.config().num_agents;
    const int vocab = model.config().vocab_size;
    long double space = 1.0L;
    for (int a = 0; a < num_agents; ++a) space *= vocab;
    if (space > static_cast<long double>(opts.max_joint_actions))
        throw std::invalid_argument("oracle: joint-action space " + std::to_string(vocab) + "^" +
                                    std::to_string(num_agents) + " exceeds the enumeration bound " +
                                    std::to_string(opts.max_joint_actions));
    const int64_t total = static_cast<int64_t>(space);

    const int workers = std::max(1, std::min<int>(opts.num_threads, static_cast<int>(std::min<int64_t>(total, 64))));
    std::vector<EnumerationCore> cores(static_cast<size_t>(workers));
    cmal::parallel_for(workers, workers, [&](int w) {
        cores[static_cast<size_t>(w)] = enumerate_stripe(model, image, reward, baseline, opts.mutate_advantage_sign,
                                                         w, workers, total);
    });

    LongAccum sums;
    long double mass = 0.0L;
    for (const EnumerationCore& core : cores) {  // fixed worker order
        mass += core.mass;
        for (const auto& [name, vec] : core.sums) {
            auto [it, fresh] = sums.try_emplace(name, vec.size(), 0.0L);
            for (size_t i = 0; i < vec.size(); ++i) it->second[i] += vec[i];
        }
    }

    GradMap out;
    for (const auto& [name, vec] : sums) {
        Tensor t = Tensor::zeros(model.parameters().at(name).shape);
        for (size_t i = 0; i < vec.size(); ++i) t.data[i] = static_cast<double>(vec[i]);
        out[name] = std::move(t);
    }
    return {std::move(out), static_cast<double>(std::fabs(static_cast<double>(mass - 1.0L)))};
}

}  // namespace

GradMap exact_expected_gradient(const Model& model, const ImageFeatures& image, const cmal::RewardFn& reward,
                                const cmal::BaselineKind& baseline, const EnumerationOptions& opts) {
    auto [grads, mass_err] = enumerate_all(model, image, reward, baseline, opts);
    if (mass_err > 1e-9)
        throw std::runtime_error("oracle: enumeration probability mass off by " + std::to_string(mass_err));
    return grads;
}

EnumerationReport compare_expected_gradients(const Model& model, const ImageFeatures& image,
                                             const cmal::RewardFn& reward, const cmal::BaselineKind& baseline_a,
                                             const cmal::BaselineKind& baseline_b, const EnumerationOptions& opts) {
    EnumerationOptions opts_a = opts;
    opts_a.mutate_advantage_sign = false;
    auto [grads_a, mass_a] = enumerate_all(model, image, reward, baseline_a, opts_a);
    auto [grads_b, mass_b] = enumerate_all(model, image, reward, baseline_b, opts);

    EnumerationReport report;
    report.config_summary = model.config().summary() + " baselines " + baseline_a.name() + " vs " + baseline_b.name();
    report.prob_mass_error = std::max(mass_a, mass_b);
    long double space = 1.0L;
    for (int a = 0; a < model.config().num_agents; ++a) space *= model.config().vocab_size;
    report.joint_actions = static_cast<int64_t>(space);
    for (const auto& [name, ta] : grads_a) {
        const Tensor& tb = grads_b.at(name);
        for (size_t i = 0; i < ta.data.size(); ++i) {
            const double abs_dev = std::fabs(ta.data[i] - tb.data[i]);
            report.max_abs_deviation = std::max(report.max_abs_deviation, abs_dev);
            report.max_rel_deviation =
                std::max(report.max_rel_deviation, abs_dev / std::max(1e-8, std::fabs(ta.data[i])));
        }
    }
    report.expected_a = std::move(grads_a);
    report.expected_b = std::move(grads_b);
    return report;
}

Tensor expected_logit_gradient(const Tensor& probs, const cmal::RewardFn& reward,
                               const cmal::BaselineKind& baseline) {
    if (probs.shape.size() != 2) throw std::invalid_argument("expected_logit_gradient: probs must be 2-D");
    const int n = probs.rows(), vocab = probs.cols();
    int64_t total = 1;
    for (int a = 0; a < n; ++a) {
        total *= vocab;
        if (total > 1'000'000) throw std::invalid_argument("expected_logit_gradient: space too large");
    }
    Tensor out = Tensor::zeros(probs.shape);
    std::vector<int> joint(static_cast<size_t>(n));
    for (int64_t idx = 0; idx < total; ++idx) {
        int64_t rem = idx;
        double prob = 1.0;
        for (int a = 0; a < n; ++a) {
            joint[static_cast<size_t>(a)] = static_cast<int>(rem % vocab);
            rem /= vocab;
            prob *= probs.at(a, joint[static_cast<size_t>(a)]);
        }
        const double r = reward(joint);
        const std::vector<double> adv = cmal::advantages(r, compute_baseline(baseline, probs, joint, reward));
        for (int a = 0; a < n; ++a)
            for (int u = 0; u < vocab; ++u) {
                const double onehot = joint[static_cast<size_t>(a)] == u ? 1.0 : 0.0;
                out.at(a, u) += prob * adv[static_cast<size_t>(a)] * (probs.at(a, u) - onehot);
            }
    }
    return out;
}

VarianceSummary estimator_variance(const Model& model, const ImageFeatures& image, const cmal::RewardFn& reward,
                                   const cmal::BaselineKind& baseline, int num_samples, uint64_t seed,
                                   int num_threads) {
    if (num_samples < 1000) throw std::invalid_argument("estimator_variance: num_samples must be >= 1000");

    struct WorkerAccum {
        std::map<std::string, std::vector<long double>> sum, sumsq;
        int64_t count = 0;
    };
    const int workers = std::max(1, std::min(num_threads, num_samples));
    std::vector<WorkerAccum> accums(static_cast<size_t>(workers));

    cmal::parallel_for(workers, workers, [&](int w) {
        Graph g;
        const int ctx = model.encode_g(g, image);
        const int states = model.decoder_states_g(g, ctx, model.na_decoder_inputs_g(g), false);
        const int logits_node = model.logits_g(g, states);
        const Tensor logits = g.value(logits_node);
        const Tensor probs_mat = kernels::softmax_rows(logits);
        const auto pi = policy_rows(logits);
        const size_t mark = g.size();
        const int num_agents = model.config().num_agents;

        WorkerAccum& acc = accums[static_cast<size_t>(w)];
        std::vector<int> joint(static_cast<size_t>(num_agents));
        for (int s = w; s < num_samples; s += workers) {
            Rng rng = Rng(seed).fork("variance").fork(static_cast<uint64_t>(s));
            for (int a = 0; a < num_agents; ++a)
                joint[static_cast<size_t>(a)] = rng.fork(static_cast<uint64_t>(a)).categorical(pi[static_cast<size_t>(a)]);

            const double r = reward(joint);
            const std::vector<double> adv = cmal::advantages(r, compute_baseline(baseline, probs_mat, joint, reward));
            const int loss = cmal::surrogate_loss_g(g, logits_node, joint, adv);
            const GradMap grad = g.backward(loss);
            g.rollback(mark);

            acc.count += 1;
            for (const auto& [name, t] : grad) {
                auto [its, f1] = acc.sum.try_emplace(name, t.data.size(), 0.0L);
                auto [itq, f2] = acc.sumsq.try_emplace(name, t.data.size(), 0.0L);
                for (size_t i = 0; i < t.data.size(); ++i) {
                    const long double x = t.data[i];
                    its->second[i] += x;
                    itq->second[i] += x * x;
                }
            }
        }
    });

    // gather in worker order
    std::map<std::string, std::vector<long double>> sum, sumsq;
    int64_t count = 0;
    for (const WorkerAccum& acc : accums) {
        count += acc.count;
        for (const auto& [name, vec] : acc.sum) {
            auto [it, fresh] = sum.try_emplace(name, vec.size(), 0.0L);
            for (size_t i = 0; i < vec.size(); ++i) it->second[i] += vec[i];
        }
        for (const auto& [name, vec] : acc.sumsq) {
            auto [it, fresh] = sumsq.try_emplace(name, vec.size(), 0.0L);
            for (size_t i = 0; i < vec.size(); ++i) it->second[i] += vec[i];
        }
    }

    std::vector<double> variances;
    VarianceSummary out;
    out.num_samples = count;
    for (const auto& [name, s] : sum) {
        const std::vector<long double>& q = sumsq.at(name);
        for (size_t i = 0; i < s.size(); ++i) {
            const long double mean = s[i] / count;
            const long double var = (q[i] - static_cast<long double>(count) * mean * mean) /
                                    static_cast<long double>(count - 1);
            variances.push_back(std::max(0.0, static_cast<double>(var)));
        }
    }
    out.num_coords = static_cast<int64_t>(variances.size());
    for (double v : variances) {
        out.mean += v;
        out.max = std::max(out.max, v);
    }
    out.mean /= static_cast<double>(variances.size());
    std::nth_element(variances.begin(), variances.begin() + variances.size() / 2, variances.end());
    out.median = variances[variances.size() / 2];
    return out;
}

// --- metric oracles -----------------------------------------------------------

namespace {

using metrics::Tokens;

bool same_gram(const Tokens& a, size_t i, const Tokens& b, size_t j, int n) {
    for (int k = 0; k < n; ++k)
        if (a[i + static_cast<size_t>(k)] != b[j + static_cast<size_t>(k)]) return false;
    return true;
}

int count_gram(const Tokens& hay, const Tokens& gram_src, size_t gram_pos, int n) {
    if (static_cast<int>(hay.size()) < n) return 0;
    int count = 0;
    for (size_t i = 0; i + static_cast<size_t>(n) <= hay.size(); ++i)
        if (same_gram(hay, i, gram_src, gram_pos, n)) ++count;
    return count;
}

bool first_occurrence(const Tokens& s, size_t pos, int n) {
    for (size_t j = 0; j < pos; ++j)
        if (same_gram(s, j, s, pos, n)) return false;
    return true;
}

// Distinct n-grams of a sentence in lexicographic order (the same canonical
// accumulation order the production metrics use via their ordered maps).
std::vector<Tokens> distinct_grams_sorted(const Tokens& s, int n) {
    std::vector<Tokens> grams;
    if (static_cast<int>(s.size()) >= n)
        for (size_t i = 0; i + static_cast<size_t>(n) <= s.size(); ++i)
            if (first_occurrence(s, i, n)) grams.push_back(Tokens(s.begin() + i, s.begin() + i + n));
    std::sort(grams.begin(), grams.end());
    return grams;
}

}  // namespace

double bleu_bruteforce(const Tokens& candidate, const std::vector<Tokens>& references, int max_n) {
    if (references.empty()) throw std::invalid_argument("bleu_bruteforce: empty reference list");
    const int c = static_cast<int>(candidate.size());
    if (c == 0) return 0.0;

    double log_prec_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        int64_t clipped = 0, total = 0;
        for (size_t i = 0; i + static_cast<size_t>(n) <= candidate.size(); ++i) {
            ++total;
            if (!first_occurrence(candidate, i, n)) continue;
            const int cand_count = count_gram(candidate, candidate, i, n);
            int ref_max = 0;
            for (const Tokens& r : references) ref_max = std::max(ref_max, count_gram(r, candidate, i, n));
            clipped += std::min(cand_count, ref_max);
        }
        if (total == 0 || clipped == 0) return 0.0;
        log_prec_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
    }

    int r_best = static_cast<int>(references[0].size());
    for (const Tokens& r : references) {
        const int rl = static_cast<int>(r.size());
        if (std::abs(rl - c) < std::abs(r_best - c) || (std::abs(rl - c) == std::abs(r_best - c) && rl < r_best))
            r_best = rl;
    }
    const double bp = c < r_best ? std::exp(1.0 - static_cast<double>(r_best) / c) : 1.0;
    return bp * std::exp(log_prec_sum / max_n);
}

double cider_d_bruteforce(const Tokens& candidate, const std::vector<Tokens>& references,
                          const std::vector<std::vector<Tokens>>& corpus) {
    if (corpus.size() < 2) throw std::invalid_argument("cider_d_bruteforce: corpus must have >= 2 documents");
    if (references.empty()) throw std::invalid_argument("cider_d_bruteforce: empty reference list");
    constexpr int kMaxN = 4;
    constexpr double kSigma = 6.0;
    if (candidate.empty()) return 0.0;

    const double log_docs = std::log(static_cast<double>(corpus.size()));
    auto doc_freq = [&corpus](const Tokens& gram_src, size_t pos, int n) {
        int df = 0;
        for (const std::vector<Tokens>& doc : corpus) {
            bool found = false;
            for (const Tokens& ref : doc)
                if (count_gram(ref, gram_src, pos, n) > 0) {
                    found = true;
                    break;
                }
            if (found) ++df;
        }
        return df;
    };
    auto idf_of = [&](const Tokens& gram_src, size_t pos, int n) {
        const int df = doc_freq(gram_src, pos, n);
        return log_docs - std::log(static_cast<double>(std::max(1, df)));
    };

    // tf-idf weight of a gram inside a sentence
    auto weight_in = [&](const Tokens& sentence, const Tokens& gram, int n) {
        const int tf = count_gram(sentence, gram, 0, n);
        return tf == 0 ? 0.0 : static_cast<double>(tf) * idf_of(gram, 0, n);
    };
    auto norm_of = [&](const Tokens& sentence, int n) {
        double acc = 0.0;
        for (const Tokens& gram : distinct_grams_sorted(sentence, n)) {
            const double w = weight_in(sentence, gram, n);
            acc += w * w;
        }
        return std::sqrt(acc);
    };

    std::vector<double> score(kMaxN, 0.0);
    for (const Tokens& ref : references) {
        const double delta = static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
        const double len_penalty = std::exp(-(delta * delta) / (2.0 * kSigma * kSigma));
        for (int n = 1; n <= kMaxN; ++n) {
            double dot = 0.0;
            for (const Tokens& gram : distinct_grams_sorted(candidate, n)) {
                const double wr = weight_in(ref, gram, n);
                if (wr == 0.0) continue;
                dot += std::min(weight_in(candidate, gram, n), wr) * wr;
            }
            double val = dot;
            const double nc = norm_of(candidate, n), nr = norm_of(ref, n);
            if (nc != 0.0 && nr != 0.0) val /= nc * nr;
            score[static_cast<size_t>(n - 1)] += val * len_penalty;
        }
    }
    double mean_over_n = 0.0;
    for (double s : score) mean_over_n += s;
    mean_over_n /= static_cast<double>(kMaxN);
    return 10.0 * mean_over_n / static_cast<double>(references.size());
}

MetricOraclePair metric_oracles(const Tokens& candidate, const std::vector<Tokens>& references,
                                const std::vector<std::vector<Tokens>>& corpus) {
    return {bleu_bruteforce(candidate, references, 4), cider_d_bruteforce(candidate, references, corpus)};
}

}  // namespace naic::oracle
