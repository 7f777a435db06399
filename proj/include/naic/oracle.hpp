#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "naic/cmal.hpp"
#include "naic/metrics.hpp"
#include "naic/model.hpp"

namespace naic::oracle {

// Brute-force verification harness. Everything here recomputes from the
// definitions: probabilities from its own softmax, metrics by positional
// n-gram scanning. The production model/estimator code appears only as the
// object under test (the per-sample gradient inside the enumeration).

struct EnumerationOptions {
    int64_t max_joint_actions = 1'000'000;
    // Test hook: flips the sign of the advantages fed to the estimator so a
    // deliberately broken estimator is seen to fail the unbiasedness check.
    bool mutate_advantage_sign = false;
    int num_threads = 1;
};

// Eq. 4 expectation of the per-sample estimator gradient, computed exactly by
// enumerating all |U|^N joint actions weighted by their joint probability.
// Rejects configs with |U|^N beyond max_joint_actions and moving-average
// baselines (no reward history exists under enumeration).
GradMap exact_expected_gradient(const Model& model, const ImageFeatures& image, const cmal::RewardFn& reward,
                                const cmal::BaselineKind& baseline, const EnumerationOptions& opts = {});

struct EnumerationReport {
    std::string config_summary;
    GradMap expected_a;  // estimator with baseline_a
    GradMap expected_b;  // estimator with baseline_b
    double max_abs_deviation = 0.0;
    double max_rel_deviation = 0.0;  // denominator max(1e-8, |coordinate of a|)
    double prob_mass_error = 0.0;    // |sum_u P(u) - 1|
    int64_t joint_actions = 0;
};

// Runs the enumeration for two baselines over the same model and reward and
// reports per-coordinate deviations. mutate_advantage_sign applies to the
// second estimator only.
EnumerationReport compare_expected_gradients(const Model& model, const ImageFeatures& image,
                                             const cmal::RewardFn& reward, const cmal::BaselineKind& baseline_a,
                                             const cmal::BaselineKind& baseline_b,
                                             const EnumerationOptions& opts = {});

// Expected gradient of the surrogate loss at the logit layer, straight from
// the definition (no autodiff): sum_u P(u) A_a(u) (pi_a - onehot(u_a)).
// Small enough for hand verification on 2-token policies.
Tensor expected_logit_gradient(const Tensor& probs, const cmal::RewardFn& reward,
                               const cmal::BaselineKind& baseline);

struct VarianceSummary {
    double median = 0.0;
    double mean = 0.0;
    double max = 0.0;
    int64_t num_samples = 0;
    int64_t num_coords = 0;
};

// Unbiased per-coordinate sample variance of the estimator gradient under
// u ~ pi, summarized over all parameter coordinates. The decoder forward runs
// once; samples reuse the tape and differ only in the loss head.
VarianceSummary estimator_variance(const Model& model, const ImageFeatures& image, const cmal::RewardFn& reward,
                                   const cmal::BaselineKind& baseline, int num_samples, uint64_t seed,
                                   int num_threads = 1);

// --- reference metric implementations (independent code path) ----------------

double bleu_bruteforce(const metrics::Tokens& candidate, const std::vector<metrics::Tokens>& references, int max_n);

// Builds its own document frequencies from the raw corpus.
double cider_d_bruteforce(const metrics::Tokens& candidate, const std::vector<metrics::Tokens>& references,
                          const std::vector<std::vector<metrics::Tokens>>& corpus);

struct MetricOraclePair {
    double bleu = 0.0;
    double cider_d = 0.0;
};
MetricOraclePair metric_oracles(const metrics::Tokens& candidate, const std::vector<metrics::Tokens>& references,
                                const std::vector<std::vector<metrics::Tokens>>& corpus);

}  // namespace naic::oracle
