#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "naic/graph.hpp"
#include "naic/metrics.hpp"
#include "naic/model.hpp"

namespace naic::cmal {

// Reward baseline used by the policy-gradient estimator.
struct BaselineKind {
    enum class Type { None, MovingAverage, SelfCritical, Counterfactual };
    Type type = Type::Counterfactual;
    double decay = 0.9;  // MovingAverage only; in (0, 1)
    int k = 2;           // Counterfactual only; in [1, vocab]

    static BaselineKind none() { return {Type::None, 0.9, 2}; }
    static BaselineKind moving_average(double decay) { return {Type::MovingAverage, decay, 2}; }
    static BaselineKind self_critical() { return {Type::SelfCritical, 0.9, 2}; }
    static BaselineKind counterfactual(int k) { return {Type::Counterfactual, 0.9, k}; }
    std::string name() const;
    static BaselineKind parse(const std::string& name, int k, double decay);
};

// Team reward of a full joint action (pre-truncation tokens).
using RewardFn = std::function<double(const std::vector<int>&)>;

// Memoizes team_reward by truncated caption: replacements after the first
// period cannot change the reward. calls() counts logical reward
// evaluations, misses() the actual metric computations.
class CachedReward {
public:
    CachedReward(const std::vector<metrics::Tokens>& references, const metrics::CiderCorpusStats& stats,
                 metrics::MetricKind kind)
        : refs_(&references), stats_(&stats), kind_(kind) {}

    double operator()(const std::vector<int>& joint);
    long calls() const { return calls_; }
    long misses() const { return misses_; }
    RewardFn fn() {
        return [this](const std::vector<int>& joint) { return (*this)(joint); };
    }

private:
    const std::vector<metrics::Tokens>* refs_;
    const metrics::CiderCorpusStats* stats_;
    metrics::MetricKind kind_;
    std::unordered_map<std::string, double> cache_;
    long calls_ = 0;
    long misses_ = 0;
};

// --- baselines --------------------------------------------------------------
// All take the row-stochastic policy matrix (num_agents x vocab) and reject
// rows whose probabilities do not sum to 1 within 1e-9.

// Eq. 9: B_a = sum_{u'} pi_a(u') R([u_{-a}, u']); |U| reward evaluations per
// agent, evaluated in ascending token order and normalized by the summed row
// mass (a no-op up to the 1e-9 row-sum tolerance) so that the top-k form with
// k = |U| reproduces it bit-for-bit.
std::vector<double> exact_counterfactual_baseline(const Tensor& probs, const std::vector<int>& joint,
                                                  const RewardFn& reward);

// Eq. 10: the same marginal restricted to the k most probable tokens of each
// agent, with the selected probabilities renormalized. Ties at the k-th rank
// break toward the lowest token id. Exactly num_agents * k reward evaluations.
std::vector<double> topk_counterfactual_baseline(const Tensor& probs, const std::vector<int>& joint,
                                                 const RewardFn& reward, int k);

// Reward of the all-greedy joint action, broadcast to every agent.
std::vector<double> self_critical_baseline(const Tensor& probs, const RewardFn& reward);

struct MovingAverageState {
    double value = 0.0;
    bool initialized = false;
};

// Baseline the state provides before seeing the current batch (0 until the
// first update).
double ma_baseline(const MovingAverageState& state);

// Folds the batch mean reward into the state; returns the pre-update value,
// which is the baseline that applied to the batch just scored.
double moving_average_update(MovingAverageState& state, double batch_mean_reward, double decay);

// Eq. 7: A_a = R(u) - B_a.
std::vector<double> advantages(double team_reward, const std::vector<double>& baselines);

// --- losses -----------------------------------------------------------------

// Pads a caption (which ends with the period token) with kPad up to length n.
std::vector<int> pad_caption(const metrics::Tokens& caption, int n);

// 1.0 for positions up to and including the first period, 0.0 after; all 1.0
// when no period is present.
std::vector<double> xe_supervision_weights(const std::vector<int>& target_padded);

// Eq. 3 over the supervised positions of a padded target.
int xe_loss_g(Graph& g, int logits_node, const std::vector<int>& target_padded);

// Eq. 8 surrogate: loss = -sum_a A_a log pi_a(u_a). Advantages enter as
// constants; no gradient flows through rewards or baselines, so the loss
// gradient is the negated estimator of Eq. 8.
int surrogate_loss_g(Graph& g, int logits_node, const std::vector<int>& joint,
                     const std::vector<double>& advantages);

// --- optimizer ---------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
};

struct AdamState {
    int64_t t = 0;
    Parameters m;
    Parameters v;
};

// One Adam update from (possibly clipped) gradients; returns the pre-clip
// global gradient norm.
double adam_step(Parameters& params, const GradMap& grads, AdamState& state, const AdamConfig& cfg);

// --- training steps -----------------------------------------------------------

struct StepStats {
    double loss = 0.0;
    double mean_reward = 0.0;
    double mean_abs_advantage = 0.0;
    long reward_evals = 0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

enum class XeMode { NonAutoregressive, Autoregressive };

struct XeItem {
    const ImageFeatures* image;
    metrics::Tokens target;  // ends with period
};

StepStats train_step_xe(Model& model, const std::vector<XeItem>& batch, XeMode mode, AdamState& adam,
                        const AdamConfig& cfg, int num_threads);

struct CmalItem {
    const ImageFeatures* image;
    const std::vector<metrics::Tokens>* references;
};

// One sampled joint action per image; counterfactual/self-critical/moving-
// average/no baseline; detached advantages; Adam step on the batch-mean
// gradient. Deterministic for a fixed rng regardless of num_threads.
StepStats train_step_cmal(Model& model, const std::vector<CmalItem>& batch,
                          const metrics::CiderCorpusStats& stats, metrics::MetricKind metric,
                          const BaselineKind& baseline, MovingAverageState& ma_state, AdamState& adam,
                          const AdamConfig& cfg, const Rng& rng, int num_threads);

// Fixed-order parallel map helper shared by the train steps and the oracle.
void parallel_for(int n, int num_threads, const std::function<void(int)>& fn);

}  // namespace naic::cmal
