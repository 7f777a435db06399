#include "naic/cmal.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace naic::cmal {

std::string BaselineKind::name() const {
    switch (type) {
        case Type::None: return "none";
        case Type::MovingAverage: return "ma";
        case Type::SelfCritical: return "sc";
        case Type::Counterfactual: return "cf";
    }
    return "?";
}

BaselineKind BaselineKind::parse(const std::string& name, int k, double decay) {
    BaselineKind b;
    if (name == "none") b.type = Type::None;
    else if (name == "ma") b.type = Type::MovingAverage;
    else if (name == "sc") b.type = Type::SelfCritical;
    else if (name == "cf") b.type = Type::Counterfactual;
    else throw std::invalid_argument("baseline must be one of none|ma|sc|cf, got '" + name + "'");
    if (b.type == Type::MovingAverage && !(decay > 0.0 && decay < 1.0))
        throw std::invalid_argument("moving-average decay must be in (0, 1)");
    if (b.type == Type::Counterfactual && k < 1) throw std::invalid_argument("top-k must be >= 1");
    b.decay = decay;
    b.k = k;
    return b;
}

double CachedReward::operator()(const std::vector<int>& joint) {
    ++calls_;
    const std::vector<int> caption = truncate_at_period(joint);
    std::string key(reinterpret_cast<const char*>(caption.data()), caption.size() * sizeof(int));
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ++misses_;
    const double r = metrics::team_reward(joint, *refs_, *stats_, kind_);
    cache_.emplace(std::move(key), r);
    return r;
}

namespace {

void check_policy_rows(const Tensor& probs, const char* who) {
    if (probs.shape.size() != 2) throw std::invalid_argument(std::string(who) + ": policy matrix must be 2-D");
    for (int a = 0; a < probs.rows(); ++a) {
        double sum = 0.0;
        for (int u = 0; u < probs.cols(); ++u) sum += probs.at(a, u);
        if (std::fabs(sum - 1.0) > 1e-9)
            throw std::invalid_argument(std::string(who) + ": policy row " + std::to_string(a) +
                                        " is not normalized (sum " + std::to_string(sum) + ")");
    }
}

// Shared marginalization core: weighted reward over the given token set for
// one agent, tokens visited in ascending id order, normalized by the visited
// probability mass. exact == topk with the full vocabulary selected, by
// construction bit-for-bit.
double marginal_over(const Tensor& probs, int agent, const std::vector<int>& token_set,
                     std::vector<int>& scratch_joint, const RewardFn& reward) {
    double mass = 0.0;
    double acc = 0.0;
    const int original = scratch_joint[static_cast<size_t>(agent)];
    for (int tok : token_set) {
        const double p = probs.at(agent, tok);
        scratch_joint[static_cast<size_t>(agent)] = tok;
        acc += p * reward(scratch_joint);
        mass += p;
    }
    scratch_joint[static_cast<size_t>(agent)] = original;
    return acc / mass;
}

}  // namespace

std::vector<double> exact_counterfactual_baseline(const Tensor& probs, const std::vector<int>& joint,
                                                  const RewardFn& reward) {
    check_policy_rows(probs, "exact_counterfactual_baseline");
    if (static_cast<int>(joint.size()) != probs.rows())
        throw std::invalid_argument("exact_counterfactual_baseline: joint size vs policy rows mismatch");
    std::vector<int> all(static_cast<size_t>(probs.cols()));
    std::iota(all.begin(), all.end(), 0);
    std::vector<int> scratch = joint;
    std::vector<double> out(joint.size());
    for (int a = 0; a < probs.rows(); ++a) out[static_cast<size_t>(a)] = marginal_over(probs, a, all, scratch, reward);
    return out;
}

std::vector<double> topk_counterfactual_baseline(const Tensor& probs, const std::vector<int>& joint,
                                                 const RewardFn& reward, int k) {
    check_policy_rows(probs, "topk_counterfactual_baseline");
    if (static_cast<int>(joint.size()) != probs.rows())
        throw std::invalid_argument("topk_counterfactual_baseline: joint size vs policy rows mismatch");
    if (k < 1 || k > probs.cols())
        throw std::invalid_argument("topk_counterfactual_baseline: k = " + std::to_string(k) +
                                    " out of range [1, " + std::to_string(probs.cols()) + "]");
    std::vector<int> order(static_cast<size_t>(probs.cols()));
    std::vector<int> selected(static_cast<size_t>(k));
    std::vector<int> scratch = joint;
    std::vector<double> out(joint.size());
    for (int a = 0; a < probs.rows(); ++a) {
        std::iota(order.begin(), order.end(), 0);
        // highest probability first; ties at any rank resolved to lowest id
        std::stable_sort(order.begin(), order.end(),
                         [&](int x, int y) { return probs.at(a, x) > probs.at(a, y); });
        std::copy(order.begin(), order.begin() + k, selected.begin());
        std::sort(selected.begin(), selected.end());  // canonical evaluation order
        out[static_cast<size_t>(a)] = marginal_over(probs, a, selected, scratch, reward);
    }
    return out;
}

std::vector<double> self_critical_baseline(const Tensor& probs, const RewardFn& reward) {
    check_policy_rows(probs, "self_critical_baseline");
    std::vector<int> greedy(static_cast<size_t>(probs.rows()));
    for (int a = 0; a < probs.rows(); ++a) {
        int best = 0;
        for (int u = 1; u < probs.cols(); ++u)
            if (probs.at(a, u) > probs.at(a, best)) best = u;
        greedy[static_cast<size_t>(a)] = best;
    }
    return std::vector<double>(static_cast<size_t>(probs.rows()), reward(greedy));
}

double ma_baseline(const MovingAverageState& state) { return state.initialized ? state.value : 0.0; }

double moving_average_update(MovingAverageState& state, double batch_mean_reward, double decay) {
    if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("moving_average_update: decay must be in (0, 1)");
    const double baseline = ma_baseline(state);
    if (!state.initialized) {
        state.value = batch_mean_reward;
        state.initialized = true;
    } else {
        state.value = decay * state.value + (1.0 - decay) * batch_mean_reward;
    }
    return baseline;
}

std::vector<double> advantages(double team_reward, const std::vector<double>& baselines) {
    std::vector<double> out(baselines.size());
    for (size_t a = 0; a < baselines.size(); ++a) {
        out[a] = team_reward - baselines[a];
        if (!std::isfinite(out[a])) throw std::invalid_argument("advantages: non-finite value");
    }
    return out;
}

std::vector<int> pad_caption(const metrics::Tokens& caption, int n) {
    if (static_cast<int>(caption.size()) > n)
        throw std::invalid_argument("pad_caption: caption length " + std::to_string(caption.size()) +
                                    " exceeds " + std::to_string(n));
    std::vector<int> out = caption;
    out.resize(static_cast<size_t>(n), tokens::kPad);
    return out;
}

std::vector<double> xe_supervision_weights(const std::vector<int>& target_padded) {
    std::vector<double> w(target_padded.size(), 1.0);
    for (size_t i = 0; i < target_padded.size(); ++i) {
        if (target_padded[i] == tokens::kPeriod) {
            for (size_t j = i + 1; j < w.size(); ++j) w[j] = 0.0;
            break;
        }
    }
    return w;
}

int xe_loss_g(Graph& g, int logits_node, const std::vector<int>& target_padded) {
    const Tensor& logits = g.value(logits_node);
    for (int t : target_padded)
        if (t < 0 || t >= logits.cols())
            throw std::invalid_argument("xe_loss: target id " + std::to_string(t) + " outside vocabulary of size " +
                                        std::to_string(logits.cols()));
    return g.xent_logits(logits_node, target_padded, xe_supervision_weights(target_padded));
}

int surrogate_loss_g(Graph& g, int logits_node, const std::vector<int>& joint,
                     const std::vector<double>& advantages) {
    if (joint.size() != advantages.size())
        throw std::invalid_argument("surrogate_loss: joint/advantage size mismatch");
    return g.xent_logits(logits_node, joint, advantages);
}

double adam_step(Parameters& params, const GradMap& grads, AdamState& state, const AdamConfig& cfg) {
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double x : g.data) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    const double scale = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    if (state.t == 0) {
        for (const auto& [name, p] : params) {
            state.m[name] = Tensor::zeros(p.shape);
            state.v[name] = Tensor::zeros(p.shape);
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        Tensor& m = state.m.at(name);
        Tensor& v = state.v.at(name);
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = g.data[i] * scale;
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    return norm;
}

void parallel_for(int n, int num_threads, const std::function<void(int)>& fn) {
    const int workers = std::max(1, std::min(num_threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (std::thread& t : pool) t.join();
}

namespace {

void accumulate(GradMap& total, const GradMap& part) {
    if (total.empty()) {
        total = part;
        return;
    }
    for (auto& [name, t] : total) {
        const Tensor& p = part.at(name);
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += p.data[i];
    }
}

void scale_grads(GradMap& grads, double s) {
    for (auto& [name, t] : grads)
        for (double& x : t.data) x *= s;
}

}  // namespace

StepStats train_step_xe(Model& model, const std::vector<XeItem>& batch, XeMode mode, AdamState& adam,
                        const AdamConfig& cfg, int num_threads) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw std::invalid_argument("train_step_xe: empty batch");
    std::vector<GradMap> grads(static_cast<size_t>(n));
    std::vector<double> losses(static_cast<size_t>(n));

    for (const XeItem& item : batch)
        if (item.target.empty()) throw std::invalid_argument("train_step_xe: empty target caption");

    parallel_for(n, num_threads, [&](int i) {
        const XeItem& item = batch[static_cast<size_t>(i)];
        Graph g;
        const int ctx = model.encode_g(g, *item.image);
        int loss;
        if (mode == XeMode::NonAutoregressive) {
            const int states = model.decoder_states_g(g, ctx, model.na_decoder_inputs_g(g), false);
            const int logits = model.logits_g(g, states);
            loss = xe_loss_g(g, logits, pad_caption(item.target, model.config().num_agents));
        } else {
            std::vector<int> prev = {tokens::kBos};
            prev.insert(prev.end(), item.target.begin(), item.target.end() - 1);
            const int states = model.decoder_states_g(g, ctx, model.ar_decoder_inputs_g(g, prev), true);
            const int logits = model.logits_g(g, states);
            loss = g.xent_logits(logits, item.target);
        }
        losses[static_cast<size_t>(i)] = g.value(loss).data[0];
        grads[static_cast<size_t>(i)] = g.backward(loss);
    });

    GradMap total;
    for (const GradMap& g : grads) accumulate(total, g);  // fixed sample order
    scale_grads(total, 1.0 / n);

    StepStats stats;
    stats.grad_norm = adam_step(model.parameters(), total, adam, cfg);
    for (double l : losses) stats.loss += l;
    stats.loss /= n;
    stats.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return stats;
}

StepStats train_step_cmal(Model& model, const std::vector<CmalItem>& batch,
                          const metrics::CiderCorpusStats& stats_corpus, metrics::MetricKind metric,
                          const BaselineKind& baseline, MovingAverageState& ma_state, AdamState& adam,
                          const AdamConfig& cfg, const Rng& rng, int num_threads) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = static_cast<int>(batch.size());
    if (n == 0) throw std::invalid_argument("train_step_cmal: empty batch");

    const double ma_value = ma_baseline(ma_state);  // pre-update value for the whole batch
    std::vector<GradMap> grads(static_cast<size_t>(n));
    std::vector<double> losses(static_cast<size_t>(n));
    std::vector<double> rewards(static_cast<size_t>(n));
    std::vector<double> mean_abs_adv(static_cast<size_t>(n));
    std::vector<long> evals(static_cast<size_t>(n));

    parallel_for(n, num_threads, [&](int i) {
        const CmalItem& item = batch[static_cast<size_t>(i)];
        Graph g;
        const int ctx = model.encode_g(g, *item.image);
        const int states = model.decoder_states_g(g, ctx, model.na_decoder_inputs_g(g), false);
        const int logits_node = model.logits_g(g, states);
        const DecoderLogits logits{g.value(logits_node), g.value(states)};
        const Tensor probs = kernels::softmax_rows(logits.logits);

        Rng sample_rng = rng.fork(static_cast<uint64_t>(i));
        const std::vector<int> joint = sample_joint(logits, sample_rng);

        CachedReward reward(*item.references, stats_corpus, metric);
        RewardFn fn = reward.fn();
        const double r = fn(joint);

        std::vector<double> b;
        switch (baseline.type) {
            case BaselineKind::Type::None: b.assign(joint.size(), 0.0); break;
            case BaselineKind::Type::MovingAverage: b.assign(joint.size(), ma_value); break;
            case BaselineKind::Type::SelfCritical: b = self_critical_baseline(probs, fn); break;
            case BaselineKind::Type::Counterfactual:
                b = topk_counterfactual_baseline(probs, joint, fn, baseline.k);
                break;
        }
        const std::vector<double> adv = advantages(r, b);

        const int loss = surrogate_loss_g(g, logits_node, joint, adv);
        losses[static_cast<size_t>(i)] = g.value(loss).data[0];
        grads[static_cast<size_t>(i)] = g.backward(loss);
        rewards[static_cast<size_t>(i)] = r;
        evals[static_cast<size_t>(i)] = reward.calls();
        double abs_sum = 0.0;
        for (double a : adv) abs_sum += std::fabs(a);
        mean_abs_adv[static_cast<size_t>(i)] = abs_sum / static_cast<double>(adv.size());
    });

    GradMap total;
    for (const GradMap& g : grads) accumulate(total, g);
    scale_grads(total, 1.0 / n);

    StepStats out;
    out.grad_norm = adam_step(model.parameters(), total, adam, cfg);
    for (int i = 0; i < n; ++i) {
        out.loss += losses[static_cast<size_t>(i)];
        out.mean_reward += rewards[static_cast<size_t>(i)];
        out.mean_abs_advantage += mean_abs_adv[static_cast<size_t>(i)];
        out.reward_evals += evals[static_cast<size_t>(i)];
    }
    out.loss /= n;
    out.mean_reward /= n;
    out.mean_abs_advantage /= n;
    if (baseline.type == BaselineKind::Type::MovingAverage)
        moving_average_update(ma_state, out.mean_reward, baseline.decay);
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace naic::cmal
