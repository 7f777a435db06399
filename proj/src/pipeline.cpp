#include "naic/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace naic::pipeline {

namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::string step_record(int64_t step, int epoch, double loss, double mean_reward, const std::string& baseline,
                        long reward_evals, double wall_ms) {
    json j{{"step", step}, {"epoch", epoch}, {"loss", loss}};
    if (std::isfinite(mean_reward)) j["mean_reward"] = mean_reward;
    else j["mean_reward"] = nullptr;
    j["baseline"] = baseline;
    j["reward_evals"] = reward_evals;
    j["wall_ms"] = wall_ms;
    return j.dump();
}

std::string epoch_record(int epoch, double mean_loss, double mean_reward, double lr) {
    json j{{"epoch_summary", epoch}, {"mean_loss", mean_loss}};
    if (std::isfinite(mean_reward)) j["mean_reward"] = mean_reward;
    else j["mean_reward"] = nullptr;
    j["lr"] = lr;
    return j.dump();
}

void check_finite_loss(double loss, const std::string& stage, int64_t step) {
    if (!std::isfinite(loss))
        throw std::runtime_error(stage + ": training diverged (non-finite loss at step " + std::to_string(step) +
                                 "); lower the learning rate or enable clipping");
}

}  // namespace

const std::vector<int>& LoadedData::split_indices(synth::Split s) const {
    switch (s) {
        case synth::Split::Train: return train_idx;
        case synth::Split::Val: return val_idx;
        case synth::Split::Test: return test_idx;
        default: throw std::invalid_argument("split_indices: no index list for this split");
    }
}

void index_data(LoadedData& data) {
    data.train_idx.clear();
    data.val_idx.clear();
    data.test_idx.clear();
    for (size_t i = 0; i < data.records.size(); ++i) {
        switch (data.records[i].split) {
            case synth::Split::Train: data.train_idx.push_back(static_cast<int>(i)); break;
            case synth::Split::Val: data.val_idx.push_back(static_cast<int>(i)); break;
            case synth::Split::Test: data.test_idx.push_back(static_cast<int>(i)); break;
            case synth::Split::Unlabeled: throw std::invalid_argument("index_data: labeled file contains unlabeled");
        }
    }
    std::vector<std::vector<metrics::Tokens>> corpus;
    for (int i : data.train_idx) corpus.push_back(data.records[static_cast<size_t>(i)].references);
    data.train_stats = metrics::build_corpus_stats(corpus);
}

LoadedData make_data(const RunConfig& cfg) {
    cfg.validate();
    LoadedData data;
    data.grammar = cfg.grammar;
    data.records = synth::generate_dataset(cfg.data.seed, {cfg.data.train, cfg.data.val, cfg.data.test}, cfg.grammar);
    data.unlabeled = synth::generate_unlabeled(cfg.data.seed + 1, cfg.data.unlabeled, cfg.grammar);
    index_data(data);
    return data;
}

// --- generic stage loops -------------------------------------------------------

namespace {

struct XeDataItem {
    const ImageFeatures* image;
    const std::vector<metrics::Tokens>* targets;  // one sampled per epoch
};

void run_xe_stage(Model& model, const std::vector<XeDataItem>& items, const StageOpt& opt, cmal::XeMode mode,
                  const std::string& stage, uint64_t seed, int threads, const LogFn& log,
                  ckpt::TrainState& state) {
    const int n = static_cast<int>(items.size());
    if (n == 0) throw std::invalid_argument(stage + ": no training items");
    cmal::AdamState adam;
    adam.t = state.adam_t;
    adam.m = state.adam_m;
    adam.v = state.adam_v;
    const Rng root = Rng(seed).fork(stage);

    for (int epoch = static_cast<int>(state.epoch); epoch < opt.epochs; ++epoch) {
        Rng perm_rng = root.fork("perm").fork(static_cast<uint64_t>(epoch));
        const std::vector<int> order = perm_rng.permutation(n);
        const cmal::AdamConfig adam_cfg = opt.adam_at_epoch(epoch);
        double epoch_loss = 0.0;
        int steps_in_epoch = 0;
        for (int start = 0; start < n; start += opt.batch_size) {
            const int end = std::min(n, start + opt.batch_size);
            std::vector<cmal::XeItem> batch;
            batch.reserve(static_cast<size_t>(end - start));
            for (int b = start; b < end; ++b) {
                const XeDataItem& item = items[static_cast<size_t>(order[static_cast<size_t>(b)])];
                Rng pick = root.fork("target").fork(static_cast<uint64_t>(epoch)).fork(
                    static_cast<uint64_t>(order[static_cast<size_t>(b)]));
                const size_t t = item.targets->size() == 1 ? 0 : static_cast<size_t>(pick.below(
                                     static_cast<int>(item.targets->size())));
                batch.push_back(cmal::XeItem{item.image, (*item.targets)[t]});
            }
            const cmal::StepStats stats = cmal::train_step_xe(model, batch, mode, adam, adam_cfg, threads);
            check_finite_loss(stats.loss, stage, state.step);
            epoch_loss += stats.loss * static_cast<double>(batch.size());
            ++steps_in_epoch;
            if (log)
                log(step_record(state.step, epoch, stats.loss, std::nan(""), "xe", 0, stats.wall_ms));
            state.step += 1;
        }
        (void)steps_in_epoch;
        if (log) log(epoch_record(epoch, epoch_loss / n, std::nan(""), adam_cfg.lr));
        state.epoch = epoch + 1;
    }
    state.adam_t = adam.t;
    state.adam_m = std::move(adam.m);
    state.adam_v = std::move(adam.v);
}

}  // namespace

Model train_teacher_model(const RunConfig& cfg, const LoadedData& data, uint64_t seed, int threads,
                          const LogFn& log, ckpt::TrainState* state, Model* resume_from) {
    const ModelConfig mc = cfg.model_config();
    Model model = resume_from ? std::move(*resume_from)
                              : Model(mc, init_parameters(mc, Rng(seed).fork("teacher-init").next_u64()));
    std::vector<XeDataItem> items;
    items.reserve(data.train_idx.size());
    for (int i : data.train_idx)
        items.push_back(XeDataItem{&data.records[static_cast<size_t>(i)].image,
                                   &data.records[static_cast<size_t>(i)].references});
    ckpt::TrainState local;
    ckpt::TrainState& st = state ? *state : local;
    run_xe_stage(model, items, cfg.teacher, cmal::XeMode::Autoregressive, "teacher", seed, threads, log, st);
    return model;
}

DistillOutput distill_all(const RunConfig& cfg, const Model& teacher, const LoadedData& data, int beam_width,
                          const std::string& source, int threads) {
    DistillOutput out;
    std::vector<const ImageFeatures*> labeled;
    for (int i : data.train_idx) labeled.push_back(&data.records[static_cast<size_t>(i)].image);
    out.labeled = synth::distill(teacher, labeled, beam_width, source, threads);
    std::vector<const ImageFeatures*> unlabeled;
    for (const ImageFeatures& img : data.unlabeled) unlabeled.push_back(&img);
    out.unlabeled = synth::distill(teacher, unlabeled, beam_width, source, threads);
    (void)cfg;
    return out;
}

Model pretrain_xe_model(const RunConfig& cfg, const LoadedData& data, const XeSpec& spec, uint64_t seed,
                        int threads, const LogFn& log, ckpt::TrainState* state, Model* resume_from) {
    const ModelConfig mc = cfg.model_config();
    Model model = [&]() {
        if (resume_from) return std::move(*resume_from);
        if (spec.weight_init) {
            if (!spec.teacher) throw std::invalid_argument("pretrain_xe: weight_init requires a teacher model");
            return Model(mc, init_from_teacher(spec.teacher->config(), spec.teacher->parameters(), mc));
        }
        return Model(mc, init_parameters(mc, Rng(seed).fork("xe-init").next_u64()));
    }();

    // Data wiring per the training recipe: the KD path trains on pseudo
    // captions (labeled + unlabeled images); the raw path trains on the real
    // references of labeled images only.
    std::vector<std::vector<metrics::Tokens>> target_store;
    std::vector<XeDataItem> items;
    if (spec.kd) {
        if (!spec.pseudo) throw std::invalid_argument("pretrain_xe: KD path requires pseudo captions");
        if (spec.pseudo->labeled.size() != data.train_idx.size())
            throw std::invalid_argument("pretrain_xe: pseudo captions misaligned with labeled training images");
        target_store.reserve(spec.pseudo->labeled.size() + spec.pseudo->unlabeled.size());
        for (size_t i = 0; i < data.train_idx.size(); ++i) {
            const synth::PseudoCaption& pc = spec.pseudo->labeled[i];
            if (pc.tokens.empty() || pc.tokens.back() != tokens::kPeriod || pc.source.empty())
                throw std::invalid_argument("pretrain_xe: invalid pseudo caption for labeled image");
            target_store.push_back({pc.tokens});
        }
        if (spec.include_unlabeled) {
            if (spec.pseudo->unlabeled.size() != data.unlabeled.size())
                throw std::invalid_argument("pretrain_xe: pseudo captions misaligned with unlabeled images");
            for (const synth::PseudoCaption& pc : spec.pseudo->unlabeled) {
                if (pc.tokens.empty() || pc.tokens.back() != tokens::kPeriod || pc.source.empty())
                    throw std::invalid_argument("pretrain_xe: invalid pseudo caption for unlabeled image");
                target_store.push_back({pc.tokens});
            }
        }
        size_t slot = 0;
        for (int i : data.train_idx)
            items.push_back(XeDataItem{&data.records[static_cast<size_t>(i)].image, &target_store[slot++]});
        if (spec.include_unlabeled)
            for (const ImageFeatures& img : data.unlabeled) items.push_back(XeDataItem{&img, &target_store[slot++]});
    } else {
        for (int i : data.train_idx) {
            const synth::DatasetRecord& rec = data.records[static_cast<size_t>(i)];
            if (rec.references.empty()) throw std::invalid_argument("pretrain_xe: record without references");
            items.push_back(XeDataItem{&rec.image, &rec.references});
        }
    }

    ckpt::TrainState local;
    ckpt::TrainState& st = state ? *state : local;
    run_xe_stage(model, items, cfg.xe, cmal::XeMode::NonAutoregressive, "xe", seed, threads, log, st);
    return model;
}

Model train_cmal_model(const RunConfig& cfg, const LoadedData& data, const Model& start,
                       const cmal::BaselineKind& baseline, uint64_t seed, int threads, const LogFn& log,
                       ckpt::TrainState* state, Model* resume_from) {
    Model model = resume_from ? std::move(*resume_from) : Model(start.config(), start.parameters());
    const int n = static_cast<int>(data.train_idx.size());
    if (n == 0) throw std::invalid_argument("train_cmal: no training items");
    // CMAL consumes the real references of labeled images.
    for (int i : data.train_idx) {
        const synth::DatasetRecord& rec = data.records[static_cast<size_t>(i)];
        if (rec.references.empty() || rec.references[0].back() != tokens::kPeriod)
            throw std::invalid_argument("train_cmal: labeled record without period-terminated references");
    }

    ckpt::TrainState local;
    ckpt::TrainState& st = state ? *state : local;
    cmal::AdamState adam;
    adam.t = st.adam_t;
    adam.m = st.adam_m;
    adam.v = st.adam_v;
    cmal::MovingAverageState ma{st.ma_value, st.ma_initialized};
    const Rng root = Rng(seed).fork("cmal");
    const metrics::MetricKind metric = cfg.metric_kind();
    const StageOpt& opt = cfg.cmal_stage;

    for (int epoch = static_cast<int>(st.epoch); epoch < opt.epochs; ++epoch) {
        Rng perm_rng = root.fork("perm").fork(static_cast<uint64_t>(epoch));
        const std::vector<int> order = perm_rng.permutation(n);
        const cmal::AdamConfig adam_cfg = opt.adam_at_epoch(epoch);
        double epoch_loss = 0.0, epoch_reward = 0.0;
        int count = 0;
        for (int startb = 0; startb < n; startb += opt.batch_size) {
            const int end = std::min(n, startb + opt.batch_size);
            std::vector<cmal::CmalItem> batch;
            for (int b = startb; b < end; ++b) {
                const synth::DatasetRecord& rec =
                    data.records[static_cast<size_t>(data.train_idx[static_cast<size_t>(order[static_cast<size_t>(b)])])];
                batch.push_back(cmal::CmalItem{&rec.image, &rec.references});
            }
            const Rng step_rng = root.fork("step").fork(static_cast<uint64_t>(st.step));
            const cmal::StepStats stats = cmal::train_step_cmal(model, batch, data.train_stats, metric, baseline,
                                                                ma, adam, adam_cfg, step_rng, threads);
            check_finite_loss(stats.loss, "cmal", st.step);
            epoch_loss += stats.loss * static_cast<double>(batch.size());
            epoch_reward += stats.mean_reward * static_cast<double>(batch.size());
            count += static_cast<int>(batch.size());
            if (log)
                log(step_record(st.step, epoch, stats.loss, stats.mean_reward, baseline.name(), stats.reward_evals,
                                stats.wall_ms));
            st.step += 1;
        }
        if (log) log(epoch_record(epoch, epoch_loss / count, epoch_reward / count, adam_cfg.lr));
        st.epoch = epoch + 1;
    }
    st.adam_t = adam.t;
    st.adam_m = std::move(adam.m);
    st.adam_v = std::move(adam.v);
    st.ma_value = ma.value;
    st.ma_initialized = ma.initialized;
    return model;
}

// --- evaluation ------------------------------------------------------------------

EvalReport evaluate_model(const Model& model, const LoadedData& data, synth::Split split, int threads) {
    const std::vector<int>& idx = data.split_indices(split);
    if (idx.empty()) throw std::invalid_argument("evaluate: split '" + synth::split_name(split) + "' is empty");

    const int n = static_cast<int>(idx.size());
    std::vector<metrics::Tokens> captions(static_cast<size_t>(n));
    cmal::parallel_for(n, threads, [&](int i) {
        const synth::DatasetRecord& rec = data.records[static_cast<size_t>(idx[static_cast<size_t>(i)])];
        const Tensor ctx = model.encode(rec.image);
        const DecoderLogits logits = model.decode_na(ctx);
        captions[static_cast<size_t>(i)] = truncate_at_period(greedy_joint(logits));
    });

    std::vector<std::vector<metrics::Tokens>> corpus;
    corpus.reserve(idx.size());
    for (int i : idx) corpus.push_back(data.records[static_cast<size_t>(i)].references);
    const metrics::CiderCorpusStats stats = metrics::build_corpus_stats(corpus);

    EvalReport report;
    report.count = n;
    for (int i = 0; i < n; ++i) {
        const auto& refs = data.records[static_cast<size_t>(idx[static_cast<size_t>(i)])].references;
        const metrics::Tokens& cap = captions[static_cast<size_t>(i)];
        report.bleu1 += cap.empty() ? 0.0 : metrics::bleu(cap, refs, 1);
        report.bleu4 += cap.empty() ? 0.0 : metrics::bleu(cap, refs, 4);
        report.cider_d += cap.empty() ? 0.0 : metrics::cider_d(cap, refs, stats);
    }
    report.bleu1 /= n;
    report.bleu4 /= n;
    report.cider_d /= n;
    report.dup_rate = metrics::adjacent_duplicate_rate(captions);
    return report;
}

LatencyReport bench_latency(const Model& teacher, const Model& student, const LoadedData& data, int num_images,
                            int beam_width, int warmup) {
    const std::vector<int>& idx = data.test_idx;
    if (idx.empty()) throw std::invalid_argument("bench_latency: test split is empty");
    const int n = std::min<int>(num_images, static_cast<int>(idx.size()));
    const int max_len = teacher.config().num_agents;

    LatencyReport report;
    report.images = n;
    report.beam_width = beam_width;

    auto image_at = [&](int i) -> const ImageFeatures& {
        return data.records[static_cast<size_t>(idx[static_cast<size_t>(i % static_cast<int>(idx.size()))])].image;
    };

    for (int w = 0; w < warmup; ++w) {
        const ImageFeatures& img = image_at(w);
        (void)student.decode_na(student.encode(img));
        (void)teacher.decode_ar_greedy(teacher.encode(img), max_len);
        (void)teacher.decode_ar_beam(teacher.encode(img), beam_width, max_len);
    }

    student.reset_counters();
    auto t0 = Clock::now();
    for (int i = 0; i < n; ++i) {
        const DecoderLogits logits = student.decode_na(student.encode(image_at(i)));
        (void)truncate_at_period(greedy_joint(logits));
    }
    report.na_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / n;
    report.na_fwd_per_image = static_cast<double>(student.counters().decoder_forwards) / n;

    teacher.reset_counters();
    t0 = Clock::now();
    for (int i = 0; i < n; ++i) (void)teacher.decode_ar_greedy(teacher.encode(image_at(i)), max_len);
    report.ar_greedy_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / n;
    report.ar_greedy_fwd_per_image = static_cast<double>(teacher.counters().decoder_forwards) / n;

    teacher.reset_counters();
    t0 = Clock::now();
    for (int i = 0; i < n; ++i) (void)teacher.decode_ar_beam(teacher.encode(image_at(i)), beam_width, max_len);
    report.ar_beam_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / n;
    report.ar_beam_fwd_per_image = static_cast<double>(teacher.counters().decoder_forwards) / n;

    report.speedup_vs_greedy = report.ar_greedy_ms / report.na_ms;
    report.speedup_vs_beam = report.ar_beam_ms / report.na_ms;
    return report;
}

// --- oracle check ----------------------------------------------------------------

OracleCheckReport oracle_check(uint64_t seed, bool mutate_advantage_sign, int threads) {
    OracleCheckReport report;
    report.pass = true;
    auto note = [&](const std::string& line) { report.lines.push_back(line); };
    auto require = [&](bool ok, const std::string& what) {
        note(std::string(ok ? "[ok]   " : "[FAIL] ") + what);
        report.pass = report.pass && ok;
    };

    // reward over token ids {0,2,3} with the period at id 1
    const std::vector<std::vector<metrics::Tokens>> corpus = {
        {{2, 3, 1}, {3, 2, 1}}, {{2, 2, 1}}, {{3, 1}}, {{0, 2, 3, 1}}};
    const metrics::CiderCorpusStats stats = metrics::build_corpus_stats(corpus);
    const std::vector<metrics::Tokens> refs = {{2, 3, 1}, {3, 2, 1}};
    cmal::RewardFn reward = [&](const std::vector<int>& joint) {
        return metrics::team_reward(joint, refs, stats, metrics::MetricKind::CiderD);
    };

    for (int num_agents : {2, 3}) {
        ModelConfig mc;
        mc.num_layers = 1;
        mc.model_dim = 16;
        mc.num_heads = 2;
        mc.ffn_dim = 32;
        mc.vocab_size = 4;
        mc.num_agents = num_agents;
        mc.max_regions = 2;
        mc.feature_dim = 4;
        const Model model(mc, init_parameters(mc, Rng(seed).fork("oracle-model").fork(num_agents).next_u64()));
        Rng img_rng = Rng(seed).fork("oracle-image").fork(static_cast<uint64_t>(num_agents));
        const ImageFeatures image{Tensor::randn({mc.max_regions, mc.feature_dim}, img_rng, 1.0)};

        oracle::EnumerationOptions opts;
        opts.num_threads = threads;
        opts.mutate_advantage_sign = mutate_advantage_sign;
        const auto t0 = Clock::now();

        for (const auto& [label, kind] :
             std::vector<std::pair<std::string, cmal::BaselineKind>>{
                 {"cf-exact", cmal::BaselineKind::counterfactual(mc.vocab_size)},
                 {"cf-top2", cmal::BaselineKind::counterfactual(2)},
                 {"sc", cmal::BaselineKind::self_critical()}}) {
            const oracle::EnumerationReport r = oracle::compare_expected_gradients(
                model, image, reward, cmal::BaselineKind::none(), kind, opts);
            require(r.prob_mass_error <= 1e-9,
                    "N=" + std::to_string(num_agents) + " " + label + " probability mass error " +
                        std::to_string(r.prob_mass_error) + " <= 1e-9");
            require(r.max_rel_deviation < 1e-6,
                    "N=" + std::to_string(num_agents) + " " + label + " unbiasedness: max relative deviation " +
                        std::to_string(r.max_rel_deviation) + " < 1e-6 over " + std::to_string(r.joint_actions) +
                        " joint actions");
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        note("[info] N=" + std::to_string(num_agents) + " enumeration took " + std::to_string(secs) + " s");
    }
    return report;
}

// --- run-directory layout ----------------------------------------------------------

std::string dataset_path(const std::string& dir) { return dir + "/dataset.jsonl"; }
std::string unlabeled_path(const std::string& dir) { return dir + "/unlabeled.jsonl"; }
std::string teacher_ckpt_path(const std::string& dir) { return dir + "/teacher.ckpt"; }
std::string pseudo_path(const std::string& dir) { return dir + "/pseudo_captions.jsonl"; }
std::string xe_ckpt_path(const std::string& dir) { return dir + "/naic_xe.ckpt"; }
std::string cmal_ckpt_path(const std::string& dir) { return dir + "/naic_cmal.ckpt"; }
std::string state_path(const std::string& ckpt_path) { return ckpt_path + ".state"; }
std::string log_path(const std::string& dir, const std::string& stage) { return dir + "/" + stage + ".log"; }

LoadedData load_data_files(const RunConfig& cfg, const std::string& dir) {
    LoadedData data;
    auto [grammar, records] = synth::read_dataset(dataset_path(dir));
    if (!(grammar == cfg.grammar))
        throw std::invalid_argument("load_data: dataset grammar does not match the config grammar");
    data.grammar = grammar;
    data.records = std::move(records);
    auto [ug, urecords] = synth::read_dataset(unlabeled_path(dir));
    if (!(ug == cfg.grammar)) throw std::invalid_argument("load_data: unlabeled grammar mismatch");
    for (synth::DatasetRecord& rec : urecords) {
        if (rec.split != synth::Split::Unlabeled || !rec.references.empty())
            throw std::invalid_argument("load_data: unlabeled file must hold reference-free unlabeled records");
        data.unlabeled.push_back(std::move(rec.image));
    }
    index_data(data);
    return data;
}

}  // namespace naic::pipeline
