// Command-line operator surface for the NAIC/CMAL pipeline: dataset
// generation, teacher training, distillation, XE pretraining, CMAL training,
// evaluation, latency benchmarking, and the enumeration oracle check.
//
// Exit codes: 0 ok, 1 runtime/tolerance failure, 2 usage or config error.

#include <cerrno>
#include <cstdio>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "naic/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace naic;

namespace {

// Rejects concurrent invocations on the same output directory.
class DirLock {
public:
    explicit DirLock(const std::string& dir) : path_(dir + "/.naic.lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw std::invalid_argument("output directory '" + dir + "' is locked by another invocation (" + path_ +
                                        " exists; remove it if stale)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw std::invalid_argument(what + " not found at '" + path + "'");
}

void save_model_atomic(const std::string& path, const ModelConfig& cfg, const Parameters& params) {
    const std::string tmp = path + ".tmp";
    ckpt::save_model(tmp, cfg, params);
    fs::rename(tmp, path);
}

void save_state_atomic(const std::string& path, const ckpt::TrainState& state) {
    const std::string tmp = path + ".tmp";
    ckpt::save_train_state(tmp, state);
    fs::rename(tmp, path);
}

// Append-only structured training log with a provenance header per invocation.
class TrainLog {
public:
    TrainLog(const std::string& path, const std::string& stage, const RunConfig& cfg, uint64_t seed)
        : os_(path, std::ios::app) {
        if (!os_) throw std::runtime_error("cannot open log file '" + path + "'");
        os_ << json{{"stage", stage}, {"config_checksum", config_checksum(cfg)}, {"seed", seed}}.dump() << "\n";
    }
    pipeline::LogFn fn() {
        return [this](const std::string& line) { os_ << line << "\n"; };
    }

private:
    std::ofstream os_;
};

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "run";
    std::optional<uint64_t> seed;
    std::optional<int> epochs;
    bool resume = false;
};

RunConfig load_run_config(const CommonArgs& args) {
    require_file(args.config_path, "config file");
    return load_config(args.config_path);
}

uint64_t train_seed(const CommonArgs& args, const RunConfig& cfg) { return args.seed.value_or(cfg.train_seed); }

struct ResumeIn {
    std::optional<Model> model;
    ckpt::TrainState state;
};

ResumeIn maybe_resume(bool resume, const std::string& ckpt_path) {
    ResumeIn in;
    if (!resume) return in;
    require_file(ckpt_path, "checkpoint to resume");
    require_file(pipeline::state_path(ckpt_path), "train state to resume");
    auto [mc, params] = ckpt::load_model(ckpt_path);
    in.model.emplace(mc, std::move(params));
    in.state = ckpt::load_train_state(pipeline::state_path(ckpt_path));
    return in;
}

int cmd_gen_data(const CommonArgs& args) {
    const RunConfig cfg = load_run_config(args);
    DirLock lock(args.out_dir);
    const pipeline::LoadedData data = pipeline::make_data(cfg);
    synth::write_dataset(pipeline::dataset_path(args.out_dir), data.records, cfg.grammar);
    std::vector<synth::DatasetRecord> urecords;
    urecords.reserve(data.unlabeled.size());
    for (const ImageFeatures& img : data.unlabeled)
        urecords.push_back(synth::DatasetRecord{img, {}, {}, synth::Split::Unlabeled});
    synth::write_dataset(pipeline::unlabeled_path(args.out_dir), urecords, cfg.grammar);
    std::ofstream(args.out_dir + "/config.json") << config_to_json(cfg) << "\n";
    std::cout << "wrote " << data.records.size() << " labeled records ("
              << data.train_idx.size() << " train / " << data.val_idx.size() << " val / " << data.test_idx.size()
              << " test) and " << data.unlabeled.size() << " unlabeled images to " << args.out_dir << "\n";
    return 0;
}

int cmd_train_teacher(const CommonArgs& args) {
    const RunConfig cfg0 = load_run_config(args);
    RunConfig cfg = cfg0;
    if (args.epochs) cfg.teacher.epochs = *args.epochs;
    require_file(pipeline::dataset_path(args.out_dir), "dataset (run gen-data first)");
    DirLock lock(args.out_dir);
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);
    const uint64_t seed = train_seed(args, cfg);
    TrainLog log(pipeline::log_path(args.out_dir, "teacher"), "teacher", cfg, seed);
    ResumeIn in = maybe_resume(args.resume, pipeline::teacher_ckpt_path(args.out_dir));
    Model model = pipeline::train_teacher_model(cfg, data, seed, resolve_threads(cfg), log.fn(), &in.state,
                                                in.model ? &*in.model : nullptr);
    save_model_atomic(pipeline::teacher_ckpt_path(args.out_dir), model.config(), model.parameters());
    save_state_atomic(pipeline::state_path(pipeline::teacher_ckpt_path(args.out_dir)), in.state);
    std::cout << "teacher checkpoint: " << pipeline::teacher_ckpt_path(args.out_dir) << " (steps " << in.state.step
              << ")\n";
    return 0;
}

int cmd_distill(const CommonArgs& args, int beam_width_flag) {
    const RunConfig cfg = load_run_config(args);
    const int beam_width = beam_width_flag > 0 ? beam_width_flag : cfg.distill_beam_width;
    require_file(pipeline::dataset_path(args.out_dir), "dataset (run gen-data first)");
    require_file(pipeline::teacher_ckpt_path(args.out_dir), "teacher checkpoint (run train-teacher first)");
    DirLock lock(args.out_dir);
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);
    auto [mc, params] = ckpt::load_model(pipeline::teacher_ckpt_path(args.out_dir));
    if (!(mc == cfg.model_config()))
        throw std::invalid_argument("distill: teacher checkpoint config does not match the run config");
    const Model teacher(mc, std::move(params));
    const std::string checksum = ckpt::file_checksum(pipeline::teacher_ckpt_path(args.out_dir));
    const pipeline::DistillOutput out =
        pipeline::distill_all(cfg, teacher, data, beam_width, checksum, resolve_threads(cfg));
    std::vector<synth::PseudoCaption> all = out.labeled;
    all.insert(all.end(), out.unlabeled.begin(), out.unlabeled.end());
    synth::write_pseudo_captions(pipeline::pseudo_path(args.out_dir), all, checksum, beam_width);
    std::cout << "wrote " << all.size() << " pseudo captions (teacher " << checksum << ", beam " << beam_width
              << ") to " << pipeline::pseudo_path(args.out_dir) << "\n";
    return 0;
}

int cmd_pretrain_xe(const CommonArgs& args, bool weight_init) {
    RunConfig cfg = load_run_config(args);
    if (args.epochs) cfg.xe.epochs = *args.epochs;
    require_file(pipeline::dataset_path(args.out_dir), "dataset (run gen-data first)");
    require_file(pipeline::pseudo_path(args.out_dir), "pseudo captions (run distill first)");
    DirLock lock(args.out_dir);
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);

    const std::vector<synth::PseudoCaption> all = synth::read_pseudo_captions(pipeline::pseudo_path(args.out_dir));
    if (all.size() != data.train_idx.size() + data.unlabeled.size())
        throw std::invalid_argument("pretrain-xe: pseudo caption count does not match labeled+unlabeled images");
    pipeline::DistillOutput pseudo;
    pseudo.labeled.assign(all.begin(), all.begin() + static_cast<long>(data.train_idx.size()));
    pseudo.unlabeled.assign(all.begin() + static_cast<long>(data.train_idx.size()), all.end());

    std::optional<Model> teacher;
    if (weight_init) {
        require_file(pipeline::teacher_ckpt_path(args.out_dir), "teacher checkpoint (needed for --weight-init)");
        auto [mc, params] = ckpt::load_model(pipeline::teacher_ckpt_path(args.out_dir));
        teacher.emplace(mc, std::move(params));
    }

    const uint64_t seed = train_seed(args, cfg);
    TrainLog log(pipeline::log_path(args.out_dir, "xe"), "xe", cfg, seed);
    pipeline::XeSpec spec;
    spec.weight_init = weight_init;
    spec.teacher = teacher ? &*teacher : nullptr;
    spec.kd = true;
    spec.pseudo = &pseudo;
    spec.include_unlabeled = true;
    ResumeIn in = maybe_resume(args.resume, pipeline::xe_ckpt_path(args.out_dir));
    Model model = pipeline::pretrain_xe_model(cfg, data, spec, seed, resolve_threads(cfg), log.fn(), &in.state,
                                              in.model ? &*in.model : nullptr);
    save_model_atomic(pipeline::xe_ckpt_path(args.out_dir), model.config(), model.parameters());
    save_state_atomic(pipeline::state_path(pipeline::xe_ckpt_path(args.out_dir)), in.state);
    std::cout << "XE checkpoint: " << pipeline::xe_ckpt_path(args.out_dir) << " (steps " << in.state.step << ")\n";
    return 0;
}

int cmd_train_cmal(const CommonArgs& args, const std::string& baseline_flag, std::optional<int> k_flag) {
    RunConfig cfg = load_run_config(args);
    if (args.epochs) cfg.cmal_stage.epochs = *args.epochs;
    if (!baseline_flag.empty()) cfg.cmal_baseline = baseline_flag;
    if (k_flag) cfg.cmal_k = *k_flag;
    require_file(pipeline::dataset_path(args.out_dir), "dataset (run gen-data first)");
    require_file(pipeline::xe_ckpt_path(args.out_dir), "XE checkpoint (run pretrain-xe first)");
    DirLock lock(args.out_dir);
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);
    auto [mc, params] = ckpt::load_model(pipeline::xe_ckpt_path(args.out_dir));
    if (!(mc == cfg.model_config()))
        throw std::invalid_argument("train-cmal: XE checkpoint config does not match the run config");
    const Model start(mc, std::move(params));

    const uint64_t seed = train_seed(args, cfg);
    TrainLog log(pipeline::log_path(args.out_dir, "cmal"), "cmal", cfg, seed);
    ResumeIn in = maybe_resume(args.resume, pipeline::cmal_ckpt_path(args.out_dir));
    Model model = pipeline::train_cmal_model(cfg, data, start, cfg.baseline_kind(), seed, resolve_threads(cfg),
                                             log.fn(), &in.state, in.model ? &*in.model : nullptr);
    save_model_atomic(pipeline::cmal_ckpt_path(args.out_dir), model.config(), model.parameters());
    save_state_atomic(pipeline::state_path(pipeline::cmal_ckpt_path(args.out_dir)), in.state);
    std::cout << "CMAL checkpoint: " << pipeline::cmal_ckpt_path(args.out_dir) << " (baseline "
              << cfg.baseline_kind().name() << ", steps " << in.state.step << ")\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& ckpt_path, const std::string& split_name) {
    const RunConfig cfg = load_run_config(args);
    require_file(pipeline::dataset_path(args.out_dir), "dataset");
    require_file(ckpt_path, "checkpoint");
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);
    auto [mc, params] = ckpt::load_model(ckpt_path);
    if (!(mc == cfg.model_config()))
        throw std::invalid_argument("evaluate: checkpoint config does not match the run config");
    const Model model(mc, std::move(params));
    synth::Split split;
    if (split_name == "train") split = synth::Split::Train;
    else if (split_name == "val") split = synth::Split::Val;
    else if (split_name == "test") split = synth::Split::Test;
    else throw std::invalid_argument("evaluate: split must be train|val|test");
    const pipeline::EvalReport r = pipeline::evaluate_model(model, data, split, resolve_threads(cfg));
    const json out{{"checkpoint", ckpt_path},
                   {"checkpoint_checksum", ckpt::file_checksum(ckpt_path)},
                   {"config_checksum", config_checksum(cfg)},
                   {"split", split_name},
                   {"images", r.count},
                   {"bleu1", r.bleu1},
                   {"bleu4", r.bleu4},
                   {"cider_d", r.cider_d},
                   {"adjacent_duplicate_rate", r.dup_rate}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_bench_latency(const CommonArgs& args, const std::string& student_ckpt, int num_images, int beam_width) {
    const RunConfig cfg = load_run_config(args);
    require_file(pipeline::dataset_path(args.out_dir), "dataset");
    require_file(pipeline::teacher_ckpt_path(args.out_dir), "teacher checkpoint");
    const std::string student_path = student_ckpt.empty() ? pipeline::cmal_ckpt_path(args.out_dir) : student_ckpt;
    require_file(student_path, "NAIC checkpoint");
    pipeline::LoadedData data = pipeline::load_data_files(cfg, args.out_dir);
    auto [tmc, tparams] = ckpt::load_model(pipeline::teacher_ckpt_path(args.out_dir));
    auto [smc, sparams] = ckpt::load_model(student_path);
    const Model teacher(tmc, std::move(tparams));
    const Model student(smc, std::move(sparams));
    const pipeline::LatencyReport r = pipeline::bench_latency(teacher, student, data, num_images, beam_width);
    const json out{{"images", r.images},
                   {"beam_width", r.beam_width},
                   {"na_ms", r.na_ms},
                   {"ar_greedy_ms", r.ar_greedy_ms},
                   {"ar_beam_ms", r.ar_beam_ms},
                   {"na_fwd_per_image", r.na_fwd_per_image},
                   {"ar_greedy_fwd_per_image", r.ar_greedy_fwd_per_image},
                   {"ar_beam_fwd_per_image", r.ar_beam_fwd_per_image},
                   {"speedup_vs_greedy", r.speedup_vs_greedy},
                   {"speedup_vs_beam", r.speedup_vs_beam}};
    std::ofstream(args.out_dir + "/latency.json") << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_oracle_check(const CommonArgs& args, bool mutate_sign) {
    uint64_t seed = args.seed.value_or(7);
    int threads = 1;
    if (!args.config_path.empty()) {
        const RunConfig cfg = load_run_config(args);
        threads = resolve_threads(cfg);
        if (!args.seed) seed = cfg.train_seed;
    }
    const pipeline::OracleCheckReport report = pipeline::oracle_check(seed, mutate_sign, threads);
    fs::create_directories(args.out_dir);
    std::ofstream os(args.out_dir + "/oracle_report.txt");
    for (const std::string& line : report.lines) {
        os << line << "\n";
        std::cout << line << "\n";
    }
    std::cout << (report.pass ? "oracle-check: PASS" : "oracle-check: FAIL") << "\n";
    return report.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"non-autoregressive captioning with counterfactuals-critical multi-agent learning"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string baseline_flag;
    std::optional<int> k_flag;
    int beam_width = 0;
    bool weight_init = true;
    bool mutate_sign = false;
    std::string ckpt_path, split_name = "test", student_ckpt;
    int num_images = 100;
    int bench_beam = 3;

    auto add_common = [&](CLI::App* sub, bool with_seed = true) {
        sub->add_option("--config", args.config_path, "run configuration (JSON)")->required();
        sub->add_option("--out", args.out_dir, "output/run directory");
        if (with_seed) sub->add_option("--seed", args.seed, "training seed (overrides config)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset files");
    add_common(gen, false);

    CLI::App* teach = app.add_subcommand("train-teacher", "train the autoregressive teacher with XE");
    add_common(teach);
    teach->add_flag("--resume", args.resume, "continue from the saved checkpoint/state");
    teach->add_option("--epochs", args.epochs, "override the configured epoch count");

    CLI::App* dist = app.add_subcommand("distill", "generate pseudo captions with the teacher");
    add_common(dist, false);
    dist->add_option("--beam-width", beam_width, "beam width (default from config)");

    CLI::App* xe = app.add_subcommand("pretrain-xe", "pretrain the NAIC student with XE on pseudo captions");
    add_common(xe);
    xe->add_flag("--weight-init,!--no-weight-init", weight_init, "initialize from the teacher weights (default on)");
    xe->add_flag("--resume", args.resume, "continue from the saved checkpoint/state");
    xe->add_option("--epochs", args.epochs, "override the configured epoch count");

    CLI::App* cm = app.add_subcommand("train-cmal", "CMAL training on real references");
    add_common(cm);
    cm->add_option("--baseline", baseline_flag, "none|ma|sc|cf (default from config)");
    cm->add_option("--k", k_flag, "top-k for the counterfactual baseline");
    cm->add_flag("--resume", args.resume, "continue from the saved checkpoint/state");
    cm->add_option("--epochs", args.epochs, "override the configured epoch count");

    CLI::App* ev = app.add_subcommand("evaluate", "decode a split and report metrics");
    add_common(ev, false);
    ev->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
    ev->add_option("--split", split_name, "train|val|test");

    CLI::App* bench = app.add_subcommand("bench-latency", "single-image decoding latency, NA vs AR");
    add_common(bench, false);
    bench->add_option("--ckpt", student_ckpt, "NAIC checkpoint (default: <out>/naic_cmal.ckpt)");
    bench->add_option("--num-images", num_images, "images to measure");
    bench->add_option("--beam-width", bench_beam, "AR beam width");

    CLI::App* orc = app.add_subcommand("oracle-check", "exact-enumeration estimator checks");
    orc->add_option("--config", args.config_path, "run configuration (optional; for threads/seed)");
    orc->add_option("--out", args.out_dir, "output directory for the report");
    orc->add_option("--seed", args.seed, "oracle model seed");
    orc->add_flag("--mutate-advantage-sign", mutate_sign, "test hook: flip advantage signs")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(args);
        if (teach->parsed()) return cmd_train_teacher(args);
        if (dist->parsed()) return cmd_distill(args, beam_width);
        if (xe->parsed()) return cmd_pretrain_xe(args, weight_init);
        if (cm->parsed()) return cmd_train_cmal(args, baseline_flag, k_flag);
        if (ev->parsed()) return cmd_evaluate(args, ckpt_path, split_name);
        if (bench->parsed()) return cmd_bench_latency(args, student_ckpt, num_images, bench_beam);
        if (orc->parsed()) return cmd_oracle_check(args, mutate_sign);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
