#include "naic/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace naic {

namespace {

using json = nlohmann::ordered_json;

void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok) throw std::invalid_argument("config: unknown key '" + where + key + "'");
    }
}

template <typename T>
void get_if_present(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json stage_to_json(const StageOpt& s) {
    return json{{"epochs", s.epochs},         {"batch_size", s.batch_size},
                {"lr", s.lr},                 {"lr_decay", s.lr_decay},
                {"lr_decay_every", s.lr_decay_every}, {"clip_norm", s.clip_norm}};
}

StageOpt stage_from_json(const json& j, const std::string& where) {
    reject_unknown_keys(j, {"epochs", "batch_size", "lr", "lr_decay", "lr_decay_every", "clip_norm"}, where);
    StageOpt s;
    get_if_present(j, "epochs", s.epochs);
    get_if_present(j, "batch_size", s.batch_size);
    get_if_present(j, "lr", s.lr);
    get_if_present(j, "lr_decay", s.lr_decay);
    get_if_present(j, "lr_decay_every", s.lr_decay_every);
    get_if_present(j, "clip_norm", s.clip_norm);
    return s;
}

}  // namespace

double StageOpt::lr_at_epoch(int epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch / std::max(1, lr_decay_every)));
}

cmal::AdamConfig StageOpt::adam_at_epoch(int epoch) const {
    cmal::AdamConfig a;
    a.lr = lr_at_epoch(epoch);
    a.clip_norm = clip_norm;
    return a;
}

void StageOpt::validate(const std::string& stage) const {
    if (epochs < 0) throw std::invalid_argument("config: " + stage + ".epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("config: " + stage + ".batch_size must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("config: " + stage + ".lr must be >= 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0))
        throw std::invalid_argument("config: " + stage + ".lr_decay must be in (0, 1]");
    if (lr_decay_every < 1) throw std::invalid_argument("config: " + stage + ".lr_decay_every must be >= 1");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("config: " + stage + ".clip_norm must be >= 0");
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    m.num_layers = num_layers;
    m.model_dim = model_dim;
    m.num_heads = num_heads;
    m.ffn_dim = ffn_dim;
    m.num_agents = num_agents;
    m.vocab_size = grammar.vocab_size();
    m.max_regions = grammar.num_regions;
    m.feature_dim = grammar.feature_dim;
    return m;
}

cmal::BaselineKind RunConfig::baseline_kind() const {
    return cmal::BaselineKind::parse(cmal_baseline, cmal_k, cmal_ma_decay);
}

metrics::MetricKind RunConfig::metric_kind() const {
    if (cmal_metric == "cider") return metrics::MetricKind::CiderD;
    if (cmal_metric == "bleu1") return metrics::MetricKind::Bleu1;
    if (cmal_metric == "bleu4") return metrics::MetricKind::Bleu4;
    throw std::invalid_argument("config: cmal.metric must be one of cider|bleu1|bleu4");
}

void RunConfig::validate() const {
    grammar.validate();
    model_config().validate();
    if (grammar.max_caption_len() > num_agents)
        throw std::invalid_argument("config: longest caption (" + std::to_string(grammar.max_caption_len()) +
                                    ") exceeds num_agents (" + std::to_string(num_agents) + ")");
    if (data.train < 1 || data.val < 2 || data.test < 2)
        throw std::invalid_argument("config: data sizes must have train >= 1, val/test >= 2");
    if (data.unlabeled < 0) throw std::invalid_argument("config: data.unlabeled must be >= 0");
    teacher.validate("teacher");
    xe.validate("xe");
    cmal_stage.validate("cmal");
    (void)baseline_kind();
    (void)metric_kind();
    if (distill_beam_width < 1) throw std::invalid_argument("config: distill_beam_width must be >= 1");
    if (threads < 0) throw std::invalid_argument("config: threads must be >= 0");
}

RunConfig default_config() {
    RunConfig cfg;
    cfg.teacher = StageOpt{10, 16, 1e-3, 0.8, 3, 5.0};
    cfg.xe = StageOpt{8, 16, 1e-3, 0.8, 3, 5.0};
    cfg.cmal_stage = StageOpt{8, 16, 1e-4, 0.8, 4, 5.0};
    return cfg;
}

RunConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    reject_unknown_keys(j,
                        {"model", "grammar", "data", "teacher", "xe", "cmal", "distill", "train_seed", "threads"},
                        "");
    RunConfig cfg = default_config();
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown_keys(m, {"num_layers", "model_dim", "num_heads", "ffn_dim", "num_agents"}, "model.");
        get_if_present(m, "num_layers", cfg.num_layers);
        get_if_present(m, "model_dim", cfg.model_dim);
        get_if_present(m, "num_heads", cfg.num_heads);
        get_if_present(m, "ffn_dim", cfg.ffn_dim);
        get_if_present(m, "num_agents", cfg.num_agents);
    }
    if (j.contains("grammar")) {
        const json& g = j.at("grammar");
        reject_unknown_keys(g,
                            {"num_entities", "num_attributes", "num_relations", "max_objects", "refs_per_image",
                             "feature_dim", "num_regions", "noise_sigma"},
                            "grammar.");
        get_if_present(g, "num_entities", cfg.grammar.num_entities);
        get_if_present(g, "num_attributes", cfg.grammar.num_attributes);
        get_if_present(g, "num_relations", cfg.grammar.num_relations);
        get_if_present(g, "max_objects", cfg.grammar.max_objects);
        get_if_present(g, "refs_per_image", cfg.grammar.refs_per_image);
        get_if_present(g, "feature_dim", cfg.grammar.feature_dim);
        get_if_present(g, "num_regions", cfg.grammar.num_regions);
        get_if_present(g, "noise_sigma", cfg.grammar.noise_sigma);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown_keys(d, {"seed", "train", "val", "test", "unlabeled"}, "data.");
        get_if_present(d, "seed", cfg.data.seed);
        get_if_present(d, "train", cfg.data.train);
        get_if_present(d, "val", cfg.data.val);
        get_if_present(d, "test", cfg.data.test);
        get_if_present(d, "unlabeled", cfg.data.unlabeled);
    }
    if (j.contains("teacher")) cfg.teacher = stage_from_json(j.at("teacher"), "teacher.");
    if (j.contains("xe")) cfg.xe = stage_from_json(j.at("xe"), "xe.");
    if (j.contains("cmal")) {
        json c = j.at("cmal");
        reject_unknown_keys(c,
                            {"epochs", "batch_size", "lr", "lr_decay", "lr_decay_every", "clip_norm", "baseline",
                             "k", "ma_decay", "metric"},
                            "cmal.");
        get_if_present(c, "baseline", cfg.cmal_baseline);
        get_if_present(c, "k", cfg.cmal_k);
        get_if_present(c, "ma_decay", cfg.cmal_ma_decay);
        get_if_present(c, "metric", cfg.cmal_metric);
        for (const char* key : {"baseline", "k", "ma_decay", "metric"}) c.erase(key);
        cfg.cmal_stage = stage_from_json(c, "cmal.");
    }
    if (j.contains("distill")) {
        const json& d = j.at("distill");
        reject_unknown_keys(d, {"beam_width"}, "distill.");
        get_if_present(d, "beam_width", cfg.distill_beam_width);
    }
    get_if_present(j, "train_seed", cfg.train_seed);
    get_if_present(j, "threads", cfg.threads);
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_json(ss.str());
}

std::string config_to_json(const RunConfig& cfg) {
    json j{{"model",
            json{{"num_layers", cfg.num_layers},
                 {"model_dim", cfg.model_dim},
                 {"num_heads", cfg.num_heads},
                 {"ffn_dim", cfg.ffn_dim},
                 {"num_agents", cfg.num_agents}}},
           {"grammar",
            json{{"num_entities", cfg.grammar.num_entities},
                 {"num_attributes", cfg.grammar.num_attributes},
                 {"num_relations", cfg.grammar.num_relations},
                 {"max_objects", cfg.grammar.max_objects},
                 {"refs_per_image", cfg.grammar.refs_per_image},
                 {"feature_dim", cfg.grammar.feature_dim},
                 {"num_regions", cfg.grammar.num_regions},
                 {"noise_sigma", cfg.grammar.noise_sigma}}},
           {"data",
            json{{"seed", cfg.data.seed},
                 {"train", cfg.data.train},
                 {"val", cfg.data.val},
                 {"test", cfg.data.test},
                 {"unlabeled", cfg.data.unlabeled}}},
           {"teacher", stage_to_json(cfg.teacher)},
           {"xe", stage_to_json(cfg.xe)},
           {"cmal", stage_to_json(cfg.cmal_stage)},
           {"distill", json{{"beam_width", cfg.distill_beam_width}}},
           {"train_seed", cfg.train_seed},
           {"threads", cfg.threads}};
    j["cmal"]["baseline"] = cfg.cmal_baseline;
    j["cmal"]["k"] = cfg.cmal_k;
    j["cmal"]["ma_decay"] = cfg.cmal_ma_decay;
    j["cmal"]["metric"] = cfg.cmal_metric;
    return j.dump(2);
}

std::string config_checksum(const RunConfig& cfg) {
    const uint64_t h = Rng::fnv1a(config_to_json(cfg));
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

int resolve_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) return cfg.threads;
    if (const char* env = std::getenv("NAIC_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(hw == 0 ? 1u : hw, 4u));
}

}  // namespace naic
