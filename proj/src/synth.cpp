#include "naic/synth.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "naic/cmal.hpp"
#include "naic/rng.hpp"

namespace naic::synth {

namespace {

using json = nlohmann::ordered_json;

constexpr int kMaxEntities = 12;
constexpr int kMaxAttributes = 8;
constexpr int kMaxRelations = 6;

// Surface forms. Two synonyms per entity/attribute concept; relations have a
// one-token and a two-token form. All strings are distinct, so every token id
// maps back to exactly one (category, concept).
constexpr const char* kEntityWords[kMaxEntities][2] = {
    {"cat", "kitten"}, {"dog", "puppy"},  {"bird", "finch"}, {"fox", "cub"},
    {"frog", "toad"},  {"horse", "pony"}, {"sheep", "lamb"}, {"duck", "drake"},
    {"owl", "owlet"},  {"crab", "prawn"}, {"deer", "fawn"},  {"mouse", "shrew"},
};
constexpr const char* kAttrWords[kMaxAttributes][2] = {
    {"red", "crimson"}, {"blue", "azure"},  {"small", "tiny"}, {"big", "huge"},
    {"old", "ancient"}, {"young", "newborn"}, {"dark", "dusky"}, {"pale", "bright"},
};
constexpr const char* kRelShort[kMaxRelations] = {"chases", "watches", "follows", "avoids", "carries", "passes"};
constexpr const char* kRelLong[kMaxRelations][2] = {
    {"runs", "after"},   {"looks", "at"},   {"trails", "behind"},
    {"hides", "from"},   {"walks", "with"}, {"moves", "past"},
};

}  // namespace

void GrammarConfig::validate() const {
    if (num_entities < 1 || num_entities > kMaxEntities)
        throw std::invalid_argument("GrammarConfig: num_entities must be in [1, 12]");
    if (num_attributes < 1 || num_attributes > kMaxAttributes)
        throw std::invalid_argument("GrammarConfig: num_attributes must be in [1, 8]");
    if (num_relations < 1 || num_relations > kMaxRelations)
        throw std::invalid_argument("GrammarConfig: num_relations must be in [1, 6]");
    if (max_objects < 1 || max_objects > 3) throw std::invalid_argument("GrammarConfig: max_objects must be in [1, 3]");
    if (refs_per_image < 1 || refs_per_image > 5)
        throw std::invalid_argument("GrammarConfig: refs_per_image must be in [1, 5]");
    // a one-object scene admits only 2x2 synonym phrasings
    if (refs_per_image > 4)
        throw std::invalid_argument("GrammarConfig: grammar too small for requested reference diversity (" +
                                    std::to_string(refs_per_image) + " refs, max 4 distinct phrasings)");
    if (feature_dim < 1 || num_regions < 1) throw std::invalid_argument("GrammarConfig: bad feature dims");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("GrammarConfig: noise_sigma must be >= 0");
}

Vocab::Vocab(const GrammarConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    ent_base_ = tokens::kNumSpecial + 1;  // specials then the article
    attr_base_ = ent_base_ + 2 * cfg_.num_entities;
    rel_base_ = attr_base_ + 2 * cfg_.num_attributes;
}

Vocab::Cat Vocab::category(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("Vocab: token id out of range");
    if (id < tokens::kNumSpecial) return Cat::Special;
    if (id == article()) return Cat::Article;
    if (id < attr_base_) return Cat::Entity;
    if (id < rel_base_) return Cat::Attr;
    if (id < rel_base_ + cfg_.num_relations) return Cat::RelShort;
    if (id < rel_base_ + 2 * cfg_.num_relations) return Cat::RelLong1;
    return Cat::RelLong2;
}

int Vocab::concept_of(int id) const {
    switch (category(id)) {
        case Cat::Entity: return (id - ent_base_) / 2;
        case Cat::Attr: return (id - attr_base_) / 2;
        case Cat::RelShort: return id - rel_base_;
        case Cat::RelLong1: return id - rel_base_ - cfg_.num_relations;
        case Cat::RelLong2: return id - rel_base_ - 2 * cfg_.num_relations;
        default: throw std::invalid_argument("Vocab: token has no concept");
    }
}

std::string Vocab::token_str(int id) const {
    switch (category(id)) {
        case Cat::Special: {
            const char* names[] = {"<pad>", ".", "<bos>", "<unk>"};
            return names[id];
        }
        case Cat::Article: return "a";
        case Cat::Entity: return kEntityWords[concept_of(id)][(id - ent_base_) % 2];
        case Cat::Attr: return kAttrWords[concept_of(id)][(id - attr_base_) % 2];
        case Cat::RelShort: return kRelShort[concept_of(id)];
        case Cat::RelLong1: return kRelLong[concept_of(id)][0];
        case Cat::RelLong2: return kRelLong[concept_of(id)][1];
    }
    return "?";
}

std::string Vocab::caption_str(const metrics::Tokens& toks) const {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += " ";
        out += token_str(toks[i]);
    }
    return out;
}

std::vector<int> SceneDescriptor::key() const {
    std::vector<int> k;
    k.push_back(static_cast<int>(noun_phrases.size()));
    for (const auto& np : noun_phrases) {
        k.push_back(np[0]);
        k.push_back(np[1]);
    }
    for (int r : relations) k.push_back(r);
    return k;
}

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Unlabeled: return "unlabeled";
    }
    return "?";
}

std::vector<metrics::Tokens> enumerate_phrasings(const SceneDescriptor& scene, const Vocab& vocab) {
    const int k = static_cast<int>(scene.noun_phrases.size());
    // choice slots: per NP an attr synonym and an entity synonym, per relation a form
    const int slots = 2 * k + (k - 1);
    std::vector<metrics::Tokens> out;
    for (int choice = 0; choice < (1 << slots); ++choice) {
        metrics::Tokens toks;
        int bit = 0;
        auto pick = [&]() { return (choice >> bit++) & 1; };
        for (int i = 0; i < k; ++i) {
            if (i > 0) {
                const int r = scene.relations[static_cast<size_t>(i - 1)];
                if (pick() == 0) {
                    toks.push_back(vocab.rel_short(r));
                } else {
                    toks.push_back(vocab.rel_long1(r));
                    toks.push_back(vocab.rel_long2(r));
                }
            }
            toks.push_back(vocab.article());
            toks.push_back(vocab.attr_token(scene.noun_phrases[static_cast<size_t>(i)][1], pick()));
            toks.push_back(vocab.entity_token(scene.noun_phrases[static_cast<size_t>(i)][0], pick()));
        }
        toks.push_back(tokens::kPeriod);
        out.push_back(std::move(toks));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::optional<SceneDescriptor> parse_caption(const metrics::Tokens& caption, const Vocab& vocab) {
    SceneDescriptor scene;
    size_t i = 0;
    const size_t n = caption.size();
    auto cat = [&](size_t idx) { return vocab.category(caption[idx]); };
    while (true) {
        // noun phrase: article, attribute, entity
        if (i + 2 >= n || cat(i) != Vocab::Cat::Article || cat(i + 1) != Vocab::Cat::Attr ||
            cat(i + 2) != Vocab::Cat::Entity)
            return std::nullopt;
        scene.noun_phrases.push_back({vocab.concept_of(caption[i + 2]), vocab.concept_of(caption[i + 1])});
        i += 3;
        if (i >= n) return std::nullopt;  // must end with period
        if (caption[i] == tokens::kPeriod) {
            if (i + 1 != n) return std::nullopt;  // trailing tokens
            break;
        }
        if (cat(i) == Vocab::Cat::RelShort) {
            scene.relations.push_back(vocab.concept_of(caption[i]));
            i += 1;
        } else if (cat(i) == Vocab::Cat::RelLong1) {
            if (i + 1 >= n || cat(i + 1) != Vocab::Cat::RelLong2 ||
                vocab.concept_of(caption[i + 1]) != vocab.concept_of(caption[i]))
                return std::nullopt;
            scene.relations.push_back(vocab.concept_of(caption[i]));
            i += 2;
        } else {
            return std::nullopt;
        }
    }
    if (scene.noun_phrases.empty() || scene.noun_phrases.size() > 3) return std::nullopt;
    return scene;
}

namespace {

// Fixed random projection of the scene encoding; shared between labeled and
// unlabeled generation for a given grammar so both live in one feature space.
class FeatureProjector {
public:
    explicit FeatureProjector(const GrammarConfig& cfg) : cfg_(cfg) {
        enc_dim_ = 3 * (cfg.num_entities + cfg.num_attributes) + 2 * cfg.num_relations + 3;
        Rng rng = Rng(Rng::fnv1a("naic.synth.projection"))
                      .fork(static_cast<uint64_t>(cfg.num_entities * 1000003 + cfg.num_attributes * 1009 +
                                                  cfg.num_relations * 101 + cfg.num_regions * 7 + cfg.feature_dim));
        const double scale = 1.0 / std::sqrt(static_cast<double>(enc_dim_));
        proj_.reserve(static_cast<size_t>(cfg.num_regions));
        for (int r = 0; r < cfg.num_regions; ++r) proj_.push_back(Tensor::randn({cfg.feature_dim, enc_dim_}, rng, scale));
    }

    ImageFeatures features(const SceneDescriptor& scene, Rng noise_rng) const {
        std::vector<double> enc(static_cast<size_t>(enc_dim_), 0.0);
        const int ea = cfg_.num_entities + cfg_.num_attributes;
        for (size_t i = 0; i < scene.noun_phrases.size(); ++i) {
            enc[i * static_cast<size_t>(ea) + static_cast<size_t>(scene.noun_phrases[i][0])] = 1.0;
            enc[i * static_cast<size_t>(ea) + static_cast<size_t>(cfg_.num_entities + scene.noun_phrases[i][1])] = 1.0;
        }
        const size_t rel_off = 3 * static_cast<size_t>(ea);
        for (size_t i = 0; i < scene.relations.size(); ++i)
            enc[rel_off + i * static_cast<size_t>(cfg_.num_relations) + static_cast<size_t>(scene.relations[i])] = 1.0;
        enc[static_cast<size_t>(enc_dim_ - 3) + scene.noun_phrases.size() - 1] = 1.0;  // object-count one-hot

        Tensor regions = Tensor::zeros({cfg_.num_regions, cfg_.feature_dim});
        for (int r = 0; r < cfg_.num_regions; ++r) {
            Rng region_rng = noise_rng.fork(static_cast<uint64_t>(r));
            const Tensor& p = proj_[static_cast<size_t>(r)];
            for (int f = 0; f < cfg_.feature_dim; ++f) {
                double acc = 0.0;
                for (int e = 0; e < enc_dim_; ++e) acc += p.at(f, e) * enc[static_cast<size_t>(e)];
                regions.at(r, f) = acc + region_rng.normal(0.0, cfg_.noise_sigma);
            }
        }
        return ImageFeatures{std::move(regions)};
    }

private:
    GrammarConfig cfg_;
    int enc_dim_;
    std::vector<Tensor> proj_;
};

SceneDescriptor sample_scene(Rng& rng, const GrammarConfig& cfg) {
    SceneDescriptor scene;
    const int k = 1 + rng.below(cfg.max_objects);
    for (int i = 0; i < k; ++i)
        scene.noun_phrases.push_back({rng.below(cfg.num_entities), rng.below(cfg.num_attributes)});
    for (int i = 0; i + 1 < k; ++i) scene.relations.push_back(rng.below(cfg.num_relations));
    return scene;
}

int64_t scene_space_size(const GrammarConfig& cfg) {
    int64_t total = 0;
    int64_t np = 0;
    for (int k = 1; k <= cfg.max_objects; ++k) {
        np = 1;
        for (int i = 0; i < k; ++i) np *= static_cast<int64_t>(cfg.num_entities) * cfg.num_attributes;
        for (int i = 0; i + 1 < k; ++i) np *= cfg.num_relations;
        total += np;
        if (total > (int64_t{1} << 40)) break;
    }
    return total;
}

std::vector<metrics::Tokens> pick_references(const SceneDescriptor& scene, const Vocab& vocab, Rng rng,
                                             int refs_per_image) {
    std::vector<metrics::Tokens> phrasings = enumerate_phrasings(scene, vocab);
    const std::vector<int> order = rng.permutation(static_cast<int>(phrasings.size()));
    const int take = std::min<int>(refs_per_image, static_cast<int>(phrasings.size()));
    std::vector<metrics::Tokens> refs;
    refs.reserve(static_cast<size_t>(take));
    for (int i = 0; i < take; ++i) refs.push_back(phrasings[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    return refs;
}

}  // namespace

std::vector<DatasetRecord> generate_dataset(uint64_t seed, const DatasetSizes& sizes, const GrammarConfig& cfg) {
    cfg.validate();
    if (sizes.train < 1 || sizes.val < 0 || sizes.test < 0)
        throw std::invalid_argument("generate_dataset: sizes must be positive");
    const int total = sizes.train + sizes.val + sizes.test;
    if (scene_space_size(cfg) < 2 * static_cast<int64_t>(total))
        throw std::invalid_argument("generate_dataset: grammar too small for " + std::to_string(total) +
                                    " distinct scenes");

    const Vocab vocab(cfg);
    const FeatureProjector projector(cfg);
    Rng scene_rng = Rng(seed).fork("synth.scenes");
    Rng refs_rng = Rng(seed).fork("synth.refs");
    Rng noise_rng = Rng(seed).fork("synth.noise");

    std::set<std::vector<int>> seen;
    std::vector<DatasetRecord> records;
    records.reserve(static_cast<size_t>(total));
    int index = 0;
    while (static_cast<int>(records.size()) < total) {
        SceneDescriptor scene = sample_scene(scene_rng, cfg);
        if (!seen.insert(scene.key()).second) continue;
        DatasetRecord rec;
        rec.split = index < sizes.train ? Split::Train : (index < sizes.train + sizes.val ? Split::Val : Split::Test);
        rec.references = pick_references(scene, vocab, refs_rng.fork(static_cast<uint64_t>(index)), cfg.refs_per_image);
        rec.image = projector.features(scene, noise_rng.fork(static_cast<uint64_t>(index)));
        rec.scene = std::move(scene);
        records.push_back(std::move(rec));
        ++index;
    }
    return records;
}

std::vector<ImageFeatures> generate_unlabeled(uint64_t seed, int size, const GrammarConfig& cfg) {
    cfg.validate();
    if (size < 0) throw std::invalid_argument("generate_unlabeled: negative size");
    const FeatureProjector projector(cfg);
    Rng scene_rng = Rng(seed).fork("synth.unlabeled.scenes");
    Rng noise_rng = Rng(seed).fork("synth.unlabeled.noise");
    std::vector<ImageFeatures> images;
    images.reserve(static_cast<size_t>(size));
    for (int i = 0; i < size; ++i) {
        const SceneDescriptor scene = sample_scene(scene_rng, cfg);
        images.push_back(projector.features(scene, noise_rng.fork(static_cast<uint64_t>(i))));
    }
    return images;
}

std::vector<PseudoCaption> distill(const Model& teacher, const std::vector<const ImageFeatures*>& images,
                                   int beam_width, const std::string& source, int num_threads) {
    if (beam_width < 1) throw std::invalid_argument("distill: beam_width must be >= 1");
    const int n = static_cast<int>(images.size());
    const int max_len = teacher.config().num_agents;
    std::vector<PseudoCaption> out(static_cast<size_t>(n));
    cmal::parallel_for(n, num_threads, [&](int i) {
        images[static_cast<size_t>(i)]->validate(teacher.config());
        const Tensor ctx = teacher.encode(*images[static_cast<size_t>(i)]);
        metrics::Tokens toks = teacher.decode_ar_beam(ctx, beam_width, max_len);
        if (toks.empty() || toks.back() != tokens::kPeriod) {
            if (static_cast<int>(toks.size()) >= max_len) toks.resize(static_cast<size_t>(max_len) - 1);
            toks.push_back(tokens::kPeriod);
        }
        out[static_cast<size_t>(i)] = PseudoCaption{std::move(toks), source, beam_width};
    });
    return out;
}

// --- file IO -----------------------------------------------------------------

namespace {

json grammar_to_json(const GrammarConfig& cfg) {
    return json{{"num_entities", cfg.num_entities},
                {"num_attributes", cfg.num_attributes},
                {"num_relations", cfg.num_relations},
                {"max_objects", cfg.max_objects},
                {"refs_per_image", cfg.refs_per_image},
                {"feature_dim", cfg.feature_dim},
                {"num_regions", cfg.num_regions},
                {"noise_sigma", cfg.noise_sigma}};
}

GrammarConfig grammar_from_json(const json& j) {
    GrammarConfig cfg;
    cfg.num_entities = j.at("num_entities").get<int>();
    cfg.num_attributes = j.at("num_attributes").get<int>();
    cfg.num_relations = j.at("num_relations").get<int>();
    cfg.max_objects = j.at("max_objects").get<int>();
    cfg.refs_per_image = j.at("refs_per_image").get<int>();
    cfg.feature_dim = j.at("feature_dim").get<int>();
    cfg.num_regions = j.at("num_regions").get<int>();
    cfg.noise_sigma = j.at("noise_sigma").get<double>();
    return cfg;
}

Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "unlabeled") return Split::Unlabeled;
    throw std::invalid_argument("dataset: unknown split '" + s + "'");
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records, const GrammarConfig& cfg) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_dataset: cannot open '" + path + "'");
    os << json{{"format", "naic-dataset"}, {"version", 1}, {"grammar", grammar_to_json(cfg)}}.dump() << "\n";
    for (const DatasetRecord& rec : records) {
        json scene{{"nps", json::array()}, {"rels", rec.scene.relations}};
        for (const auto& np : rec.scene.noun_phrases) scene["nps"].push_back({np[0], np[1]});
        json line{{"split", split_name(rec.split)},
                  {"scene", std::move(scene)},
                  {"features", json{{"shape", rec.image.regions.shape}, {"data", rec.image.regions.data}}},
                  {"refs", rec.references}};
        os << line.dump() << "\n";
    }
    if (!os) throw std::runtime_error("write_dataset: write failed for '" + path + "'");
}

std::pair<GrammarConfig, std::vector<DatasetRecord>> read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_dataset: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_dataset: empty file");
    const json header = json::parse(line);
    if (header.at("format").get<std::string>() != "naic-dataset" || header.at("version").get<int>() != 1)
        throw std::runtime_error("read_dataset: bad header in '" + path + "'");
    GrammarConfig cfg = grammar_from_json(header.at("grammar"));
    cfg.validate();

    std::vector<DatasetRecord> records;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        DatasetRecord rec;
        rec.split = split_from_name(j.at("split").get<std::string>());
        for (const auto& np : j.at("scene").at("nps"))
            rec.scene.noun_phrases.push_back({np.at(0).get<int>(), np.at(1).get<int>()});
        rec.scene.relations = j.at("scene").at("rels").get<std::vector<int>>();
        rec.image.regions = Tensor(j.at("features").at("shape").get<std::vector<int>>(),
                                   j.at("features").at("data").get<std::vector<double>>());
        rec.references = j.at("refs").get<std::vector<metrics::Tokens>>();
        records.push_back(std::move(rec));
    }
    return {cfg, std::move(records)};
}

void write_pseudo_captions(const std::string& path, const std::vector<PseudoCaption>& captions,
                           const std::string& teacher_checksum, int beam_width) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("write_pseudo_captions: cannot open '" + path + "'");
    os << json{{"format", "naic-pseudo-captions"},
               {"version", 1},
               {"teacher_checksum", teacher_checksum},
               {"beam_width", beam_width}}
              .dump()
       << "\n";
    for (const PseudoCaption& pc : captions)
        os << json{{"tokens", pc.tokens}, {"source", pc.source}, {"beam_width", pc.beam_width}}.dump() << "\n";
    if (!os) throw std::runtime_error("write_pseudo_captions: write failed");
}

std::vector<PseudoCaption> read_pseudo_captions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("read_pseudo_captions: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_pseudo_captions: empty file");
    const json header = json::parse(line);
    if (header.at("format").get<std::string>() != "naic-pseudo-captions")
        throw std::runtime_error("read_pseudo_captions: bad header");
    std::vector<PseudoCaption> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        out.push_back(PseudoCaption{j.at("tokens").get<metrics::Tokens>(), j.at("source").get<std::string>(),
                                    j.at("beam_width").get<int>()});
    }
    return out;
}

}  // namespace naic::synth
