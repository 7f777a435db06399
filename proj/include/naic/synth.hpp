#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "naic/metrics.hpp"
#include "naic/model.hpp"

namespace naic::synth {

// Closed-set grammar over entity/attribute/relation concepts. Every concept
// has two surface forms (relations: one single-token and one two-token form),
// so each scene admits several phrasings of different lengths while every
// phrasing still parses back to the scene uniquely.
struct GrammarConfig {
    int num_entities = 12;
    int num_attributes = 8;
    int num_relations = 6;
    int max_objects = 3;     // noun phrases per scene, 1..3
    int refs_per_image = 4;  // distinct phrasings kept as references
    int feature_dim = 32;
    int num_regions = 4;
    double noise_sigma = 0.1;

    void validate() const;
    int vocab_size() const { return 5 + 2 * num_entities + 2 * num_attributes + 3 * num_relations; }
    // longest caption: max_objects NPs ("a attr entity"), long relations, period
    int max_caption_len() const { return 3 * max_objects + 2 * (max_objects - 1) + 1; }
    bool operator==(const GrammarConfig&) const = default;
};

// Token-id layout and surface strings for a grammar instance.
class Vocab {
public:
    explicit Vocab(const GrammarConfig& cfg);

    int size() const { return cfg_.vocab_size(); }
    int article() const { return tokens::kNumSpecial; }
    int entity_token(int e, int syn) const { return ent_base_ + 2 * e + syn; }
    int attr_token(int a, int syn) const { return attr_base_ + 2 * a + syn; }
    int rel_short(int r) const { return rel_base_ + r; }
    int rel_long1(int r) const { return rel_base_ + cfg_.num_relations + r; }
    int rel_long2(int r) const { return rel_base_ + 2 * cfg_.num_relations + r; }

    enum class Cat { Special, Article, Entity, Attr, RelShort, RelLong1, RelLong2 };
    Cat category(int id) const;
    int concept_of(int id) const;  // entity/attr/relation index for its category

    std::string token_str(int id) const;
    std::string caption_str(const metrics::Tokens& toks) const;

    const GrammarConfig& config() const { return cfg_; }

private:
    GrammarConfig cfg_;
    int ent_base_, attr_base_, rel_base_;
};

// 1..max_objects noun phrases (entity, attribute) chained by relations.
struct SceneDescriptor {
    std::vector<std::array<int, 2>> noun_phrases;  // {entity, attribute}
    std::vector<int> relations;                    // size = noun_phrases.size() - 1

    std::vector<int> key() const;  // canonical encoding for dedup/splits
    bool operator==(const SceneDescriptor&) const = default;
};

enum class Split { Train, Val, Test, Unlabeled };
std::string split_name(Split s);

struct DatasetRecord {
    ImageFeatures image;
    std::vector<metrics::Tokens> references;  // each ends with the period token
    SceneDescriptor scene;
    Split split = Split::Train;
};

struct DatasetSizes {
    int train = 2000;
    int val = 200;
    int test = 200;
};

// All admissible phrasings of a scene (synonym and relation-form choices),
// in a fixed enumeration order; every phrasing ends with the period token.
std::vector<metrics::Tokens> enumerate_phrasings(const SceneDescriptor& scene, const Vocab& vocab);

// Strict inverse of the grammar; nullopt when the tokens are not a caption.
std::optional<SceneDescriptor> parse_caption(const metrics::Tokens& caption, const Vocab& vocab);

// Deterministic per seed: scenes are sampled without repetition (splits are
// disjoint by scene), references are a seeded sample of distinct phrasings,
// and features are a fixed random projection of the scene encoding plus
// per-region noise.
std::vector<DatasetRecord> generate_dataset(uint64_t seed, const DatasetSizes& sizes, const GrammarConfig& cfg);

// Features only, from an independent scene stream (unlabeled pool).
std::vector<ImageFeatures> generate_unlabeled(uint64_t seed, int size, const GrammarConfig& cfg);

// --- knowledge distillation ---------------------------------------------------

struct PseudoCaption {
    metrics::Tokens tokens;  // ends with period, length <= num_agents
    std::string source;      // teacher checkpoint checksum
    int beam_width = 0;
};

// One pseudo caption per image via beam search over the teacher. A caption
// that never emits a period within num_agents tokens is truncated and
// period-terminated so downstream padding invariants hold.
std::vector<PseudoCaption> distill(const Model& teacher, const std::vector<const ImageFeatures*>& images,
                                   int beam_width, const std::string& source, int num_threads = 1);

// --- dataset file (line-oriented, versioned header) ---------------------------

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records, const GrammarConfig& cfg);
std::pair<GrammarConfig, std::vector<DatasetRecord>> read_dataset(const std::string& path);

void write_pseudo_captions(const std::string& path, const std::vector<PseudoCaption>& captions,
                           const std::string& teacher_checksum, int beam_width);
std::vector<PseudoCaption> read_pseudo_captions(const std::string& path);

}  // namespace naic::synth
