#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kginject/graph_store.hpp"

namespace kginject::corpus {

inline constexpr std::size_t kMaxBiteChars = 512;

// Half-open range of Unicode code point offsets into Bite::text.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Span&) const = default;
};

struct Mention {
    graph::EntityRef entity;
    Span span;

    bool operator==(const Mention&) const = default;
};

// One sentence (or short passage) mentioning a subject before an object.
struct Bite {
    std::string text;
    Mention subject;
    Mention object;
    graph::PredicateRef predicate;

    bool operator==(const Bite&) const = default;
};

// Throws ValidationError if spans do not reproduce the labels exactly, the
// subject does not end before the object, or the text exceeds kMaxBiteChars.
void validate(const Bite& bite);

// True when the object mention opens a new sentence (preceded by . ! or ?).
bool object_starts_sentence(const Bite& bite);

// Byte range of a code-point span.
std::pair<std::size_t, std::size_t> byte_range(std::string_view text, const Span& span);

struct PredicateSpec {
    std::string pid;
    std::string label;   // relation label used by graph textification
    std::string phrase;  // verb phrase used in rendered sentences

    graph::PredicateRef ref() const { return {pid, label}; }
    bool operator==(const PredicateSpec&) const = default;
};

// The fixed predicate table the generator draws from.
const std::vector<PredicateSpec>& predicate_table();

struct Fact {
    std::string subject;  // qid
    std::string pid;
    std::string object;  // qid

    bool operator==(const Fact&) const = default;
};

struct WorldConfig {
    std::size_t subjects = 620;
    std::size_t value_pool = 100;
    std::size_t predicates = 20;
    std::size_t min_degree = 3;
    std::size_t max_degree = 20;
    std::size_t min_syllables = 2;
    std::size_t max_syllables = 4;
};

// Closed toy world. Subjects and value-pool entities are disjoint, so no
// subject is ever an object. Facts are grouped by subject in subject order.
struct ToyWorld {
    std::vector<graph::EntityRef> subjects;
    std::vector<graph::EntityRef> values;
    std::vector<PredicateSpec> predicates;
    std::vector<Fact> facts;
    std::uint64_t seed = 0;

    const graph::EntityRef& entity(const std::string& qid) const;
    const PredicateSpec& predicate(const std::string& pid) const;
    bool operator==(const ToyWorld&) const = default;
};

// Syllable inventory used for labels: consonant-vowel pairs.
const std::vector<std::string>& syllable_inventory();

ToyWorld generate_toy_world(const WorldConfig& config, std::uint64_t seed);

// Throws ValidationError for dangling fact endpoints, subject/value overlap or
// labels containing the sentence delimiter.
void validate_world(const ToyWorld& world);

std::string world_to_json(const ToyWorld& world);
ToyWorld world_from_json(std::string_view text);

// "{subject} {phrase} {object}." for every fact.
std::vector<Bite> render_stage1(const ToyWorld& world);

// "{prefix}, {subject} {filler} {phrase} {object}{suffix}." with seeded picks.
std::vector<Bite> render_stage2(const ToyWorld& world, std::uint64_t seed);

struct Stage2Pools {
    std::vector<std::string> prefixes;
    std::vector<std::string> fillers;
    std::vector<std::string> suffixes;
};
const Stage2Pools& stage2_pools();

enum class SplitName { train, validation, test };
std::string_view to_string(SplitName s) noexcept;
SplitName split_from_string(std::string_view s);

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

// qid -> split, ordered by qid.
using SplitManifest = std::map<std::string, SplitName>;

struct SplitResult {
    std::vector<Bite> train;
    std::vector<Bite> validation;
    std::vector<Bite> test;
    SplitManifest manifest;
};

// Seeded shuffle of the sorted distinct subject qids followed by a contiguous
// cut; every bite follows its subject.
SplitResult split_by_subject(const std::vector<Bite>& bites, const SplitRatios& ratios, std::uint64_t seed);

// Routes bites through an existing manifest (used so stage 1 and stage 2 share
// subject splits). Throws ValidationError for subjects absent from it.
SplitResult apply_manifest(const std::vector<Bite>& bites, const SplitManifest& manifest);

std::string manifest_to_tsv(const SplitManifest& m);
SplitManifest manifest_from_tsv(std::string_view text);

graph::StarCollection export_star_graphs(const ToyWorld& world);

// Line-delimited JSON, one bite per line.
std::string bites_to_jsonl(const std::vector<Bite>& bites);

struct BiteLoad {
    std::vector<Bite> bites;
    std::vector<std::string> warnings;
};
BiteLoad bites_from_jsonl(std::string_view text);
void save_bites(const std::vector<Bite>& bites, const std::filesystem::path& path);
BiteLoad load_bites(const std::filesystem::path& path);

}  // namespace kginject::corpus
