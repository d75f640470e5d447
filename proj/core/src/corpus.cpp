#include "kginject/corpus.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/rng.hpp"
#include "kginject/utf8.hpp"

namespace kginject::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

const std::vector<PredicateSpec>& predicate_table() {
    static const std::vector<PredicateSpec> table = {
        {"P101", "birthplace", "was born in"},
        {"P102", "employer", "worked for"},
        {"P103", "facial hair", "wore a"},
        {"P104", "spouse", "married"},
        {"P105", "residence", "lived in"},
        {"P106", "educated at", "studied at"},
        {"P107", "instrument", "played the"},
        {"P108", "pet", "owned a"},
        {"P109", "favorite food", "loved eating"},
        {"P110", "language", "spoke"},
        {"P111", "religion", "followed"},
        {"P112", "team", "played for"},
        {"P113", "founder of", "founded"},
        {"P114", "award", "received the"},
        {"P115", "vehicle", "drove a"},
        {"P116", "mentor", "was trained by"},
        {"P117", "genre", "wrote in the style of"},
        {"P118", "hobby", "enjoyed"},
        {"P119", "rival", "competed against"},
        {"P120", "color", "preferred the color"},
        {"P121", "weapon", "carried a"},
        {"P122", "ship", "sailed on the"},
        {"P123", "patron", "was funded by"},
        {"P124", "deathplace", "died in"},
    };
    return table;
}

const std::vector<std::string>& syllable_inventory() {
    static const std::vector<std::string> syllables = [] {
        std::vector<std::string> s;
        for (char c : std::string("bdfgklmnprstvz"))
            for (char v : std::string("aeiou")) s.push_back(std::string{c, v});
        return s;
    }();
    return syllables;
}

const Stage2Pools& stage2_pools() {
    static const Stage2Pools pools = {
        {"In the old records", "According to the chronicle", "As the story goes", "Long ago",
         "In the northern valley", "By most accounts", "During the long winter", "Before the great flood",
         "In a letter to a friend", "Among the villagers", "In the second volume", "After the harvest"},
        {"", "reportedly", "apparently", "once", "famously", "allegedly", "quietly", "certainly", "probably",
         "indeed"},
        {"", " long ago", " in those days", " as the elders tell", " without doubt", " for many years",
         " at the time", " before the war"},
    };
    return pools;
}

std::pair<std::size_t, std::size_t> byte_range(std::string_view text, const Span& span) {
    const std::size_t b = utf8::byte_offset(text, span.start);
    const std::size_t e = utf8::byte_offset(text, span.end);
    if (b == std::string_view::npos || e == std::string_view::npos || b > e)
        throw ValidationError("span [" + std::to_string(span.start) + "," + std::to_string(span.end) +
                              ") outside text");
    return {b, e};
}

void validate(const Bite& bite) {
    const std::size_t len = utf8::length(bite.text);
    if (len > kMaxBiteChars)
        throw ValidationError("text has " + std::to_string(len) + " characters, limit " + std::to_string(kMaxBiteChars));
    for (const Mention* m : {&bite.subject, &bite.object}) {
        if (!(m->span.start < m->span.end && m->span.end <= len))
            throw ValidationError("invalid span for " + m->entity.qid);
        auto [b, e] = byte_range(bite.text, m->span);
        if (std::string_view(bite.text).substr(b, e - b) != m->entity.label)
            throw ValidationError("span text does not match label '" + m->entity.label + "'");
    }
    if (bite.subject.span.end > bite.object.span.start)
        throw ValidationError("subject span must end before the object span starts");
}

bool object_starts_sentence(const Bite& bite) {
    auto [b, e] = byte_range(bite.text, bite.object.span);
    std::size_t i = b;
    while (i > 0 && (bite.text[i - 1] == ' ' || bite.text[i - 1] == '\t' || bite.text[i - 1] == '\n')) --i;
    if (i == 0) return true;
    const char c = bite.text[i - 1];
    return c == '.' || c == '!' || c == '?';
}

const graph::EntityRef& ToyWorld::entity(const std::string& qid) const {
    for (const auto* list : {&subjects, &values})
        for (const auto& e : *list)
            if (e.qid == qid) return e;
    throw ValidationError("unknown entity " + qid);
}

const PredicateSpec& ToyWorld::predicate(const std::string& pid) const {
    for (const auto& p : predicates)
        if (p.pid == pid) return p;
    throw ValidationError("unknown predicate " + pid);
}

namespace {

std::string make_label(Rng& rng, const WorldConfig& config) {
    const auto& syl = syllable_inventory();
    const auto count = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(config.min_syllables), static_cast<std::int64_t>(config.max_syllables)));
    std::string label;
    for (std::size_t i = 0; i < count; ++i) label += syl[rng.uniform_index(syl.size())];
    return label;
}

// Positive score in (0, 1].
double draw_pagerank(Rng& rng) { return 1.0 - rng.uniform01(); }

}  // namespace

ToyWorld generate_toy_world(const WorldConfig& config, std::uint64_t seed) {
    if (config.subjects < 10) throw ValidationError("world needs at least 10 subjects");
    if (config.value_pool < 20) throw ValidationError("value pool needs at least 20 entities");
    if (config.predicates < 3) throw ValidationError("world needs at least 3 predicates");
    if (config.predicates > predicate_table().size())
        throw ValidationError("at most " + std::to_string(predicate_table().size()) + " predicates are available");
    if (config.min_degree < 1 || config.min_degree > config.max_degree || config.max_degree > graph::kMaxNeighbors)
        throw ValidationError("degrees must satisfy 1 <= min_degree <= max_degree <= 100");
    if (config.max_degree > config.predicates * config.value_pool)
        throw ValidationError("max_degree exceeds the number of distinct (predicate, object) pairs");
    if (config.min_syllables < 2 || config.min_syllables > config.max_syllables)
        throw ValidationError("labels need 2 <= min_syllables <= max_syllables");

    Rng rng(seed);
    ToyWorld w;
    w.seed = seed;
    w.predicates.assign(predicate_table().begin(), predicate_table().begin() + static_cast<std::ptrdiff_t>(config.predicates));

    std::unordered_set<std::string> used;
    auto fresh_label = [&] {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            std::string l = make_label(rng, config);
            if (used.insert(l).second) return l;
        }
        throw ValidationError("label space exhausted; raise max_syllables");
    };
    for (std::size_t i = 0; i < config.subjects; ++i)
        w.subjects.push_back({"Q" + std::to_string(1 + i), fresh_label(), draw_pagerank(rng)});
    for (std::size_t i = 0; i < config.value_pool; ++i)
        w.values.push_back({"Q" + std::to_string(100001 + i), fresh_label(), draw_pagerank(rng)});

    const std::size_t np = w.predicates.size();
    const std::size_t nv = w.values.size();
    for (const auto& s : w.subjects) {
        const auto deg = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(config.min_degree), static_cast<std::int64_t>(config.max_degree)));
        std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (predicate, value)
        if (deg <= np) {
            std::vector<std::size_t> preds(np);
            std::iota(preds.begin(), preds.end(), 0);
            rng.shuffle(preds);
            preds.resize(deg);
            std::sort(preds.begin(), preds.end());
            for (auto p : preds) pairs.emplace_back(p, rng.uniform_index(nv));
        } else {
            std::set<std::pair<std::size_t, std::size_t>> chosen;
            while (chosen.size() < deg) chosen.emplace(rng.uniform_index(np), rng.uniform_index(nv));
            pairs.assign(chosen.begin(), chosen.end());
        }
        for (auto [p, v] : pairs) w.facts.push_back({s.qid, w.predicates[p].pid, w.values[v].qid});
    }
    validate_world(w);
    return w;
}

void validate_world(const ToyWorld& world) {
    std::unordered_set<std::string> subjects;
    std::unordered_set<std::string> values;
    for (const auto& e : world.subjects) {
        if (e.label.find('.') != std::string::npos) throw ValidationError("label contains '.': " + e.label);
        if (!subjects.insert(e.qid).second) throw ValidationError("duplicate qid " + e.qid);
    }
    for (const auto& e : world.values) {
        if (e.label.find('.') != std::string::npos) throw ValidationError("label contains '.': " + e.label);
        if (subjects.count(e.qid) || !values.insert(e.qid).second) throw ValidationError("duplicate qid " + e.qid);
    }
    std::unordered_set<std::string> pids;
    for (const auto& p : world.predicates) pids.insert(p.pid);
    for (const auto& f : world.facts) {
        if (!subjects.count(f.subject)) throw ValidationError("fact subject is not a subject entity: " + f.subject);
        if (!values.count(f.object)) throw ValidationError("fact object is not a value-pool entity: " + f.object);
        if (!pids.count(f.pid)) throw ValidationError("fact uses unknown predicate " + f.pid);
    }
}

std::string world_to_json(const ToyWorld& world) {
    ordered_json doc;
    doc["seed"] = world.seed;
    auto entities = [](const std::vector<graph::EntityRef>& list) {
        ordered_json a = ordered_json::array();
        for (const auto& e : list) a.push_back({{"qid", e.qid}, {"label", e.label}, {"pagerank", e.pagerank}});
        return a;
    };
    doc["subjects"] = entities(world.subjects);
    doc["values"] = entities(world.values);
    ordered_json preds = ordered_json::array();
    for (const auto& p : world.predicates) preds.push_back({{"pid", p.pid}, {"label", p.label}, {"phrase", p.phrase}});
    doc["predicates"] = std::move(preds);
    ordered_json facts = ordered_json::array();
    for (const auto& f : world.facts) facts.push_back({f.subject, f.pid, f.object});
    doc["facts"] = std::move(facts);
    return doc.dump(1) + "\n";
}

ToyWorld world_from_json(std::string_view text) {
    try {
        const json doc = json::parse(text);
        ToyWorld w;
        w.seed = doc.at("seed").get<std::uint64_t>();
        for (const auto& e : doc.at("subjects"))
            w.subjects.push_back({e.at("qid"), e.at("label"), e.at("pagerank").get<double>()});
        for (const auto& e : doc.at("values"))
            w.values.push_back({e.at("qid"), e.at("label"), e.at("pagerank").get<double>()});
        for (const auto& p : doc.at("predicates")) w.predicates.push_back({p.at("pid"), p.at("label"), p.at("phrase")});
        for (const auto& f : doc.at("facts")) w.facts.push_back({f.at(0), f.at(1), f.at(2)});
        validate_world(w);
        return w;
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid world file: ") + e.what());
    }
}

namespace {

struct Assembly {
    std::string text;
    std::size_t subject_start = 0;  // code points
    std::size_t object_start = 0;
};

Bite make_bite(Assembly a, const graph::EntityRef& subject, const graph::EntityRef& object, const PredicateSpec& p) {
    Bite b;
    b.subject.entity = {subject.qid, subject.label, 0.0};
    b.subject.span = {a.subject_start, a.subject_start + utf8::length(subject.label)};
    b.object.entity = {object.qid, object.label, 0.0};
    b.object.span = {a.object_start, a.object_start + utf8::length(object.label)};
    b.predicate = p.ref();
    b.text = std::move(a.text);
    validate(b);
    return b;
}

}  // namespace

std::vector<Bite> render_stage1(const ToyWorld& world) {
    std::vector<Bite> out;
    out.reserve(world.facts.size());
    for (const auto& f : world.facts) {
        const auto& s = world.entity(f.subject);
        const auto& o = world.entity(f.object);
        const auto& p = world.predicate(f.pid);
        Assembly a;
        a.text = s.label + " " + p.phrase + " ";
        a.subject_start = 0;
        a.object_start = utf8::length(a.text);
        a.text += o.label + ".";
        out.push_back(make_bite(std::move(a), s, o, p));
    }
    return out;
}

std::vector<Bite> render_stage2(const ToyWorld& world, std::uint64_t seed) {
    const auto& pools = stage2_pools();
    Rng rng(seed);
    std::vector<Bite> out;
    out.reserve(world.facts.size());
    for (const auto& f : world.facts) {
        const auto& s = world.entity(f.subject);
        const auto& o = world.entity(f.object);
        const auto& p = world.predicate(f.pid);
        bool done = false;
        for (int attempt = 0; attempt < 10 && !done; ++attempt) {
            // Later attempts only draw from the empty filler/suffix entries.
            const std::string& prefix = pools.prefixes[rng.uniform_index(pools.prefixes.size())];
            const std::string& filler = attempt == 0 ? pools.fillers[rng.uniform_index(pools.fillers.size())] : pools.fillers[0];
            const std::string& suffix = attempt == 0 ? pools.suffixes[rng.uniform_index(pools.suffixes.size())] : pools.suffixes[0];
            Assembly a;
            a.text = prefix + ", ";
            a.subject_start = utf8::length(a.text);
            a.text += s.label + " ";
            if (!filler.empty()) a.text += filler + " ";
            a.text += p.phrase + " ";
            a.object_start = utf8::length(a.text);
            a.text += o.label + suffix + ".";
            if (utf8::length(a.text) > kMaxBiteChars) continue;
            out.push_back(make_bite(std::move(a), s, o, p));
            done = true;
        }
        if (!done)
            throw ValidationError("stage-2 sentence for " + f.subject + "/" + f.pid + " exceeds " +
                                  std::to_string(kMaxBiteChars) + " characters after 10 attempts");
    }
    return out;
}

std::string_view to_string(SplitName s) noexcept {
    switch (s) {
        case SplitName::train: return "train";
        case SplitName::validation: return "val";
        case SplitName::test: return "test";
    }
    return "unknown";
}

SplitName split_from_string(std::string_view s) {
    if (s == "train") return SplitName::train;
    if (s == "val" || s == "validation") return SplitName::validation;
    if (s == "test") return SplitName::test;
    throw ParseError("unknown split name '" + std::string(s) + "'");
}

SplitResult apply_manifest(const std::vector<Bite>& bites, const SplitManifest& manifest) {
    SplitResult r;
    r.manifest = manifest;
    for (const auto& b : bites) {
        auto it = manifest.find(b.subject.entity.qid);
        if (it == manifest.end()) throw ValidationError("subject " + b.subject.entity.qid + " missing from manifest");
        switch (it->second) {
            case SplitName::train: r.train.push_back(b); break;
            case SplitName::validation: r.validation.push_back(b); break;
            case SplitName::test: r.test.push_back(b); break;
        }
    }
    return r;
}

SplitResult split_by_subject(const std::vector<Bite>& bites, const SplitRatios& ratios, std::uint64_t seed) {
    if (ratios.train <= 0 || ratios.validation <= 0 || ratios.test <= 0)
        throw ValidationError("split ratios must be positive");
    if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9)
        throw ValidationError("split ratios must sum to 1");

    std::set<std::string> distinct;
    for (const auto& b : bites) distinct.insert(b.subject.entity.qid);
    std::vector<std::string> subjects(distinct.begin(), distinct.end());
    Rng rng(seed);
    rng.shuffle(subjects);

    const double n = static_cast<double>(subjects.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
    const auto n_val = static_cast<std::size_t>(std::llround(ratios.validation * n));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= subjects.size())
        throw ValidationError("split ratios leave a split without subjects (" + std::to_string(subjects.size()) +
                              " subjects)");

    SplitManifest manifest;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const SplitName s = i < n_train ? SplitName::train : (i < n_train + n_val ? SplitName::validation : SplitName::test);
        manifest.emplace(subjects[i], s);
    }
    return apply_manifest(bites, manifest);
}

std::string manifest_to_tsv(const SplitManifest& m) {
    std::string out;
    for (const auto& [qid, s] : m) {
        out += qid;
        out += '\t';
        out += to_string(s);
        out += '\n';
    }
    return out;
}

SplitManifest manifest_from_tsv(std::string_view text) {
    SplitManifest m;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) {
            ++line_no;
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos) throw ParseError("expected qid<TAB>split", line_no);
        if (!m.emplace(std::string(line.substr(0, tab)), split_from_string(line.substr(tab + 1))).second)
            throw ParseError("duplicate qid in manifest", line_no);
        ++line_no;
    }
    return m;
}

graph::StarCollection export_star_graphs(const ToyWorld& world) {
    graph::StarCollection out;
    for (const auto& s : world.subjects) out.emplace(s.qid, graph::StarGraph{s, {}});
    for (const auto& f : world.facts) {
        auto& g = out.at(f.subject);
        g.neighbors.push_back({world.predicate(f.pid).ref(), world.entity(f.object)});
    }
    for (auto& [qid, g] : out) graph::normalize(g);
    return out;
}

std::string bites_to_jsonl(const std::vector<Bite>& bites) {
    std::string out;
    for (const auto& b : bites) {
        ordered_json j;
        j["text"] = b.text;
        j["subject"] = {{"qid", b.subject.entity.qid},
                        {"label", b.subject.entity.label},
                        {"start", b.subject.span.start},
                        {"end", b.subject.span.end}};
        j["object"] = {{"qid", b.object.entity.qid},
                       {"label", b.object.entity.label},
                       {"start", b.object.span.start},
                       {"end", b.object.span.end}};
        j["predicate"] = {{"pid", b.predicate.pid}, {"label", b.predicate.label}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

BiteLoad bites_from_jsonl(std::string_view text) {
    BiteLoad out;
    std::size_t pos = 0;
    std::size_t index = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            const json j = json::parse(line);
            Bite b;
            b.text = j.at("text").get<std::string>();
            auto mention = [](const json& m) {
                return Mention{{m.at("qid").get<std::string>(), m.at("label").get<std::string>(), 0.0},
                               {m.at("start").get<std::size_t>(), m.at("end").get<std::size_t>()}};
            };
            b.subject = mention(j.at("subject"));
            b.object = mention(j.at("object"));
            b.predicate = {j.at("predicate").at("pid").get<std::string>(), j.at("predicate").at("label").get<std::string>()};
            validate(b);
            if (object_starts_sentence(b))
                out.warnings.push_back("record " + std::to_string(index) + ": object starts a new sentence");
            out.bites.push_back(std::move(b));
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid bite: ") + e.what(), index);
        } catch (const ValidationError& e) {
            throw ParseError(e.what(), index);
        }
        ++index;
    }
    return out;
}

void save_bites(const std::vector<Bite>& bites, const std::filesystem::path& path) {
    write_text_file(path, bites_to_jsonl(bites));
}

BiteLoad load_bites(const std::filesystem::path& path) { return bites_from_jsonl(read_text_file(path)); }

}  // namespace kginject::corpus
