#include "kginject/graph_store.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"

namespace kginject::graph {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string require_string(const json& obj, const char* key, const char* where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string())
        throw ValidationError(std::string(where) + ": missing string field '" + key + "'");
    std::string s = it->get<std::string>();
    if (s.empty()) throw ValidationError(std::string(where) + ": field '" + key + "' is empty");
    return s;
}

double require_pagerank(const json& obj, const char* where) {
    auto it = obj.find("pagerank");
    if (it == obj.end() || !it->is_number())
        throw ValidationError(std::string(where) + ": missing numeric field 'pagerank'");
    const double v = it->get<double>();
    if (!std::isfinite(v) || v < 0.0) throw ValidationError(std::string(where) + ": pagerank must be finite and >= 0");
    return v;
}

EntityRef parse_entity(const json& obj, const char* where) {
    if (!obj.is_object()) throw ValidationError(std::string(where) + ": expected an object");
    return {require_string(obj, "qid", where), require_string(obj, "label", where), require_pagerank(obj, where)};
}

StarGraph parse_record(const json& rec) {
    if (!rec.is_object()) throw ValidationError("expected an object");
    auto c = rec.find("center");
    if (c == rec.end()) throw ValidationError("missing 'center'");
    StarGraph g;
    g.center = parse_entity(*c, "center");
    auto ns = rec.find("neighbors");
    if (ns == rec.end() || !ns->is_array()) throw ValidationError("missing 'neighbors' array");
    g.neighbors.reserve(ns->size());
    for (std::size_t i = 0; i < ns->size(); ++i) {
        const json& n = (*ns)[i];
        const std::string where = "neighbor " + std::to_string(i);
        Neighbor nb;
        nb.entity = parse_entity(n, where.c_str());
        auto p = n.find("predicate");
        if (p == n.end() || !p->is_object()) throw ValidationError(where + ": missing 'predicate'");
        nb.predicate = {require_string(*p, "pid", where.c_str()), require_string(*p, "label", where.c_str())};
        g.neighbors.push_back(std::move(nb));
    }
    return g;
}

void add_record(LoadResult& out, const json& rec, std::size_t index) {
    StarGraph g;
    try {
        g = parse_record(rec);
        normalize(g, &out.warnings);
    } catch (const ValidationError& e) {
        throw ParseError(e.what(), index);
    }
    std::string key = g.center.qid;
    if (!out.graphs.emplace(key, std::move(g)).second)
        throw ParseError("duplicate center qid " + key, index);
}

}  // namespace

bool ranks_before(const Neighbor& a, const Neighbor& b) noexcept {
    if (a.entity.pagerank != b.entity.pagerank) return a.entity.pagerank > b.entity.pagerank;
    if (a.entity.qid != b.entity.qid) return a.entity.qid < b.entity.qid;
    return a.predicate.pid < b.predicate.pid;
}

void normalize(StarGraph& g, std::vector<std::string>* warnings) {
    if (g.center.qid.empty() || g.center.label.empty()) throw ValidationError("center qid and label must be non-empty");
    if (!std::isfinite(g.center.pagerank) || g.center.pagerank < 0.0)
        throw ValidationError("center pagerank must be finite and >= 0");
    for (const auto& n : g.neighbors) {
        if (n.entity.qid == g.center.qid) throw ValidationError("neighbor qid equals center qid " + g.center.qid);
        if (n.entity.qid.empty() || n.entity.label.empty() || n.predicate.pid.empty() || n.predicate.label.empty())
            throw ValidationError("neighbor identifiers and labels must be non-empty");
        if (!std::isfinite(n.entity.pagerank) || n.entity.pagerank < 0.0)
            throw ValidationError("neighbor pagerank must be finite and >= 0");
    }
    std::stable_sort(g.neighbors.begin(), g.neighbors.end(), ranks_before);
    if (g.neighbors.size() > kMaxNeighbors) {
        std::string msg = "center " + g.center.qid + ": " + std::to_string(g.neighbors.size()) +
                          " neighbors, keeping the top " + std::to_string(kMaxNeighbors) + " by pagerank";
        spdlog::warn("{}", msg);
        if (warnings) warnings->push_back(std::move(msg));
        g.neighbors.resize(kMaxNeighbors);
    }
}

LoadResult parse_star_graphs(std::string_view text) {
    LoadResult out;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return out;

    if (text[first] == '[') {
        json doc;
        try {
            doc = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON document: ") + e.what());
        }
        for (std::size_t i = 0; i < doc.size(); ++i) add_record(out, doc[i], i);
        return out;
    }

    std::size_t index = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), index);
        }
        add_record(out, rec, index);
        ++index;
    }
    return out;
}

LoadResult load_star_graphs(const std::filesystem::path& path) {
    return parse_star_graphs(read_text_file(path));
}

std::string to_canonical_json(const StarCollection& graphs) {
    ordered_json doc = ordered_json::array();
    for (const auto& [qid, g] : graphs) {
        ordered_json rec;
        rec["center"] = {{"qid", g.center.qid}, {"label", g.center.label}, {"pagerank", g.center.pagerank}};
        ordered_json ns = ordered_json::array();
        for (const auto& n : g.neighbors) {
            ns.push_back({{"qid", n.entity.qid},
                          {"label", n.entity.label},
                          {"pagerank", n.entity.pagerank},
                          {"predicate", {{"pid", n.predicate.pid}, {"label", n.predicate.label}}}});
        }
        rec["neighbors"] = std::move(ns);
        doc.push_back(std::move(rec));
    }
    return doc.dump(1) + "\n";
}

void save_star_graphs(const StarCollection& graphs, const std::filesystem::path& path) {
    write_text_file(path, to_canonical_json(graphs));
}

std::vector<Neighbor> top_neighbors(const StarGraph& g, std::size_t limit) {
    std::vector<Neighbor> out = g.neighbors;
    std::stable_sort(out.begin(), out.end(), ranks_before);
    if (out.size() > limit) out.resize(limit);
    return out;
}

DegreeBucket degree_bucket(std::size_t degree) noexcept {
    if (degree == 0) return DegreeBucket::isolated;
    if (degree <= 10) return DegreeBucket::niche;
    if (degree <= 90) return DegreeBucket::moderate;
    return DegreeBucket::famous;
}

std::string_view to_string(DegreeBucket b) noexcept {
    switch (b) {
        case DegreeBucket::isolated: return "isolated";
        case DegreeBucket::niche: return "niche";
        case DegreeBucket::moderate: return "moderate";
        case DegreeBucket::famous: return "famous";
    }
    return "unknown";
}

}  // namespace kginject::graph
