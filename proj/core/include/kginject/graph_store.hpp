#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace kginject::graph {

inline constexpr std::size_t kMaxNeighbors = 100;

struct EntityRef {
    std::string qid;
    std::string label;
    double pagerank = 0.0;

    bool operator==(const EntityRef&) const = default;
};

struct PredicateRef {
    std::string pid;
    std::string label;

    bool operator==(const PredicateRef&) const = default;
};

struct Neighbor {
    PredicateRef predicate;
    EntityRef entity;

    bool operator==(const Neighbor&) const = default;
};

// A center entity and its 1-hop neighbors, pagerank-descending with ties
// broken by neighbor qid then predicate pid (both ascending). A neighbor that
// is reachable through several predicates appears once per predicate.
struct StarGraph {
    EntityRef center;
    std::vector<Neighbor> neighbors;

    std::size_t degree() const noexcept { return neighbors.size(); }
    bool operator==(const StarGraph&) const = default;
};

// Keyed by center qid; ordered so iteration is deterministic.
using StarCollection = std::map<std::string, StarGraph>;

struct LoadResult {
    StarCollection graphs;
    std::vector<std::string> warnings;
};

// Accepts either one JSON array of records or one record per line; the format
// is picked from the first non-whitespace character. Throws ParseError naming
// the record index on malformed input or a duplicate center.
LoadResult parse_star_graphs(std::string_view text);
LoadResult load_star_graphs(const std::filesystem::path& path);

// Canonical form: a JSON array, records in center-qid order, fixed key order.
std::string to_canonical_json(const StarCollection& graphs);
void save_star_graphs(const StarCollection& graphs, const std::filesystem::path& path);

// Sorts, validates and truncates in place. Throws ValidationError on invariant
// violations that cannot be repaired; truncation to kMaxNeighbors is reported
// through `warnings` when provided.
void normalize(StarGraph& g, std::vector<std::string>* warnings = nullptr);

// Strict weak order used for neighbor ranking.
bool ranks_before(const Neighbor& a, const Neighbor& b) noexcept;

std::vector<Neighbor> top_neighbors(const StarGraph& g, std::size_t limit);

enum class DegreeBucket { isolated, niche, moderate, famous };

// 1-10 niche, 11-90 moderate, 91-100 famous; 0 neighbors is isolated.
DegreeBucket degree_bucket(std::size_t degree) noexcept;
inline DegreeBucket degree_bucket(const StarGraph& g) noexcept { return degree_bucket(g.degree()); }
std::string_view to_string(DegreeBucket b) noexcept;

}  // namespace kginject::graph
