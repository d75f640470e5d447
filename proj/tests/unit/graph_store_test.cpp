#include <gtest/gtest.h>

#include <filesystem>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/graph_store.hpp"

using namespace kginject;
using namespace kginject::graph;

namespace {

std::string neighbor_json(const std::string& qid, double pr, const std::string& pid = "P1") {
    return R"({"qid":")" + qid + R"(","label":"l)" + qid + R"(","pagerank":)" + std::to_string(pr) +
           R"(,"predicate":{"pid":")" + pid + R"(","label":"rel"}})";
}

std::string record(const std::string& center, const std::vector<std::string>& neighbors) {
    std::string s = R"({"center":{"qid":")" + center + R"(","label":"c","pagerank":1.0},"neighbors":[)";
    for (std::size_t i = 0; i < neighbors.size(); ++i) s += (i ? "," : "") + neighbors[i];
    return s + "]}";
}

}  // namespace

TEST(GraphStore, ReordersNeighborsByPagerank) {
    const auto r = parse_star_graphs(
        "[" + record("Q1", {neighbor_json("Q2", 0.1), neighbor_json("Q3", 0.5), neighbor_json("Q4", 0.3)}) + "]");
    const auto& g = r.graphs.at("Q1");
    ASSERT_EQ(g.degree(), 3u);
    EXPECT_DOUBLE_EQ(g.neighbors[0].entity.pagerank, 0.5);
    EXPECT_DOUBLE_EQ(g.neighbors[1].entity.pagerank, 0.3);
    EXPECT_DOUBLE_EQ(g.neighbors[2].entity.pagerank, 0.1);
}

TEST(GraphStore, EmptyNeighborListAccepted) {
    const auto r = parse_star_graphs("[" + record("Q1", {}) + "]");
    EXPECT_EQ(r.graphs.at("Q1").degree(), 0u);
    EXPECT_EQ(degree_bucket(r.graphs.at("Q1")), DegreeBucket::isolated);
}

TEST(GraphStore, TruncatesToHundredWithWarning) {
    std::vector<std::string> n;
    for (int i = 0; i < 120; ++i) n.push_back(neighbor_json("Q" + std::to_string(1000 + i), (i + 1) / 1000.0));
    const auto r = parse_star_graphs("[" + record("Q1", n) + "]");
    const auto& g = r.graphs.at("Q1");
    ASSERT_EQ(g.degree(), 100u);
    EXPECT_FALSE(r.warnings.empty());
    // The 20 lowest (Q1000..Q1019) are gone.
    EXPECT_DOUBLE_EQ(g.neighbors.back().entity.pagerank, 0.021);
}

TEST(GraphStore, LineDelimitedVariant) {
    const auto r = parse_star_graphs(record("Q1", {neighbor_json("Q2", 0.2)}) + "\n" + record("Q5", {}) + "\n");
    EXPECT_EQ(r.graphs.size(), 2u);
}

TEST(GraphStore, MalformedRecordNamesIndex) {
    try {
        parse_star_graphs("[" + record("Q1", {}) + R"(,{"center":{"qid":"Q2"}}])");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        ASSERT_TRUE(e.record().has_value());
        EXPECT_EQ(*e.record(), 1u);
    }
}

TEST(GraphStore, DuplicateCenterRejected) {
    EXPECT_THROW(parse_star_graphs("[" + record("Q1", {}) + "," + record("Q1", {}) + "]"), ParseError);
}

TEST(GraphStore, CenterAmongNeighborsRejected) {
    EXPECT_THROW(parse_star_graphs("[" + record("Q1", {neighbor_json("Q1", 0.2)}) + "]"), Error);
}

TEST(GraphStore, NegativePagerankRejected) {
    EXPECT_THROW(parse_star_graphs("[" + record("Q1", {neighbor_json("Q2", -0.5)}) + "]"), Error);
}

TEST(GraphStore, TopNeighbors) {
    const auto r = parse_star_graphs(
        "[" + record("Q1", {neighbor_json("Q2", 0.1), neighbor_json("Q3", 0.5), neighbor_json("Q4", 0.3)}) + "]");
    const auto& g = r.graphs.at("Q1");
    const auto two = top_neighbors(g, 2);
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two[0].entity.qid, "Q3");
    EXPECT_EQ(two[1].entity.qid, "Q4");
    EXPECT_EQ(top_neighbors(g, 10).size(), 3u);
}

TEST(GraphStore, TieBreakByQid) {
    const auto r = parse_star_graphs("[" + record("Q1", {neighbor_json("Q7", 0.4), neighbor_json("Q2", 0.4)}) + "]");
    const auto n = top_neighbors(r.graphs.at("Q1"), 2);
    EXPECT_EQ(n[0].entity.qid, "Q2");
    EXPECT_EQ(n[1].entity.qid, "Q7");
}

TEST(GraphStore, DuplicateEntityViaTwoPredicatesKept) {
    const auto r = parse_star_graphs(
        "[" + record("Q1", {neighbor_json("Q2", 0.4, "P1"), neighbor_json("Q2", 0.4, "P2")}) + "]");
    EXPECT_EQ(r.graphs.at("Q1").degree(), 2u);
}

TEST(GraphStore, DegreeBuckets) {
    EXPECT_EQ(degree_bucket(0), DegreeBucket::isolated);
    EXPECT_EQ(degree_bucket(1), DegreeBucket::niche);
    EXPECT_EQ(degree_bucket(5), DegreeBucket::niche);
    EXPECT_EQ(degree_bucket(10), DegreeBucket::niche);
    EXPECT_EQ(degree_bucket(11), DegreeBucket::moderate);
    EXPECT_EQ(degree_bucket(90), DegreeBucket::moderate);
    EXPECT_EQ(degree_bucket(91), DegreeBucket::famous);
    EXPECT_EQ(degree_bucket(100), DegreeBucket::famous);
    EXPECT_EQ(to_string(DegreeBucket::niche), "niche");
}

TEST(GraphStore, BucketsPartitionRange) {
    for (std::size_t m = 1; m <= 100; ++m) {
        const int hits = (degree_bucket(m) == DegreeBucket::niche) + (degree_bucket(m) == DegreeBucket::moderate) +
                         (degree_bucket(m) == DegreeBucket::famous);
        EXPECT_EQ(hits, 1) << m;
    }
}

TEST(GraphStore, CanonicalRoundTripIsByteIdentical) {
    const auto r = parse_star_graphs("[" + record("Q9", {neighbor_json("Q2", 0.1), neighbor_json("Q3", 0.5)}) + "," +
                                     record("Q1", {neighbor_json("Q4", 0.25)}) + "]");
    const auto first = to_canonical_json(r.graphs);
    const auto again = to_canonical_json(parse_star_graphs(first).graphs);
    EXPECT_EQ(first, again);

    const auto dir = std::filesystem::temp_directory_path() / "kginject_graph_test";
    std::filesystem::create_directories(dir);
    save_star_graphs(r.graphs, dir / "stars.json");
    EXPECT_EQ(load_star_graphs(dir / "stars.json").graphs, r.graphs);
    EXPECT_EQ(read_text_file(dir / "stars.json"), first);
}

TEST(GraphStore, PagerankNonIncreasingAfterLoad) {
    std::vector<std::string> n;
    for (int i = 0; i < 40; ++i) n.push_back(neighbor_json("Q" + std::to_string(100 + i), ((i * 37) % 11) / 10.0));
    const auto& g = parse_star_graphs("[" + record("Q1", n) + "]").graphs.at("Q1");
    for (std::size_t i = 0; i + 1 < g.degree(); ++i)
        EXPECT_GE(g.neighbors[i].entity.pagerank, g.neighbors[i + 1].entity.pagerank);
}
