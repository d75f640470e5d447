#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kginject/conceptformer.hpp"
#include "kginject/graph_store.hpp"
#include "kginject/hashing.hpp"
#include "kginject/prompting.hpp"
#include "kginject/toy_lm.hpp"

namespace kginject::table {

inline constexpr std::uint16_t kFormatVersion = 1;

struct TableHeader {
    std::uint16_t version = kFormatVersion;
    std::uint32_t dim_o = 0;
    std::uint32_t n = 0;
    std::uint64_t count = 0;
    Digest cf_fingerprint{};
    Digest lm_fingerprint{};
};

// Immutable qid -> (n x dim_o) map of precomputed concept vectors.
class ConceptTable {
public:
    ConceptTable() = default;
    ConceptTable(TableHeader header, std::map<std::string, Matrix<float>> entries);

    const TableHeader& header() const noexcept { return header_; }
    std::size_t size() const noexcept { return entries_.size(); }
    // Absent for unknown or excluded qids.
    std::optional<Matrix<float>> lookup(const std::string& qid) const;
    // Throws IntegrityError when either fingerprint differs from the header.
    void require_params(const Digest& cf_fingerprint, const Digest& lm_fingerprint) const;
    const std::map<std::string, Matrix<float>>& entries() const noexcept { return entries_; }

private:
    TableHeader header_;
    std::map<std::string, Matrix<float>> entries_;
};

std::vector<std::uint8_t> encode(const ConceptTable& table);
// Throws ParseError for a malformed header and IntegrityError naming the qid
// for a truncated or overlong entry.
ConceptTable decode(std::span<const std::uint8_t> bytes);

struct BuildResult {
    std::filesystem::path path;
    std::filesystem::path sidecar;
    std::size_t entries = 0;
    std::vector<std::string> exclusions;
    std::string file_hash;
};

// Precomputes vectors for every star center with at least one neighbor and
// writes the table plus a JSON sidecar (exclusions, file hash, top_m).
BuildResult build_table(const graph::StarCollection& stars, const cf::CFParams<float>& cf,
                        const lm::LMParams<float>& lm, const prompt::LabelBank& bank, std::size_t top_m,
                        const std::filesystem::path& path, unsigned threads);

std::filesystem::path sidecar_path(const std::filesystem::path& table_path);

// Reads the table, checks the file hash recorded in the sidecar.
ConceptTable open_table(const std::filesystem::path& path);

// Vector provider backed by the table (lifetime of `table` must cover use).
prompt::VectorProvider table_provider(const ConceptTable& table);

}  // namespace kginject::table
