#include "kginject/lookup_store.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/parallel.hpp"

namespace kginject::table {

namespace {
constexpr char kMagic[4] = {'C', 'F', 'L', 'T'};
}

ConceptTable::ConceptTable(TableHeader header, std::map<std::string, Matrix<float>> entries)
    : header_(header), entries_(std::move(entries)) {
    header_.count = entries_.size();
    for (const auto& [qid, m] : entries_)
        if (m.rows() != header_.n || m.cols() != header_.dim_o)
            throw ValidationError("entry " + qid + " has shape " + std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) + ", header says " + std::to_string(header_.n) + "x" +
                                  std::to_string(header_.dim_o));
}

std::optional<Matrix<float>> ConceptTable::lookup(const std::string& qid) const {
    const auto it = entries_.find(qid);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void ConceptTable::require_params(const Digest& cf_fp, const Digest& lm_fp) const {
    if (cf_fp != header_.cf_fingerprint)
        throw IntegrityError("concept table was built with ConceptFormer " + to_hex(header_.cf_fingerprint) +
                             ", supplied parameters are " + to_hex(cf_fp));
    if (lm_fp != header_.lm_fingerprint)
        throw IntegrityError("concept table was built with LM " + to_hex(header_.lm_fingerprint) +
                             ", supplied LM is " + to_hex(lm_fp));
}

std::vector<std::uint8_t> encode(const ConceptTable& table) {
    const auto& h = table.header();
    ByteWriter w;
    w.put_string(std::string_view(kMagic, 4));
    w.put<std::uint16_t>(h.version);
    w.put<std::uint32_t>(h.dim_o);
    w.put<std::uint32_t>(h.n);
    w.put<std::uint64_t>(table.size());
    w.put_bytes(h.cf_fingerprint);
    w.put_bytes(h.lm_fingerprint);
    for (const auto& [qid, m] : table.entries()) {
        if (qid.size() > 0xFFFF) throw ValidationError("qid too long for the table format: " + qid);
        w.put<std::uint16_t>(static_cast<std::uint16_t>(qid.size()));
        w.put_string(qid);
        w.put_f32(m.flat());
    }
    return w.take();
}

ConceptTable decode(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (r.get_string(4) != std::string_view(kMagic, 4)) throw ParseError("not a CFLT file (bad magic)");
    TableHeader h;
    h.version = r.get<std::uint16_t>();
    if (h.version != kFormatVersion) throw ParseError("unsupported CFLT version " + std::to_string(h.version));
    h.dim_o = r.get<std::uint32_t>();
    h.n = r.get<std::uint32_t>();
    h.count = r.get<std::uint64_t>();
    if (h.dim_o == 0 || h.n == 0) throw ParseError("CFLT header has a zero dimension");
    r.get_bytes(h.cf_fingerprint);
    r.get_bytes(h.lm_fingerprint);
    const std::size_t floats = static_cast<std::size_t>(h.n) * h.dim_o;
    std::map<std::string, Matrix<float>> entries;
    std::string prev;
    for (std::uint64_t i = 0; i < h.count; ++i) {
        const auto len = r.get<std::uint16_t>();
        const std::string qid = r.get_string(len);
        if (r.remaining() < floats * sizeof(float))
            throw IntegrityError("table entry " + qid + " is truncated (" + std::to_string(r.remaining()) +
                                 " bytes left, need " + std::to_string(floats * sizeof(float)) + ")");
        if (i > 0 && qid <= prev) throw IntegrityError("table entry " + qid + " is out of order or duplicated");
        Matrix<float> m(h.n, h.dim_o);
        r.get_f32(m.flat());
        entries.emplace(qid, std::move(m));
        prev = qid;
    }
    if (r.remaining() != 0)
        throw IntegrityError("table has " + std::to_string(r.remaining()) + " unexpected bytes after entry " + prev);
    return ConceptTable(h, std::move(entries));
}

std::filesystem::path sidecar_path(const std::filesystem::path& table_path) {
    auto p = table_path;
    p += ".json";
    return p;
}

BuildResult build_table(const graph::StarCollection& stars, const cf::CFParams<float>& cf,
                        const lm::LMParams<float>& lm, const prompt::LabelBank& bank, std::size_t top_m,
                        const std::filesystem::path& path, unsigned threads) {
    if (cf.dim_o != lm.config.dim)
        throw ValidationError("ConceptFormer output width " + std::to_string(cf.dim_o) + " does not match LM dim " +
                              std::to_string(lm.config.dim));
    if (cf.dim_i != lm.config.dim)
        throw ValidationError("ConceptFormer input width " + std::to_string(cf.dim_i) + " does not match LM dim " +
                              std::to_string(lm.config.dim));
    std::vector<const graph::StarGraph*> todo;
    BuildResult result;
    for (const auto& [qid, star] : stars) {
        if (star.degree() == 0)
            result.exclusions.push_back(qid);
        else
            todo.push_back(&star);
    }
    std::vector<Matrix<float>> vectors(todo.size());
    parallel_for(todo.size(), threads, [&](std::size_t i) {
        vectors[i] = cf::forward(cf, prompt::embed_subgraph(*todo[i], top_m, bank)).vectors;
    });
    std::map<std::string, Matrix<float>> entries;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        if (!all_finite(vectors[i])) throw ValidationError("non-finite concept vectors for " + todo[i]->center.qid);
        entries.emplace(todo[i]->center.qid, std::move(vectors[i]));
    }
    TableHeader h;
    h.dim_o = static_cast<std::uint32_t>(cf.dim_o);
    h.n = static_cast<std::uint32_t>(cf.n());
    h.cf_fingerprint = cf::fingerprint(cf);
    h.lm_fingerprint = lm::fingerprint(lm);
    const ConceptTable table(h, std::move(entries));
    const auto bytes = encode(table);
    write_file_bytes(path, bytes);

    result.path = path;
    result.sidecar = sidecar_path(path);
    result.entries = table.size();
    result.file_hash = to_hex(sha256(bytes));
    nlohmann::ordered_json side;
    side["file"] = path.filename().string();
    side["file_sha256"] = result.file_hash;
    side["entries"] = result.entries;
    side["n"] = h.n;
    side["dim_o"] = h.dim_o;
    side["top_m"] = top_m;
    side["cf_fingerprint"] = to_hex(h.cf_fingerprint);
    side["lm_fingerprint"] = to_hex(h.lm_fingerprint);
    side["exclusions"] = result.exclusions;
    write_text_file(result.sidecar, side.dump(2) + "\n");
    spdlog::info("concept table: {} entries, {} excluded", result.entries, result.exclusions.size());
    return result;
}

ConceptTable open_table(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    const auto side_path = sidecar_path(path);
    if (!std::filesystem::exists(side_path)) throw IntegrityError("missing table sidecar " + side_path.string());
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_text_file(side_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("malformed table sidecar " + side_path.string() + ": " + e.what());
    }
    const std::string expected = side.value("file_sha256", "");
    const std::string actual = to_hex(sha256(bytes));
    if (expected != actual)
        throw IntegrityError("table " + path.string() + " hash " + actual + " does not match sidecar " + expected);
    return decode(bytes);
}

prompt::VectorProvider table_provider(const ConceptTable& table) {
    return [&table](const prompt::InjectionPlan& plan) { return table.lookup(plan.center_qid); };
}

}  // namespace kginject::table
