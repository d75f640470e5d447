#pragma once

#include <cstddef>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kginject/corpus.hpp"
#include "kginject/graph_store.hpp"
#include "kginject/prompting.hpp"
#include "kginject/toy_lm.hpp"

namespace kginject::eval {

// 1 + number of logits strictly greater than the target's logit.
template <class T>
std::size_t token_rank(std::span<const T> logits, lm::TokenId target);

struct RankResult {
    std::vector<std::size_t> token_ranks;
    std::size_t rank() const;  // max over tokens
    bool hit(std::size_t k) const { return rank() <= k; }
};

// Teacher-forced ranks of the targets after the prompt rows.
OrSkip<RankResult> sequence_rank(const lm::LMParams<float>& lm, const Matrix<float>& prompt_rows,
                                 std::span<const lm::TokenId> targets);
OrSkip<RankResult> sequence_rank(const lm::LMParams<float>& lm, const prompt::AssembledPrompt& prompt);

struct BucketStats {
    std::size_t examples = 0;
    std::vector<double> hit_pct;  // parallel to EvalReport::ks
};

struct EvalReport {
    std::string mode;
    std::string label;  // e.g. "cf-5"
    std::size_t n_vectors = 0;
    std::string vector_source;  // "live" or "table" in cf mode
    std::string dataset_name;
    std::string dataset_fingerprint;
    std::size_t dataset_size = 0;
    std::size_t examples = 0;  // evaluated
    std::size_t skipped = 0;
    std::size_t downgraded = 0;
    std::map<std::string, std::size_t> skip_reasons;
    std::vector<std::size_t> ks;
    std::vector<double> hit_pct;
    std::map<std::string, BucketStats> buckets;  // niche / moderate / famous / isolated
    double mean_hard_tokens = 0.0;
    double mean_soft_vectors = 0.0;
    double mean_baseline_tokens = 0.0;
    double mean_expansion = 0.0;
    std::map<std::string, std::string> provenance;

    double hit(std::size_t k) const;  // throws if k was not evaluated
    nlohmann::ordered_json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    std::string text_table() const;
};

struct ExampleRecord {
    std::size_t index = 0;
    std::string subject_qid;
    std::string object_qid;
    std::string bucket;
    std::optional<std::string> skip_reason;
    RankResult ranks;
    std::optional<prompt::AssembledPrompt> prompt;
};

struct EvalResult {
    EvalReport report;
    std::vector<ExampleRecord> audit;

    std::string audit_jsonl() const;
};

struct CfContext {
    const prompt::LabelBank* bank = nullptr;
    prompt::VectorProvider vectors;
    std::size_t n_vectors = 0;
    std::string source = "live";
    std::string fingerprint;
};

struct EvalOptions {
    prompt::Mode mode = prompt::Mode::baseline;
    std::vector<std::size_t> ks{1, 5, 10};
    std::size_t top_m = 100;
    std::string dataset_name = "test";
    unsigned threads = 1;
};

std::string dataset_fingerprint(const std::vector<corpus::Bite>& dataset);

// cf mode requires `cf`; subjects without a star graph are skipped and counted.
EvalResult evaluate(const std::vector<corpus::Bite>& dataset, const graph::StarCollection& stars,
                    const lm::LMParams<float>& lm, const lm::Tokenizer& tokenizer, const EvalOptions& options,
                    const CfContext* cf = nullptr);

struct Comparison {
    nlohmann::ordered_json json;
    std::string text;
};

// Relative change (new - old) / old * 100 of every report against the first,
// plus token-efficiency ratios of rag reports over cf reports. Throws
// ValidationError for fewer than two reports or mismatched datasets.
Comparison compare_report(const std::vector<EvalReport>& reports);

std::optional<double> relative_change(double old_value, double new_value);

}  // namespace kginject::eval
