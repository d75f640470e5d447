#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "kginject/conceptformer.hpp"
#include "kginject/corpus.hpp"
#include "kginject/error.hpp"
#include "kginject/graph_store.hpp"
#include "kginject/tokenizer.hpp"
#include "kginject/toy_lm.hpp"

namespace kginject::prompt {

using lm::TokenId;

enum class Mode { baseline, rag, cf };
std::string_view to_string(Mode m) noexcept;
Mode mode_from_string(std::string_view s);

struct Ledger {
    std::size_t hard_tokens = 0;
    std::size_t soft_vectors = 0;
    std::size_t baseline_tokens = 0;  // hard tokens of the plain truncated prefix

    // Context positions added on top of the plain prefix.
    std::size_t expansion() const noexcept { return hard_tokens + soft_vectors - baseline_tokens; }
};

struct AssembledPrompt {
    Mode mode = Mode::baseline;
    std::string center_qid;
    std::vector<TokenId> ids;     // hard tokens in order
    Matrix<float> embeddings;     // cf mode only: hard rows with soft rows spliced in
    std::size_t insertion_index = 0;  // index of the first soft row; ids.size() when none
    std::vector<TokenId> targets;
    Ledger ledger;
    std::size_t neighbors_used = 0;
    std::string downgrade;  // set when cf fell back to the baseline

    // Number of input positions before the first target.
    std::size_t length() const noexcept { return ids.size() + ledger.soft_vectors; }
};

// The bite truncated right before its object.
struct Truncation {
    std::string prefix;        // text[0 : object start), trailing whitespace trimmed
    std::string target_text;   // text[trimmed end : object end], leading space kept
    std::size_t subject_begin;  // byte offsets into prefix
    std::size_t subject_end;
};

OrSkip<Truncation> truncate_before_object(const corpus::Bite& bite);

// Index of the first token that starts at or after `byte`: soft vectors placed
// there follow the token containing the subject's last byte.
std::size_t insertion_index(const lm::Tokenizer& tokenizer, std::string_view prefix, std::size_t subject_end);

// "{subject}, {p1} {o1}, {p2} {o2}, ..."
std::string textify(std::string_view subject_label, const std::vector<graph::Neighbor>& neighbors);
// "{subject} (p1: o1) (p2: o2) ..." kept as a poorly performing reference.
std::string textify_parenthetical(std::string_view subject_label, const std::vector<graph::Neighbor>& neighbors);

// Plain prompt. Skips when the prefix is empty or prompt plus targets
// (teacher-forced, so T - 1 extra rows) exceed `context`.
OrSkip<AssembledPrompt> build_baseline(const corpus::Bite& bite, const lm::Tokenizer& tokenizer, std::size_t context);

// Subject mention replaced in place by the textified top_m neighbors; neighbors
// are dropped from the tail until the prompt fits.
OrSkip<AssembledPrompt> build_rag(const corpus::Bite& bite, const graph::StarGraph& star,
                                  const lm::Tokenizer& tokenizer, std::size_t top_m, std::size_t context);

// Memoized embed_label results over a frozen LM.
class LabelBank {
public:
    LabelBank(const lm::LMParams<float>& lm, const lm::Tokenizer& tokenizer) : lm_(&lm), tokenizer_(&tokenizer) {}

    // Embeds every label not yet present; parallel over labels.
    void add(const std::vector<std::string>& labels, unsigned threads);
    void add_star(const graph::StarGraph& star, unsigned threads);
    // Throws ValidationError if the label was never added.
    const Matrix<float>& at(const std::string& label) const;
    std::size_t size() const noexcept { return table_.size(); }

private:
    const lm::LMParams<float>* lm_;
    const lm::Tokenizer* tokenizer_;
    std::map<std::string, Matrix<float>> table_;
};

// C from the center label, N from neighbor labels, E from predicate labels,
// over the top_m highest-ranked neighbors. Labels must already be in the bank.
cf::EmbeddedSubgraph<float> embed_subgraph(const graph::StarGraph& star, std::size_t top_m, const LabelBank& bank);

// Everything needed to inject concept vectors into one bite, independent of
// the ConceptFormer weights.
struct InjectionPlan {
    std::string center_qid;
    std::vector<TokenId> prefix_ids;
    std::size_t insertion_index = 0;
    std::vector<TokenId> targets;
    cf::EmbeddedSubgraph<float> graph;
    std::size_t degree = 0;
};

// Skips for empty prefixes, isolated subjects, a star whose center differs
// from the bite subject, and context overflow with n soft vectors.
OrSkip<InjectionPlan> plan_injection(const corpus::Bite& bite, const graph::StarGraph& star,
                                     const lm::Tokenizer& tokenizer, const LabelBank& bank, std::size_t top_m,
                                     std::size_t n_vectors, std::size_t context);

// Splices `vectors` (n x dim) after the subject's tokens.
AssembledPrompt assemble_injected(const InjectionPlan& plan, const Matrix<float>& vectors,
                                  const lm::LMParams<float>& lm);

// plan_injection + ConceptFormer forward + assemble_injected. Isolated subjects
// fall back to the baseline prompt with `downgrade` set.
OrSkip<AssembledPrompt> build_injected(const corpus::Bite& bite, const graph::StarGraph& star,
                                       const cf::CFParams<float>& cf_params, const lm::Tokenizer& tokenizer,
                                       const lm::LMParams<float>& lm, const LabelBank& bank, std::size_t top_m);

// Supplies concept vectors for a plan: live generation or a lookup table.
// An empty result means no vectors are available for the center.
using VectorProvider = std::function<std::optional<Matrix<float>>(const InjectionPlan&)>;
VectorProvider live_provider(const cf::CFParams<float>& params);

// Embedding rows for any prompt: token rows for hard modes, the spliced matrix
// for cf.
Matrix<float> prompt_embeddings(const AssembledPrompt& p, const lm::LMParams<float>& lm);

// One line of the prompt dump.
nlohmann::ordered_json dump_record(const AssembledPrompt& p);

}  // namespace kginject::prompt
