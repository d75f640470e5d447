#include "kginject/prompting.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>

#include "kginject/parallel.hpp"

namespace kginject::prompt {

std::string_view to_string(Mode m) noexcept {
    switch (m) {
        case Mode::baseline: return "baseline";
        case Mode::rag: return "rag";
        case Mode::cf: return "cf";
    }
    return "?";
}

Mode mode_from_string(std::string_view s) {
    if (s == "baseline") return Mode::baseline;
    if (s == "rag") return Mode::rag;
    if (s == "cf") return Mode::cf;
    throw ValidationError("unknown prompt mode '" + std::string(s) + "' (expected baseline, rag or cf)");
}

OrSkip<Truncation> truncate_before_object(const corpus::Bite& bite) {
    corpus::validate(bite);
    const auto [sb, se] = corpus::byte_range(bite.text, bite.subject.span);
    const auto [ob, oe] = corpus::byte_range(bite.text, bite.object.span);
    std::size_t cut = ob;
    while (cut > 0 && std::isspace(static_cast<unsigned char>(bite.text[cut - 1]))) --cut;
    if (cut == 0) return Skip{"empty prefix after truncation"};
    if (se > cut) return Skip{"subject mention overlaps the truncation point"};
    return Truncation{bite.text.substr(0, cut), bite.text.substr(cut, oe - cut), sb, se};
}

std::size_t insertion_index(const lm::Tokenizer& tokenizer, std::string_view prefix, std::size_t subject_end) {
    const auto spans = tokenizer.encode_with_offsets(prefix);
    std::size_t k = 0;
    while (k < spans.size() && spans[k].begin < subject_end) ++k;
    return k;
}

std::string textify(std::string_view subject_label, const std::vector<graph::Neighbor>& neighbors) {
    std::string out(subject_label);
    for (const auto& n : neighbors) out += ", " + n.predicate.label + " " + n.entity.label;
    return out;
}

std::string textify_parenthetical(std::string_view subject_label, const std::vector<graph::Neighbor>& neighbors) {
    std::string out(subject_label);
    for (const auto& n : neighbors) out += " (" + n.predicate.label + ": " + n.entity.label + ")";
    return out;
}

namespace {

std::optional<Skip> check_fits(std::size_t prompt_len, std::size_t targets, std::size_t context) {
    if (targets == 0) return Skip{"object tokenizes to zero ids"};
    if (prompt_len + targets - 1 > context)
        return Skip{"context overflow: prompt " + std::to_string(prompt_len) + " + targets " + std::to_string(targets) +
                    " exceeds " + std::to_string(context)};
    return std::nullopt;
}

}  // namespace

OrSkip<AssembledPrompt> build_baseline(const corpus::Bite& bite, const lm::Tokenizer& tokenizer,
                                       std::size_t context) {
    auto tr = truncate_before_object(bite);
    if (is_skip(tr)) return std::get<Skip>(tr);
    const auto& t = std::get<Truncation>(tr);
    AssembledPrompt p;
    p.mode = Mode::baseline;
    p.center_qid = bite.subject.entity.qid;
    p.ids = tokenizer.encode(t.prefix);
    p.targets = tokenizer.encode(t.target_text);
    p.insertion_index = p.ids.size();
    p.ledger = {p.ids.size(), 0, p.ids.size()};
    if (auto s = check_fits(p.ids.size(), p.targets.size(), context)) return *s;
    return p;
}

OrSkip<AssembledPrompt> build_rag(const corpus::Bite& bite, const graph::StarGraph& star,
                                  const lm::Tokenizer& tokenizer, std::size_t top_m, std::size_t context) {
    if (star.center.qid != bite.subject.entity.qid)
        return Skip{"star center " + star.center.qid + " does not match subject " + bite.subject.entity.qid};
    auto tr = truncate_before_object(bite);
    if (is_skip(tr)) return std::get<Skip>(tr);
    const auto& t = std::get<Truncation>(tr);
    const auto targets = tokenizer.encode(t.target_text);
    const std::size_t baseline_tokens = tokenizer.encode(t.prefix).size();
    auto neighbors = graph::top_neighbors(star, std::max<std::size_t>(top_m, 1));
    if (neighbors.empty()) return Skip{"isolated subject has nothing to textify"};
    const std::string head = t.prefix.substr(0, t.subject_begin);
    const std::string tail = t.prefix.substr(t.subject_end);
    while (!neighbors.empty()) {
        const std::string text = head + textify(star.center.label, neighbors) + tail;
        auto ids = tokenizer.encode(text);
        if (!check_fits(ids.size(), targets.size(), context)) {
            AssembledPrompt p;
            p.mode = Mode::rag;
            p.center_qid = star.center.qid;
            p.insertion_index = ids.size();
            p.ledger = {ids.size(), 0, baseline_tokens};
            p.ids = std::move(ids);
            p.targets = targets;
            p.neighbors_used = neighbors.size();
            return p;
        }
        neighbors.pop_back();
    }
    return Skip{"RAG prompt overflows the context even with one neighbor"};
}

void LabelBank::add(const std::vector<std::string>& labels, unsigned threads) {
    std::vector<std::string> missing;
    for (const auto& l : labels)
        if (!table_.count(l)) missing.push_back(l);
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    std::vector<Matrix<float>> out(missing.size());
    parallel_for(missing.size(), threads, [&](std::size_t i) { out[i] = lm::embed_label(*lm_, *tokenizer_, missing[i]); });
    for (std::size_t i = 0; i < missing.size(); ++i) table_.emplace(missing[i], std::move(out[i]));
}

void LabelBank::add_star(const graph::StarGraph& star, unsigned threads) {
    std::vector<std::string> labels{star.center.label};
    for (const auto& n : star.neighbors) {
        labels.push_back(n.entity.label);
        labels.push_back(n.predicate.label);
    }
    add(labels, threads);
}

const Matrix<float>& LabelBank::at(const std::string& label) const {
    const auto it = table_.find(label);
    if (it == table_.end()) throw ValidationError("label '" + label + "' has not been embedded");
    return it->second;
}

cf::EmbeddedSubgraph<float> embed_subgraph(const graph::StarGraph& star, std::size_t top_m, const LabelBank& bank) {
    const auto neighbors = graph::top_neighbors(star, std::max<std::size_t>(top_m, 1));
    const auto& c = bank.at(star.center.label);
    const std::size_t d = c.cols();
    cf::EmbeddedSubgraph<float> g{c, Matrix<float>(neighbors.size(), d), Matrix<float>(neighbors.size(), d), {}};
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        std::copy_n(bank.at(neighbors[i].entity.label).data(), d, g.N.row(i).data());
        std::copy_n(bank.at(neighbors[i].predicate.label).data(), d, g.E.row(i).data());
        g.neighbor_qids.push_back(neighbors[i].entity.qid);
    }
    return g;
}

OrSkip<InjectionPlan> plan_injection(const corpus::Bite& bite, const graph::StarGraph& star,
                                     const lm::Tokenizer& tokenizer, const LabelBank& bank, std::size_t top_m,
                                     std::size_t n_vectors, std::size_t context) {
    if (star.center.qid != bite.subject.entity.qid)
        return Skip{"star center " + star.center.qid + " does not match subject " + bite.subject.entity.qid};
    if (star.degree() == 0) return Skip{"isolated subject"};
    auto tr = truncate_before_object(bite);
    if (is_skip(tr)) return std::get<Skip>(tr);
    const auto& t = std::get<Truncation>(tr);
    InjectionPlan plan;
    plan.center_qid = star.center.qid;
    plan.prefix_ids = tokenizer.encode(t.prefix);
    plan.insertion_index = insertion_index(tokenizer, t.prefix, t.subject_end);
    plan.targets = tokenizer.encode(t.target_text);
    plan.degree = star.degree();
    if (auto s = check_fits(plan.prefix_ids.size() + n_vectors, plan.targets.size(), context)) return *s;
    plan.graph = embed_subgraph(star, top_m, bank);
    return plan;
}

AssembledPrompt assemble_injected(const InjectionPlan& plan, const Matrix<float>& vectors,
                                  const lm::LMParams<float>& lm) {
    const std::size_t d = lm.config.dim;
    if (vectors.cols() != d)
        throw ValidationError("concept vector width " + std::to_string(vectors.cols()) + " does not match LM dim " +
                              std::to_string(d));
    const auto rows = lm::embedding_rows(lm, std::span<const TokenId>(plan.prefix_ids));
    const std::size_t n = vectors.rows(), ins = plan.insertion_index, L = rows.rows() + n;
    AssembledPrompt p;
    p.mode = Mode::cf;
    p.center_qid = plan.center_qid;
    p.ids = plan.prefix_ids;
    p.targets = plan.targets;
    p.insertion_index = ins;
    p.ledger = {plan.prefix_ids.size(), n, plan.prefix_ids.size()};
    p.neighbors_used = plan.graph.m();
    p.embeddings = Matrix<float>(L, d);
    std::copy_n(rows.data(), ins * d, p.embeddings.data());
    std::copy_n(vectors.data(), n * d, p.embeddings.data() + ins * d);
    std::copy_n(rows.data() + ins * d, (rows.rows() - ins) * d, p.embeddings.data() + (ins + n) * d);
    return p;
}

OrSkip<AssembledPrompt> build_injected(const corpus::Bite& bite, const graph::StarGraph& star,
                                       const cf::CFParams<float>& cf_params, const lm::Tokenizer& tokenizer,
                                       const lm::LMParams<float>& lm, const LabelBank& bank, std::size_t top_m) {
    if (star.degree() == 0 && star.center.qid == bite.subject.entity.qid) {
        spdlog::debug("{} is isolated; using the baseline prompt", star.center.qid);
        auto base = build_baseline(bite, tokenizer, lm.config.context);
        if (!is_skip(base)) std::get<AssembledPrompt>(base).downgrade = "isolated subject";
        return base;
    }
    auto plan = plan_injection(bite, star, tokenizer, bank, top_m, cf_params.n(), lm.config.context);
    if (is_skip(plan)) return std::get<Skip>(plan);
    const auto& pl = std::get<InjectionPlan>(plan);
    return assemble_injected(pl, cf::forward(cf_params, pl.graph).vectors, lm);
}

VectorProvider live_provider(const cf::CFParams<float>& params) {
    return [&params](const InjectionPlan& plan) -> std::optional<Matrix<float>> {
        return cf::forward(params, plan.graph).vectors;
    };
}

Matrix<float> prompt_embeddings(const AssembledPrompt& p, const lm::LMParams<float>& lm) {
    if (p.mode == Mode::cf && !p.embeddings.empty()) return p.embeddings;
    return lm::embedding_rows(lm, std::span<const TokenId>(p.ids));
}

nlohmann::ordered_json dump_record(const AssembledPrompt& p) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(p.mode);
    j["center_qid"] = p.center_qid;
    j["insertion_index"] = p.insertion_index;
    j["ledger"] = {{"hard_tokens", p.ledger.hard_tokens},
                   {"soft_vectors", p.ledger.soft_vectors},
                   {"baseline_tokens", p.ledger.baseline_tokens}};
    j["target_ids"] = p.targets;
    if (!p.downgrade.empty()) j["downgrade"] = p.downgrade;
    return j;
}

}  // namespace kginject::prompt
