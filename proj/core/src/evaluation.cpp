#include "kginject/evaluation.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "kginject/error.hpp"
#include "kginject/hashing.hpp"
#include "kginject/parallel.hpp"

namespace kginject::eval {

template <class T>
std::size_t token_rank(std::span<const T> logits, lm::TokenId target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
        throw ValidationError("target id " + std::to_string(target) + " outside the logit vector");
    const T t = logits[static_cast<std::size_t>(target)];
    std::size_t greater = 0;
    for (T v : logits) greater += v > t ? 1 : 0;
    return greater + 1;
}

template std::size_t token_rank<float>(std::span<const float>, lm::TokenId);
template std::size_t token_rank<double>(std::span<const double>, lm::TokenId);

std::size_t RankResult::rank() const {
    if (token_ranks.empty()) throw ValidationError("rank of an empty target");
    return *std::max_element(token_ranks.begin(), token_ranks.end());
}

OrSkip<RankResult> sequence_rank(const lm::LMParams<float>& lm, const Matrix<float>& prompt_rows,
                                 std::span<const lm::TokenId> targets) {
    const std::size_t P = prompt_rows.rows(), Tn = targets.size(), d = lm.config.dim;
    if (Tn == 0) return Skip{"object tokenizes to zero ids"};
    if (P == 0) return Skip{"empty prompt"};
    if (P + Tn - 1 > lm.config.context)
        return Skip{"context overflow: " + std::to_string(P + Tn - 1) + " > " + std::to_string(lm.config.context)};
    Matrix<float> x(P + Tn - 1, d);
    std::copy_n(prompt_rows.data(), P * d, x.data());
    if (Tn > 1) {
        const auto rows = lm::embedding_rows(lm, targets.first(Tn - 1));
        std::copy_n(rows.data(), rows.size(), x.data() + P * d);
    }
    const auto tr = lm::forward_trace(lm, x, P - 1);
    RankResult r;
    for (std::size_t t = 0; t < Tn; ++t) r.token_ranks.push_back(token_rank<float>(tr.logits.row(t), targets[t]));
    return r;
}

OrSkip<RankResult> sequence_rank(const lm::LMParams<float>& lm, const prompt::AssembledPrompt& prompt) {
    return sequence_rank(lm, prompt::prompt_embeddings(prompt, lm), prompt.targets);
}

double EvalReport::hit(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
        if (ks[i] == k) return hit_pct[i];
    throw ValidationError("Hit@" + std::to_string(k) + " was not evaluated");
}

namespace {

nlohmann::ordered_json hits_json(const std::vector<std::size_t>& ks, const std::vector<double>& pct) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < ks.size(); ++i) j[std::to_string(ks[i])] = pct[i];
    return j;
}

std::vector<double> hits_from_json(const nlohmann::json& j, const std::vector<std::size_t>& ks) {
    std::vector<double> out;
    for (auto k : ks) out.push_back(j.at(std::to_string(k)).get<double>());
    return out;
}

}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    j["label"] = label;
    j["n_vectors"] = n_vectors;
    j["vector_source"] = vector_source;
    j["dataset"] = {{"name", dataset_name}, {"fingerprint", dataset_fingerprint}, {"size", dataset_size}};
    j["examples"] = examples;
    j["skipped"] = skipped;
    j["downgraded"] = downgraded;
    j["skip_reasons"] = nlohmann::ordered_json::object();
    for (const auto& [reason, count] : skip_reasons) j["skip_reasons"][reason] = count;
    j["ks"] = ks;
    j["hit_pct"] = hits_json(ks, hit_pct);
    auto& b = j["buckets"] = nlohmann::ordered_json::object();
    for (const auto& [name, stats] : buckets)
        b[name] = {{"examples", stats.examples}, {"hit_pct", hits_json(ks, stats.hit_pct)}};
    j["ledger"] = {{"mean_hard_tokens", mean_hard_tokens},
                   {"mean_soft_vectors", mean_soft_vectors},
                   {"mean_baseline_tokens", mean_baseline_tokens},
                   {"mean_expansion", mean_expansion}};
    j["provenance"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : provenance) j["provenance"][k] = v;
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    try {
        EvalReport r;
        r.mode = j.at("mode");
        r.label = j.at("label");
        r.n_vectors = j.at("n_vectors");
        r.vector_source = j.at("vector_source");
        r.dataset_name = j.at("dataset").at("name");
        r.dataset_fingerprint = j.at("dataset").at("fingerprint");
        r.dataset_size = j.at("dataset").at("size");
        r.examples = j.at("examples");
        r.skipped = j.at("skipped");
        r.downgraded = j.at("downgraded");
        for (const auto& [k, v] : j.at("skip_reasons").items()) r.skip_reasons[k] = v.get<std::size_t>();
        r.ks = j.at("ks").get<std::vector<std::size_t>>();
        r.hit_pct = hits_from_json(j.at("hit_pct"), r.ks);
        for (const auto& [name, b] : j.at("buckets").items())
            r.buckets[name] = {b.at("examples").get<std::size_t>(), hits_from_json(b.at("hit_pct"), r.ks)};
        const auto& l = j.at("ledger");
        r.mean_hard_tokens = l.at("mean_hard_tokens");
        r.mean_soft_vectors = l.at("mean_soft_vectors");
        r.mean_baseline_tokens = l.at("mean_baseline_tokens");
        r.mean_expansion = l.at("mean_expansion");
        for (const auto& [k, v] : j.at("provenance").items()) r.provenance[k] = v.get<std::string>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed evaluation report: ") + e.what());
    }
}

std::string EvalReport::text_table() const {
    std::string out = fmt::format("{:<12} {:>8} {:>8}", label, "examples", "skipped");
    for (auto k : ks) out += fmt::format(" {:>8}", fmt::format("Hit@{}", k));
    out += fmt::format("\n{:<12} {:>8} {:>8}", "all", examples, skipped);
    for (double h : hit_pct) out += fmt::format(" {:>8.2f}", h);
    out += '\n';
    for (const auto& [name, b] : buckets) {
        out += fmt::format("{:<12} {:>8} {:>8}", "  " + name, b.examples, "");
        for (double h : b.hit_pct) out += fmt::format(" {:>8.2f}", h);
        out += '\n';
    }
    out += fmt::format("ledger: hard tokens {:.2f}, soft vectors {:.2f}, expansion {:.2f}\n", mean_hard_tokens,
                       mean_soft_vectors, mean_expansion);
    return out;
}

std::string EvalResult::audit_jsonl() const {
    std::string out;
    for (const auto& e : audit) {
        nlohmann::ordered_json j;
        j["index"] = e.index;
        j["subject_qid"] = e.subject_qid;
        j["object_qid"] = e.object_qid;
        j["bucket"] = e.bucket;
        if (e.skip_reason) {
            j["status"] = "skipped";
            j["reason"] = *e.skip_reason;
        } else {
            j["status"] = "ok";
            j["token_ranks"] = e.ranks.token_ranks;
            j["rank"] = e.ranks.rank();
        }
        if (e.prompt) j["prompt"] = prompt::dump_record(*e.prompt);
        out += j.dump() + '\n';
    }
    return out;
}

std::string dataset_fingerprint(const std::vector<corpus::Bite>& dataset) {
    return to_hex(sha256(corpus::bites_to_jsonl(dataset)));
}

namespace {

OrSkip<prompt::AssembledPrompt> assemble(const corpus::Bite& bite, const graph::StarGraph& star,
                                         const lm::LMParams<float>& lm, const lm::Tokenizer& tok,
                                         const EvalOptions& opt, const CfContext* cf) {
    switch (opt.mode) {
        case prompt::Mode::baseline: return prompt::build_baseline(bite, tok, lm.config.context);
        case prompt::Mode::rag: return prompt::build_rag(bite, star, tok, opt.top_m, lm.config.context);
        case prompt::Mode::cf: break;
    }
    if (star.degree() == 0) {
        auto base = prompt::build_baseline(bite, tok, lm.config.context);
        if (!is_skip(base)) std::get<prompt::AssembledPrompt>(base).downgrade = "isolated subject";
        return base;
    }
    auto plan = prompt::plan_injection(bite, star, tok, *cf->bank, opt.top_m, cf->n_vectors, lm.config.context);
    if (is_skip(plan)) return std::get<Skip>(plan);
    const auto& pl = std::get<prompt::InjectionPlan>(plan);
    auto vectors = cf->vectors(pl);
    if (!vectors) return Skip{"no concept vectors for " + pl.center_qid};
    if (vectors->rows() != cf->n_vectors) return Skip{"concept vector count mismatch for " + pl.center_qid};
    return prompt::assemble_injected(pl, *vectors, lm);
}

}  // namespace

EvalResult evaluate(const std::vector<corpus::Bite>& dataset, const graph::StarCollection& stars,
                    const lm::LMParams<float>& lm, const lm::Tokenizer& tokenizer, const EvalOptions& options,
                    const CfContext* cf) {
    if (options.ks.empty()) throw ValidationError("k-list must not be empty");
    if (options.mode == prompt::Mode::cf && (!cf || !cf->bank || !cf->vectors || cf->n_vectors == 0))
        throw ValidationError("cf mode requires ConceptFormer vectors");

    EvalResult result;
    result.audit.resize(dataset.size());
    parallel_for(dataset.size(), options.threads, [&](std::size_t i) {
        const auto& bite = dataset[i];
        auto& rec = result.audit[i];
        rec.index = i;
        rec.subject_qid = bite.subject.entity.qid;
        rec.object_qid = bite.object.entity.qid;
        const auto it = stars.find(bite.subject.entity.qid);
        if (it == stars.end()) {
            rec.bucket = "unknown";
            rec.skip_reason = "missing star graph";
            return;
        }
        rec.bucket = std::string(graph::to_string(graph::degree_bucket(it->second)));
        auto p = assemble(bite, it->second, lm, tokenizer, options, cf);
        if (is_skip(p)) {
            rec.skip_reason = std::get<Skip>(p).reason;
            return;
        }
        auto r = sequence_rank(lm, std::get<prompt::AssembledPrompt>(p));
        if (is_skip(r)) {
            rec.skip_reason = std::get<Skip>(r).reason;
            return;
        }
        rec.ranks = std::move(std::get<RankResult>(r));
        rec.prompt = std::move(std::get<prompt::AssembledPrompt>(p));
        rec.prompt->embeddings = Matrix<float>();  // not kept in the audit
    });

    auto& rep = result.report;
    rep.mode = std::string(prompt::to_string(options.mode));
    rep.n_vectors = options.mode == prompt::Mode::cf ? cf->n_vectors : 0;
    rep.vector_source = options.mode == prompt::Mode::cf ? cf->source : "";
    rep.label = options.mode == prompt::Mode::cf ? fmt::format("cf-{}", rep.n_vectors) : rep.mode;
    if (options.mode == prompt::Mode::cf && cf->source != "live") rep.label += "-" + cf->source;
    rep.dataset_name = options.dataset_name;
    rep.dataset_fingerprint = dataset_fingerprint(dataset);
    rep.dataset_size = dataset.size();
    rep.ks = options.ks;

    std::vector<std::size_t> hits(options.ks.size(), 0);
    std::map<std::string, std::vector<std::size_t>> bucket_hits;
    std::map<std::string, std::size_t> bucket_count;
    double hard = 0, soft = 0, base = 0, expansion = 0;
    for (const auto& rec : result.audit) {
        if (rec.skip_reason) {
            ++rep.skipped;
            ++rep.skip_reasons[*rec.skip_reason];
            continue;
        }
        ++rep.examples;
        if (!rec.prompt->downgrade.empty()) ++rep.downgraded;
        auto& bh = bucket_hits[rec.bucket];
        bh.resize(options.ks.size(), 0);
        ++bucket_count[rec.bucket];
        const std::size_t r = rec.ranks.rank();
        for (std::size_t k = 0; k < options.ks.size(); ++k) {
            if (r <= options.ks[k]) {
                ++hits[k];
                ++bh[k];
            }
        }
        const auto& l = rec.prompt->ledger;
        hard += static_cast<double>(l.hard_tokens);
        soft += static_cast<double>(l.soft_vectors);
        base += static_cast<double>(l.baseline_tokens);
        expansion += static_cast<double>(l.expansion());
    }
    auto pct = [](std::size_t h, std::size_t n) { return n ? 100.0 * static_cast<double>(h) / static_cast<double>(n) : 0.0; };
    for (auto h : hits) rep.hit_pct.push_back(pct(h, rep.examples));
    for (const auto& [name, bh] : bucket_hits) {
        BucketStats s{bucket_count[name], {}};
        for (auto h : bh) s.hit_pct.push_back(pct(h, s.examples));
        rep.buckets[name] = s;
    }
    if (rep.examples) {
        const double n = static_cast<double>(rep.examples);
        rep.mean_hard_tokens = hard / n;
        rep.mean_soft_vectors = soft / n;
        rep.mean_baseline_tokens = base / n;
        rep.mean_expansion = expansion / n;
    }
    rep.provenance["lm_fingerprint"] = to_hex(lm::fingerprint(lm));
    rep.provenance["tokenizer_fingerprint"] = to_hex(tokenizer.fingerprint());
    if (options.mode == prompt::Mode::cf) rep.provenance["cf_fingerprint"] = cf->fingerprint;
    if (options.mode != prompt::Mode::baseline) rep.provenance["top_m"] = std::to_string(options.top_m);
    return result;
}

std::optional<double> relative_change(double old_value, double new_value) {
    if (old_value == 0.0) return std::nullopt;
    return (new_value - old_value) / old_value * 100.0;
}

Comparison compare_report(const std::vector<EvalReport>& reports) {
    if (reports.size() < 2) throw ValidationError("comparison needs at least two reports");
    const auto& ref = reports.front();
    for (const auto& r : reports) {
        if (r.dataset_fingerprint != ref.dataset_fingerprint)
            throw ValidationError("report '" + r.label + "' was computed on a different dataset (" +
                                  r.dataset_fingerprint + " vs " + ref.dataset_fingerprint + ")");
        if (r.ks != ref.ks) throw ValidationError("report '" + r.label + "' uses a different k-list");
    }

    Comparison c;
    c.json["dataset"] = {{"name", ref.dataset_name}, {"fingerprint", ref.dataset_fingerprint}};
    c.json["reference"] = ref.label;
    auto& rows = c.json["rows"] = nlohmann::ordered_json::array();
    c.text = fmt::format("dataset {} ({})\n", ref.dataset_name, ref.dataset_fingerprint.substr(0, 12));
    c.text += fmt::format("{:<14} {:>8}", "model", "examples");
    for (auto k : ref.ks) c.text += fmt::format(" {:>8} {:>9}", fmt::format("Hit@{}", k), "change");
    c.text += fmt::format(" {:>8} {:>8}\n", "hard", "soft");
    for (const auto& r : reports) {
        nlohmann::ordered_json row;
        row["label"] = r.label;
        row["examples"] = r.examples;
        row["skipped"] = r.skipped;
        row["hit_pct"] = hits_json(r.ks, r.hit_pct);
        auto& ch = row["change_pct"] = nlohmann::ordered_json::object();
        c.text += fmt::format("{:<14} {:>8}", r.label, r.examples);
        for (std::size_t i = 0; i < r.ks.size(); ++i) {
            const auto delta = relative_change(ref.hit_pct[i], r.hit_pct[i]);
            ch[std::to_string(r.ks[i])] = delta ? nlohmann::ordered_json(*delta) : nlohmann::ordered_json();
            const std::string arrow = !delta ? "n/a" : (*delta > 0 ? fmt::format("{:.1f}% up", *delta)
                                                                   : *delta < 0 ? fmt::format("{:.1f}% dn", -*delta)
                                                                                : std::string("0.0%"));
            c.text += fmt::format(" {:>8.2f} {:>9}", r.hit_pct[i], arrow);
        }
        c.text += fmt::format(" {:>8.2f} {:>8.2f}\n", r.mean_hard_tokens, r.mean_soft_vectors);
        row["mean_hard_tokens"] = r.mean_hard_tokens;
        row["mean_soft_vectors"] = r.mean_soft_vectors;
        row["mean_expansion"] = r.mean_expansion;
        rows.push_back(row);
    }

    auto& eff = c.json["token_efficiency"] = nlohmann::ordered_json::array();
    for (const auto& rag : reports) {
        if (rag.mode != "rag") continue;
        for (const auto& cfr : reports) {
            if (cfr.mode != "cf" || cfr.mean_soft_vectors <= 0.0) continue;
            nlohmann::ordered_json e;
            e["rag"] = rag.label;
            e["cf"] = cfr.label;
            e["rag_mean_hard_tokens"] = rag.mean_hard_tokens;
            e["rag_mean_expansion"] = rag.mean_expansion;
            e["cf_mean_soft_vectors"] = cfr.mean_soft_vectors;
            e["hard_tokens_per_soft_vector"] = rag.mean_hard_tokens / cfr.mean_soft_vectors;
            e["expansion_per_soft_vector"] = rag.mean_expansion / cfr.mean_soft_vectors;
            c.text += fmt::format("{} vs {}: {:.2f} RAG tokens ({:.2f} added) vs {:.2f} soft vectors, ratio {:.1f}x\n",
                                  rag.label, cfr.label, rag.mean_hard_tokens, rag.mean_expansion,
                                  cfr.mean_soft_vectors, rag.mean_expansion / cfr.mean_soft_vectors);
            eff.push_back(e);
        }
    }
    return c;
}

}  // namespace kginject::eval
