#include "kginject_tools/commands.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <iostream>
#include <map>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/evaluation.hpp"
#include "kginject/graph_store.hpp"
#include "kginject/lookup_store.hpp"
#include "kginject/prompting.hpp"
#include "kginject/rng.hpp"
#include "kginject/seeds.hpp"
#include "kginject/training.hpp"

namespace kginject::tools {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// Salts for the per-purpose streams derived from the configured seed.
enum Salt : std::uint64_t {
    kWorldSalt = 1,
    kStage2Salt = 2,
    kSplitSalt = 3,
    kRagSalt = 4,
    kLmSalt = 5,
    kCfInitSalt = 6,
    kStage1TrainSalt = 7,
    kStage2TrainSalt = 8,
};

const std::vector<std::string> kSplits = {"train", "val", "test"};
const std::vector<std::string> kStyles = {"stage1", "stage2"};

std::string file_hash(const fs::path& p) { return to_hex(sha256_file(p)); }

void write_json(const fs::path& p, const ojson& j) { write_text_file(p, j.dump(2) + "\n"); }

ojson read_json(const fs::path& p) {
    try {
        return ojson::parse(read_text_file(p));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(p.string() + ": " + e.what());
    }
}

void write_provenance(const fs::path& path, const std::string& command, const Invocation& inv, std::uint64_t seed,
                      const ojson& inputs, const ojson& outputs) {
    ojson j;
    j["command"] = command;
    j["argv"] = mask_out_argument(inv.argv);
    j["config_sha256"] = inv.config.hash();
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    write_json(path, j);
    write_json(path.parent_path() / "config.json", inv.config.to_json());
}

struct WorldData {
    corpus::ToyWorld world;
    graph::StarCollection stars;
    std::map<std::string, std::vector<corpus::Bite>> bites;  // "stage1_train" -> bites
};

std::vector<corpus::Bite> load_bite_file(const fs::path& p) {
    if (!fs::exists(p)) throw ValidationError("missing bite file " + p.string() + " (run gen-world first)");
    auto r = corpus::load_bites(p);
    for (const auto& w : r.warnings) spdlog::warn("{}: {}", p.filename().string(), w);
    return std::move(r.bites);
}

WorldData load_world(const Workspace& ws) {
    const auto world_file = ws.world() / "world.json";
    if (!fs::exists(world_file)) throw ValidationError("missing " + world_file.string() + " (run gen-world first)");
    WorldData d;
    d.world = corpus::world_from_json(read_text_file(world_file));
    auto stars = graph::load_star_graphs(ws.world() / "stars.json");
    for (const auto& w : stars.warnings) spdlog::warn("stars.json: {}", w);
    d.stars = std::move(stars.graphs);
    for (const auto& style : kStyles)
        for (const auto& split : kSplits) d.bites[style + "_" + split] = load_bite_file(ws.bites(style, split));
    return d;
}

struct LmData {
    lm::LMParams<float> params;
    lm::Tokenizer tokenizer;
    std::string fingerprint;
    std::string tokenizer_fingerprint;
};

LmData load_lm_artifacts(const Workspace& ws) {
    if (!fs::exists(ws.lm_params())) throw ValidationError("missing " + ws.lm_params().string() + " (run pretrain-lm)");
    LmData d{lm::load_lm(ws.lm_params()), lm::Tokenizer::load(ws.tokenizer()), "", ""};
    d.fingerprint = to_hex(lm::fingerprint(d.params));
    d.tokenizer_fingerprint = to_hex(d.tokenizer.fingerprint());
    const auto prov = read_json(ws.lm() / "provenance.json");
    const std::string expected = prov.at("outputs").at("lm_fingerprint");
    if (expected != d.fingerprint)
        throw IntegrityError("LM parameters " + d.fingerprint + " do not match the recorded fingerprint " + expected);
    const std::string expected_tok = prov.at("outputs").at("tokenizer_fingerprint");
    if (expected_tok != d.tokenizer_fingerprint)
        throw IntegrityError("tokenizer " + d.tokenizer_fingerprint + " does not match the recorded fingerprint " +
                             expected_tok);
    if (d.tokenizer.size() > d.params.config.vocab_size)
        throw IntegrityError("tokenizer has more entries than the LM vocabulary");
    return d;
}

// Bite text with the subject mention replaced by the textified neighbors and
// every neighbor object, including the sentence's own, swapped for a random
// value. The LM can only get such sentences right by reading the context.
// Neighbors are dropped from the tail to fit; the bite's own fact is kept.
// `text` with its object span replaced by `object`.
std::string with_object(const corpus::Bite& bite, const std::string& object) {
    const auto [ob, oe] = corpus::byte_range(bite.text, bite.object.span);
    return bite.text.substr(0, ob) + object + bite.text.substr(oe);
}

// Textified prompt for `bite` whose neighbor values are replaced by random
// values, so the object can only be read from the list. A random subset of
// the neighbors is kept, and further sentences about the same subject are
// appended while they fit, each taking its object from the list.
std::optional<std::string> counterfactual_rag_text(const corpus::Bite& bite,
                                                   const std::vector<const corpus::Bite*>& companions,
                                                   const graph::StarGraph& star, const lm::Tokenizer& tok,
                                                   std::size_t max_tokens, const std::vector<graph::EntityRef>& values,
                                                   Rng& rng) {
    const double keep = rng.uniform01();
    std::vector<graph::Neighbor> neighbors;
    for (auto n : graph::top_neighbors(star, graph::kMaxNeighbors)) {
        n.entity = values[rng.uniform_index(values.size())];
        if (n.predicate.pid == bite.predicate.pid || rng.uniform01() < keep) neighbors.push_back(std::move(n));
    }
    const auto value_of = [&](const std::string& pid) -> const graph::Neighbor* {
        for (const auto& n : neighbors)
            if (n.predicate.pid == pid) return &n;
        return nullptr;
    };
    const auto* fact = value_of(bite.predicate.pid);
    if (!fact) return std::nullopt;
    const auto fact_index = static_cast<std::size_t>(fact - neighbors.data());

    const auto [sb, se] = corpus::byte_range(bite.text, bite.subject.span);
    const auto [ob, oe] = corpus::byte_range(bite.text, bite.object.span);
    if (ob < se) return std::nullopt;
    const std::string middle = bite.text.substr(se, ob - se);
    const std::string tail = fact->entity.label + bite.text.substr(oe);
    std::string text;
    std::size_t used = 0;
    // Half of the lists drop predicate labels, leaving only the values.
    const bool values_only = rng.uniform01() < 0.5;
    auto listing = [&] {
        if (!values_only) return prompt::textify(star.center.label, neighbors);
        std::string out = star.center.label;
        for (const auto& n : neighbors) out += ", " + n.entity.label;
        return out;
    };
    while (neighbors.size() > fact_index) {
        text = bite.text.substr(0, sb) + listing() + middle + tail;
        used = tok.encode(text).size();
        if (used <= max_tokens) break;
        neighbors.pop_back();
    }
    if (neighbors.size() <= fact_index) return std::nullopt;

    std::vector<const corpus::Bite*> order = companions;
    rng.shuffle(order);
    for (const auto* c : order) {
        if (c == &bite) continue;
        const auto* n = value_of(c->predicate.pid);
        if (!n) continue;
        const std::string next = " " + with_object(*c, n->entity.label);
        const std::size_t extra = tok.encode(next).size();
        if (used + extra > max_tokens) continue;
        text += next;
        used += extra;
    }
    return text;
}

std::vector<prompt::InjectionPlan> make_plans(const std::vector<corpus::Bite>& bites, const graph::StarCollection& stars,
                                              const lm::Tokenizer& tok, const prompt::LabelBank& bank,
                                              std::size_t top_m, std::size_t n, std::size_t context,
                                              const std::string& name) {
    std::vector<prompt::InjectionPlan> plans;
    std::map<std::string, std::size_t> skipped;
    for (const auto& b : bites) {
        const auto it = stars.find(b.subject.entity.qid);
        if (it == stars.end()) {
            ++skipped["missing star graph"];
            continue;
        }
        auto p = prompt::plan_injection(b, it->second, tok, bank, top_m, n, context);
        if (is_skip(p))
            ++skipped[std::get<Skip>(p).reason];
        else
            plans.push_back(std::move(std::get<prompt::InjectionPlan>(p)));
    }
    for (const auto& [reason, count] : skipped) spdlog::warn("{}: skipped {} bites ({})", name, count, reason);
    return plans;
}

prompt::LabelBank make_bank(const LmData& lm, const graph::StarCollection& stars, unsigned threads) {
    prompt::LabelBank bank(lm.params, lm.tokenizer);
    std::vector<std::string> labels;
    for (const auto& [qid, star] : stars) {
        labels.push_back(star.center.label);
        for (const auto& n : star.neighbors) {
            labels.push_back(n.entity.label);
            labels.push_back(n.predicate.label);
        }
    }
    bank.add(labels, threads);
    return bank;
}

std::size_t resolve_n(const Invocation& inv) {
    const std::size_t n = inv.n_vectors.value_or(inv.config.n_vectors);
    if (n < 1 || n > 100) throw ValidationError("--n-vectors must be in [1, 100]");
    return n;
}

}  // namespace

std::vector<std::string> mask_out_argument(const std::vector<std::string>& argv) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < argv.size(); ++i) {
        if (argv[i] == "--out" && i + 1 < argv.size()) {
            out.push_back(argv[i]);
            out.push_back("$OUT");
            ++i;
        } else if (argv[i].rfind("--out=", 0) == 0) {
            out.push_back("--out=$OUT");
        } else {
            out.push_back(argv[i]);
        }
    }
    return out;
}

int cmd_gen_world(const Invocation& inv) {
    const auto& cfg = inv.config;
    const auto& ws = inv.workspace;
    spdlog::info("gen-world: seed {}", cfg.seed);
    const auto world = corpus::generate_toy_world(cfg.world, mix_seed(cfg.seed, kWorldSalt));
    corpus::validate_world(world);
    const auto stage1 = corpus::render_stage1(world);
    const auto stage2 = corpus::render_stage2(world, mix_seed(cfg.seed, kStage2Salt));
    const auto split1 = corpus::split_by_subject(stage1, cfg.split, mix_seed(cfg.seed, kSplitSalt));
    const auto split2 = corpus::apply_manifest(stage2, split1.manifest);
    const auto stars = corpus::export_star_graphs(world);

    fs::create_directories(ws.world());
    write_text_file(ws.world() / "world.json", corpus::world_to_json(world));
    graph::save_star_graphs(stars, ws.world() / "stars.json");
    write_text_file(ws.world() / "manifest.tsv", corpus::manifest_to_tsv(split1.manifest));
    const std::map<std::string, const corpus::SplitResult*> by_style = {{"stage1", &split1}, {"stage2", &split2}};
    ojson outputs, counts;
    for (const auto& [style, split] : by_style) {
        const std::map<std::string, const std::vector<corpus::Bite>*> parts = {
            {"train", &split->train}, {"val", &split->validation}, {"test", &split->test}};
        for (const auto& [name, bites] : parts) {
            const auto path = ws.bites(style, name);
            corpus::save_bites(*bites, path);
            outputs[path.filename().string()] = file_hash(path);
            counts[style + "_" + name] = bites->size();
        }
    }
    outputs["world.json"] = file_hash(ws.world() / "world.json");
    outputs["stars.json"] = file_hash(ws.world() / "stars.json");
    outputs["manifest.tsv"] = file_hash(ws.world() / "manifest.tsv");

    std::map<std::string, std::size_t> subjects_per_split, buckets;
    for (const auto& [qid, s] : split1.manifest) ++subjects_per_split[std::string(corpus::to_string(s))];
    for (const auto& [qid, star] : stars) ++buckets[std::string(graph::to_string(graph::degree_bucket(star)))];
    ojson stats;
    stats["subjects"] = subjects_per_split;
    stats["bites"] = counts;
    stats["facts"] = world.facts.size();
    stats["degree_buckets"] = buckets;
    write_json(ws.world() / "stats.json", stats);
    write_provenance(ws.world() / "provenance.json", "gen-world", inv, cfg.seed, ojson::object(), outputs);
    std::cout << fmt::format("world: {} subjects ({} train / {} val / {} test), {} facts\n", world.subjects.size(),
                             subjects_per_split["train"], subjects_per_split["val"], subjects_per_split["test"],
                             world.facts.size());
    return 0;
}

int cmd_pretrain_lm(const Invocation& inv) {
    const auto& cfg = inv.config;
    const auto& ws = inv.workspace;
    const auto data = load_world(ws);
    const auto& train1 = data.bites.at("stage1_train");
    const auto& train2 = data.bites.at("stage2_train");

    std::vector<std::string> texts;
    for (const auto* set : {&train1, &train2})
        for (const auto& b : *set) texts.push_back(b.text);
    // Tokenizer vocabulary comes from the plain train-split sentences plus
    // predicate labels, which appear in textified prompts.
    std::vector<std::string> vocab_corpus = texts;
    for (const auto& p : data.world.predicates) vocab_corpus.push_back(p.label);
    const auto tokenizer = lm::build_tokenizer(vocab_corpus, cfg.lm.vocab_size);

    Rng rng(mix_seed(cfg.seed, kRagSalt));
    std::size_t rag_count = 0;
    for (const auto* set : {&train1, &train2}) {
        std::map<std::string, std::vector<const corpus::Bite*>> by_subject;
        for (const auto& b : *set) by_subject[b.subject.entity.qid].push_back(&b);
        for (const auto& b : *set) {
            if (rng.uniform01() >= cfg.rag_fraction) continue;
            const auto it = data.stars.find(b.subject.entity.qid);
            if (it == data.stars.end()) continue;
            if (auto t = counterfactual_rag_text(b, by_subject.at(b.subject.entity.qid), it->second, tokenizer, cfg.lm.context + 1, data.world.values, rng)) {
                texts.push_back(*t);
                ++rag_count;
            }
        }
    }
    std::vector<std::vector<lm::TokenId>> sequences;
    std::size_t dropped = 0;
    for (const auto& t : texts) {
        auto ids = tokenizer.encode(t);
        if (ids.size() < 2 || ids.size() > cfg.lm.context + 1) {
            ++dropped;
            continue;
        }
        sequences.push_back(std::move(ids));
    }
    if (dropped) spdlog::warn("pretrain-lm: {} sequences do not fit the context and were dropped", dropped);
    spdlog::info("pretrain-lm: {} sequences ({} textified), vocabulary {}", sequences.size(), rag_count,
                 tokenizer.size());

    auto pcfg = cfg.pretrain;
    pcfg.seed = mix_seed(cfg.seed, kLmSalt);
    pcfg.threads = cfg.threads;
    const auto result = lm::pretrain(cfg.lm, sequences, pcfg);

    fs::create_directories(ws.lm());
    lm::save_lm(result.params, ws.lm_params());
    tokenizer.save(ws.tokenizer());

    // Token-length profile of the stage-2 bites and of three-syllable labels.
    std::vector<std::size_t> lengths;
    for (const auto& split : kSplits)
        for (const auto& b : data.bites.at("stage2_" + split)) lengths.push_back(tokenizer.encode(b.text).size());
    std::sort(lengths.begin(), lengths.end());
    std::map<std::size_t, std::size_t> three_syllable;
    const auto& syll = corpus::syllable_inventory();
    for (const auto* pool : {&data.world.subjects, &data.world.values}) {
        for (const auto& e : *pool) {
            std::size_t letters = 0;
            for (char ch : e.label) letters += ch != ' ' ? 1 : 0;
            if (letters == 3 * syll.front().size()) ++three_syllable[tokenizer.encode(e.label).size()];
        }
    }

    ojson rep;
    rep["sequences"] = result.report.sequences;
    rep["textified_sequences"] = rag_count;
    rep["dropped_sequences"] = dropped;
    rep["tokens"] = result.report.tokens;
    rep["vocabulary"] = tokenizer.size();
    rep["initial_perplexity"] = result.report.initial_perplexity;
    rep["final_perplexity"] = result.report.final_perplexity;
    rep["epoch_loss"] = result.report.epoch_loss;
    rep["stage2_token_length"] = {{"p50", lengths[lengths.size() / 2]},
                                  {"p99", lengths[std::min(lengths.size() - 1, lengths.size() * 99 / 100)]},
                                  {"max", lengths.back()}};
    ojson hist = ojson::object();
    for (const auto& [k, v] : three_syllable) hist[std::to_string(k)] = v;
    rep["three_syllable_label_tokens"] = hist;
    rep["lm_fingerprint"] = result.report.fingerprint;
    write_json(ws.lm() / "pretrain_report.json", rep);

    const ojson inputs = {{"stage1_train.jsonl", file_hash(ws.bites("stage1", "train"))},
                          {"stage2_train.jsonl", file_hash(ws.bites("stage2", "train"))},
                          {"stars.json", file_hash(ws.world() / "stars.json")}};
    const ojson outputs = {{"lm_fingerprint", result.report.fingerprint},
                           {"tokenizer_fingerprint", to_hex(tokenizer.fingerprint())}};
    write_provenance(ws.lm() / "provenance.json", "pretrain-lm", inv, pcfg.seed, inputs, outputs);
    std::cout << fmt::format("lm: perplexity {:.2f} -> {:.2f}, fingerprint {}\n", result.report.initial_perplexity,
                             result.report.final_perplexity, result.report.fingerprint);
    return 0;
}

int cmd_train_cf(const Invocation& inv) {
    const auto& cfg = inv.config;
    const auto& ws = inv.workspace;
    const std::size_t n = resolve_n(inv);
    if (inv.stage && *inv.stage != 1 && *inv.stage != 2) throw ValidationError("--stage must be 1 or 2");
    const bool run1 = !cfg.skip_stage1 && (!inv.stage || *inv.stage == 1);
    const bool run2 = !inv.stage || *inv.stage == 2;
    if (cfg.skip_stage1 && inv.stage && *inv.stage == 1) throw ValidationError("stage 1 is disabled by cf.skip_stage1");

    const auto data = load_world(ws);
    const auto lmd = load_lm_artifacts(ws);
    const auto bank = make_bank(lmd, data.stars, cfg.threads);
    const std::size_t ctx = lmd.params.config.context;
    auto plans = [&](const std::string& key) {
        return make_plans(data.bites.at(key), data.stars, lmd.tokenizer, bank, cfg.cf_top_m, n, ctx, key);
    };

    auto stage_cfg = [&](int stage) {
        auto c = stage == 1 ? cfg.stage1 : cfg.stage2;
        c.seed = mix_seed(mix_seed(cfg.seed, stage == 1 ? kStage1TrainSalt : kStage2TrainSalt), n);
        c.threads = cfg.threads;
        return c;
    };
    const ojson base_inputs = {{"lm_fingerprint", lmd.fingerprint},
                               {"tokenizer_fingerprint", lmd.tokenizer_fingerprint},
                               {"stars.json", file_hash(ws.world() / "stars.json")}};
    fs::create_directories(ws.cf());

    const std::uint64_t init_seed = mix_seed(mix_seed(cfg.seed, kCfInitSalt), n);
    auto params = cf::init_params<float>(lmd.params.config.dim, lmd.params.config.dim, n, cfg.cf_hidden, cfg.cf_slope,
                                         init_seed);
    auto finish_stage = [&](int stage, const train::StageResult& r, const ojson& inputs) {
        ojson prov;
        prov["command"] = "train-cf";
        prov["argv"] = mask_out_argument(inv.argv);
        prov["config_sha256"] = cfg.hash();
        prov["seed"] = r.report.config.seed;
        prov["init_seed"] = init_seed;
        prov["inputs"] = inputs;
        prov["report"] = r.report.to_json();
        train::save_checkpoint(ws.cf(), r.params, stage, prov);
        write_json(ws.cf() / fmt::format("train_n{}_stage{}.json", n, stage), r.report.to_json());
        write_json(ws.cf() / "config.json", cfg.to_json());
        std::cout << fmt::format("stage {}: n={} best epoch {} val loss {:.4f} ({}), cf {}\n", stage, n,
                                 r.report.best_epoch, r.report.epochs[r.report.best_epoch - 1].val_loss,
                                 r.report.stop_reason, r.report.final_cf_fingerprint);
    };

    if (run1) {
        auto inputs = base_inputs;
        inputs["stage1_train.jsonl"] = file_hash(ws.bites("stage1", "train"));
        inputs["stage1_val.jsonl"] = file_hash(ws.bites("stage1", "val"));
        const auto r = train::train_stage(params, lmd.params, plans("stage1_train"), plans("stage1_val"),
                                          stage_cfg(1), "stage1");
        finish_stage(1, r, inputs);
        params = r.params;
    }
    if (run2) {
        auto inputs = base_inputs;
        inputs["stage2_train.jsonl"] = file_hash(ws.bites("stage2", "train"));
        inputs["stage2_val.jsonl"] = file_hash(ws.bites("stage2", "val"));
        if (!cfg.skip_stage1) {
            const auto ckpt = train::checkpoint_path(ws.cf(), n, 1);
            if (!run1) {
                if (!fs::exists(ckpt)) throw ValidationError("missing stage-1 checkpoint " + ckpt.string());
                params = cf::load_cf(ckpt);
            }
            inputs["stage1_checkpoint"] = to_hex(cf::fingerprint(params));
        }
        const auto r = train::train_stage(params, lmd.params, plans("stage2_train"), plans("stage2_val"),
                                          stage_cfg(2), cfg.skip_stage1 ? "stage2 (stage 1 skipped)" : "stage2");
        finish_stage(2, r, inputs);
    }
    return 0;
}

int cmd_eval(const Invocation& inv) {
    const auto& cfg = inv.config;
    const auto& ws = inv.workspace;
    const auto mode = prompt::mode_from_string(inv.mode.value_or("baseline"));
    const std::string split = inv.split.value_or(cfg.eval_split);
    corpus::split_from_string(split);
    const std::string style = cfg.eval_style;
    const auto data = load_world(ws);
    const auto lmd = load_lm_artifacts(ws);
    const auto& dataset = data.bites.at(style + "_" + split);

    eval::EvalOptions opt;
    opt.mode = mode;
    opt.ks = cfg.ks;
    opt.top_m = mode == prompt::Mode::rag ? cfg.rag_top_m : cfg.cf_top_m;
    opt.dataset_name = style + "/" + split;
    opt.threads = cfg.threads;

    ojson inputs = {{"lm_fingerprint", lmd.fingerprint},
                    {"tokenizer_fingerprint", lmd.tokenizer_fingerprint},
                    {"dataset", eval::dataset_fingerprint(dataset)}};
    std::optional<prompt::LabelBank> bank;
    std::optional<cf::CFParams<float>> params;
    std::optional<table::ConceptTable> tbl;
    eval::CfContext ctx;
    std::string suffix;
    if (mode == prompt::Mode::cf) {
        const std::size_t n = resolve_n(inv);
        const int stage = inv.stage.value_or(2);
        const auto ckpt = train::checkpoint_path(ws.cf(), n, stage);
        if (!fs::exists(ckpt)) throw ValidationError("missing checkpoint " + ckpt.string() + " (run train-cf)");
        params = cf::load_cf(ckpt);
        bank.emplace(make_bank(lmd, data.stars, cfg.threads));
        ctx.bank = &*bank;
        ctx.n_vectors = n;
        ctx.fingerprint = to_hex(cf::fingerprint(*params));
        inputs["cf_fingerprint"] = ctx.fingerprint;
        if (inv.table) {
            tbl = table::open_table(*inv.table);
            tbl->require_params(cf::fingerprint(*params), lm::fingerprint(lmd.params));
            ctx.vectors = table::table_provider(*tbl);
            ctx.source = "table";
            inputs["table_sha256"] = file_hash(*inv.table);
        } else {
            ctx.vectors = prompt::live_provider(*params);
        }
        if (stage != 2) suffix = fmt::format("-stage{}", stage);
    }
    auto result = eval::evaluate(dataset, data.stars, lmd.params, lmd.tokenizer, opt,
                                 mode == prompt::Mode::cf ? &ctx : nullptr);
    result.report.label += suffix;
    if (!suffix.empty()) result.report.provenance["cf_stage"] = suffix.substr(1);

    fs::create_directories(ws.eval());
    const std::string stem = result.report.label + "__" + style + "_" + split;
    write_json(ws.eval() / (stem + ".json"), result.report.to_json());
    write_text_file(ws.eval() / (stem + ".audit.jsonl"), result.audit_jsonl());
    write_provenance(ws.eval() / (stem + ".provenance.json"), "eval", inv, cfg.seed, inputs,
                     {{"report", file_hash(ws.eval() / (stem + ".json"))}});
    std::cout << result.report.text_table();
    return 0;
}

int cmd_build_table(const Invocation& inv) {
    const auto& cfg = inv.config;
    const auto& ws = inv.workspace;
    const std::size_t n = resolve_n(inv);
    const int stage = inv.stage.value_or(2);
    const auto data = load_world(ws);
    const auto lmd = load_lm_artifacts(ws);
    const auto ckpt = train::checkpoint_path(ws.cf(), n, stage);
    if (!fs::exists(ckpt)) throw ValidationError("missing checkpoint " + ckpt.string() + " (run train-cf)");
    const auto params = cf::load_cf(ckpt);
    const auto bank = make_bank(lmd, data.stars, cfg.threads);
    const auto path = inv.table.value_or(ws.table_file(n));
    fs::create_directories(path.parent_path());
    const auto r = table::build_table(data.stars, params, lmd.params, bank, cfg.cf_top_m, path, cfg.threads);
    auto prov_path = path;
    prov_path += ".provenance.json";
    write_provenance(prov_path, "build-table", inv, cfg.seed,
                     {{"cf_fingerprint", to_hex(cf::fingerprint(params))},
                      {"lm_fingerprint", lmd.fingerprint},
                      {"stars.json", file_hash(ws.world() / "stars.json")}},
                     {{"table_sha256", r.file_hash}, {"entries", r.entries}});
    std::cout << fmt::format("table: {} entries, {} excluded, sha256 {}\n", r.entries, r.exclusions.size(),
                             r.file_hash);
    return 0;
}

int cmd_report(const Invocation& inv) {
    const auto& ws = inv.workspace;
    if (!fs::exists(ws.eval())) throw ValidationError("no evaluation reports under " + ws.eval().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ws.eval())) {
        const auto name = e.path().filename().string();
        if (name.size() > 5 && name.ends_with(".json") && !name.ends_with(".provenance.json") && name != "config.json")
            files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::map<std::string, std::vector<eval::EvalReport>> groups;  // dataset name -> reports
    for (const auto& f : files) {
        auto r = eval::EvalReport::from_json(read_json(f));
        groups[r.dataset_name].push_back(std::move(r));
    }
    auto order = [](const eval::EvalReport& r) {
        const int mode = r.mode == "baseline" ? 0 : r.mode == "rag" ? 1 : 2;
        return std::make_tuple(mode, r.n_vectors, r.label);
    };
    ojson all = ojson::object();
    std::string text;
    for (auto& [name, reports] : groups) {
        if (reports.size() < 2) continue;
        std::sort(reports.begin(), reports.end(), [&](const auto& a, const auto& b) { return order(a) < order(b); });
        const auto c = eval::compare_report(reports);
        all[name] = c.json;
        text += c.text + "\n";
    }
    if (all.empty()) throw ValidationError("need at least two reports over the same dataset");
    fs::create_directories(ws.report());
    write_json(ws.report() / "comparison.json", all);
    write_text_file(ws.report() / "comparison.txt", text);
    ojson inputs = ojson::object();
    for (const auto& f : files) inputs[f.filename().string()] = file_hash(f);
    write_provenance(ws.report() / "provenance.json", "report", inv, inv.config.seed, inputs,
                     {{"comparison.json", file_hash(ws.report() / "comparison.json")}});
    std::cout << text;
    return 0;
}

}  // namespace kginject::tools
