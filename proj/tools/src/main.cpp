#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

#include "kginject/error.hpp"
#include "kginject_tools/commands.hpp"

using namespace kginject;
using namespace kginject::tools;

int main(int argc, char** argv) {
    CLI::App app{"kginject: concept-vector injection experiments on a toy world"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "workspace";
    std::optional<std::size_t> n_vectors;
    std::optional<std::string> mode;
    std::optional<int> stage;
    std::optional<std::string> table;
    std::optional<std::string> split;
    std::optional<unsigned> threads;
    bool verbose = false;

    app.add_option("--config", config_path, "JSON run configuration (defaults used for missing keys)")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the configured seed");
    app.add_option("--out", out, "workspace directory")->capture_default_str();
    app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 256u));
    app.add_flag("-v,--verbose", verbose, "debug logging");

    auto* gen = app.add_subcommand("gen-world", "generate the toy world, bites, splits and star graphs");
    auto* pre = app.add_subcommand("pretrain-lm", "build the tokenizer and pretrain the frozen LM");
    auto* trn = app.add_subcommand("train-cf", "train the ConceptFormer (both stages unless --stage)");
    auto* evl = app.add_subcommand("eval", "evaluate one prompt mode on the configured split");
    auto* tbl = app.add_subcommand("build-table", "precompute concept vectors for every entity");
    auto* rep = app.add_subcommand("report", "compare all evaluation reports");

    for (auto* sub : {trn, evl, tbl}) sub->add_option("--n-vectors", n_vectors, "concept vectors per entity");
    for (auto* sub : {trn, evl, tbl}) sub->add_option("--stage", stage, "training stage (1 or 2)");
    evl->add_option("--mode", mode, "baseline, rag or cf")->check(CLI::IsMember({"baseline", "rag", "cf"}));
    evl->add_option("--table", table, "serve cf vectors from this concept table");
    evl->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    tbl->add_option("--table", table, "output path for the table");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
    spdlog::set_pattern("[%l] %v");

    try {
        Invocation inv;
        inv.config = config_path.empty() ? RunConfig::defaults() : RunConfig::load(config_path);
        if (seed) inv.config.seed = *seed;
        if (threads) inv.config.threads = *threads;
        inv.workspace.root = out;
        inv.argv.assign(argv, argv + argc);
        inv.argv[0] = "kginject";
        inv.n_vectors = n_vectors;
        inv.mode = mode;
        inv.stage = stage;
        if (table) inv.table = *table;
        inv.split = split;

        if (gen->parsed()) return cmd_gen_world(inv);
        if (pre->parsed()) return cmd_pretrain_lm(inv);
        if (trn->parsed()) return cmd_train_cf(inv);
        if (evl->parsed()) return cmd_eval(inv);
        if (tbl->parsed()) return cmd_build_table(inv);
        if (rep->parsed()) return cmd_report(inv);
    } catch (const IntegrityError& e) {
        spdlog::error("integrity failure: {}", e.what());
        return 3;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("unexpected failure: {}", e.what());
        return 1;
    }
    return 1;
}
