#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kginject_tools/run_config.hpp"

namespace kginject::tools {

// Directory layout under --out.
struct Workspace {
    std::filesystem::path root;

    std::filesystem::path world() const { return root / "world"; }
    std::filesystem::path lm() const { return root / "lm"; }
    std::filesystem::path cf() const { return root / "cf"; }
    std::filesystem::path eval() const { return root / "eval"; }
    std::filesystem::path table() const { return root / "table"; }
    std::filesystem::path report() const { return root / "report"; }

    std::filesystem::path bites(const std::string& style, const std::string& split) const {
        return world() / (style + "_" + split + ".jsonl");
    }
    std::filesystem::path lm_params() const { return lm() / "lm.tlm1"; }
    std::filesystem::path tokenizer() const { return lm() / "tokenizer.txt"; }
    std::filesystem::path table_file(std::size_t n) const {
        return table() / ("concepts_n" + std::to_string(n) + ".cflt");
    }
};

struct Invocation {
    RunConfig config = RunConfig::defaults();
    Workspace workspace;
    std::vector<std::string> argv;  // recorded in provenance with --out masked
    std::optional<std::size_t> n_vectors;
    std::optional<std::string> mode;
    std::optional<int> stage;
    std::optional<std::filesystem::path> table;
    std::optional<std::string> split;
};

int cmd_gen_world(const Invocation& inv);
int cmd_pretrain_lm(const Invocation& inv);
int cmd_train_cf(const Invocation& inv);
int cmd_eval(const Invocation& inv);
int cmd_build_table(const Invocation& inv);
int cmd_report(const Invocation& inv);

// Replaces the value following --out (or of --out=...) with "$OUT".
std::vector<std::string> mask_out_argument(const std::vector<std::string>& argv);

}  // namespace kginject::tools
