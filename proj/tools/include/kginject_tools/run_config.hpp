#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "kginject/corpus.hpp"
#include "kginject/toy_lm.hpp"
#include "kginject/training.hpp"

namespace kginject::tools {

// Every pipeline setting. Defaults describe the reference desk-scale run.
struct RunConfig {
    std::uint64_t seed = 1;
    unsigned threads = 1;

    corpus::WorldConfig world;
    corpus::SplitRatios split{500.0 / 620.0, 60.0 / 620.0, 60.0 / 620.0};

    lm::LMConfig lm;
    lm::PretrainConfig pretrain;
    double rag_fraction = 1.0;  // share of train bites also seen in textified form

    std::size_t cf_hidden = 128;
    double cf_slope = 0.01;
    std::size_t n_vectors = 5;
    std::size_t cf_top_m = 100;
    bool skip_stage1 = false;
    train::TrainConfig stage1;
    train::TrainConfig stage2;

    std::vector<std::size_t> ks{1, 5, 10};
    std::size_t rag_top_m = 100;
    std::string eval_style = "stage2";
    std::string eval_split = "test";

    static RunConfig defaults();
    // Merges `user` over the defaults. Unknown keys and type mismatches throw
    // ValidationError naming the dotted key.
    static RunConfig from_json(const nlohmann::json& user);
    static RunConfig load(const std::filesystem::path& path);

    nlohmann::ordered_json to_json() const;
    std::string hash() const;  // SHA-256 of the canonical JSON
    void validate() const;
};

}  // namespace kginject::tools
