#pragma once

#include <string>
#include <vector>

#include "kginject/conceptformer.hpp"
#include "kginject/corpus.hpp"
#include "kginject/prompting.hpp"
#include "kginject/tokenizer.hpp"
#include "kginject/toy_lm.hpp"

namespace kginject::testing {

// A 40-subject world with a tokenizer and an untrained 16-wide LM.
struct SmallWorld {
    corpus::ToyWorld world;
    std::vector<corpus::Bite> stage1, stage2;
    graph::StarCollection stars;
    lm::Tokenizer tokenizer;
    lm::LMParams<float> lm;
    cf::CFParams<float> cf;  // n = 3, hidden 8
};

inline const SmallWorld& small_world() {
    static const SmallWorld f = [] {
        SmallWorld x;
        corpus::WorldConfig wc;
        wc.subjects = 40;
        wc.value_pool = 30;
        x.world = corpus::generate_toy_world(wc, 8);
        x.stage1 = corpus::render_stage1(x.world);
        x.stage2 = corpus::render_stage2(x.world, 9);
        x.stars = corpus::export_star_graphs(x.world);
        std::vector<std::string> texts;
        for (const auto& b : x.stage1) texts.push_back(b.text);
        for (const auto& b : x.stage2) texts.push_back(b.text);
        for (const auto& p : x.world.predicates) texts.push_back(p.label);
        x.tokenizer = lm::build_tokenizer(texts, 300);
        lm::LMConfig c;
        c.vocab_size = 300;
        c.dim = 16;
        c.layers = 1;
        c.heads = 2;
        c.ff = 32;
        x.lm = lm::init_lm<float>(c, 3);
        x.cf = cf::init_params<float>(16, 16, 3, 8, 0.01f, 4);
        return x;
    }();
    return f;
}

// Injection plans for every bite whose subject has a star graph.
inline std::vector<prompt::InjectionPlan> small_plans(const std::vector<corpus::Bite>& bites,
                                                      const prompt::LabelBank& bank, std::size_t n) {
    const auto& f = small_world();
    std::vector<prompt::InjectionPlan> out;
    for (const auto& b : bites) {
        auto p = prompt::plan_injection(b, f.stars.at(b.subject.entity.qid), f.tokenizer, bank, 100, n, 128);
        if (!is_skip(p)) out.push_back(std::get<prompt::InjectionPlan>(std::move(p)));
    }
    return out;
}

inline prompt::LabelBank small_bank() {
    const auto& f = small_world();
    prompt::LabelBank bank(f.lm, f.tokenizer);
    for (const auto& [q, s] : f.stars) bank.add_star(s, 1);
    return bank;
}

}  // namespace kginject::testing
