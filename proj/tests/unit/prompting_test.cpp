#include <gtest/gtest.h>

#include "kginject/corpus.hpp"
#include "kginject/prompting.hpp"
#include "kginject/toy_lm.hpp"
#include "support/small_world.hpp"

using namespace kginject;
using namespace kginject::prompt;

namespace {

using Fixture = kginject::testing::SmallWorld;
const Fixture& fx() { return kginject::testing::small_world(); }

corpus::Bite einstein_bite() {
    const std::string text = "Albert Einstein wore a walrus moustache.";
    return {text, {{"Q1", "Albert Einstein", 0.5}, {0, 15}}, {{"Q2", "walrus moustache", 0.5}, {23, 39}},
            {"P103", "facial hair"}};
}

graph::StarGraph einstein_star() {
    return {{"Q1", "Albert Einstein", 0.5}, {{{"P103", "facial hair"}, {"Q2", "walrus moustache", 0.5}}}};
}

lm::Tokenizer einstein_tokenizer() {
    return lm::build_tokenizer({einstein_bite().text, "facial hair, x"}, 80);
}

}  // namespace

TEST(Prompting, BaselineTruncatesBeforeObject) {
    const auto tok = einstein_tokenizer();
    const auto p = std::get<AssembledPrompt>(build_baseline(einstein_bite(), tok, 128));
    EXPECT_EQ(tok.decode(p.ids), "Albert Einstein wore a");
    EXPECT_EQ(p.targets, tok.encode(" walrus moustache"));
    EXPECT_EQ(p.ledger.soft_vectors, 0u);
    EXPECT_EQ(p.ledger.hard_tokens, p.ids.size());
    EXPECT_EQ(p.ledger.expansion(), 0u);
}

TEST(Prompting, TargetsIndependentOfObjectPosition) {
    const auto tok = lm::build_tokenizer({"ab went to cd now.", "ab went to cd."}, 60);
    const corpus::Bite end{"ab went to cd.", {{"Q1", "ab", 0}, {0, 2}}, {{"Q2", "cd", 0}, {11, 13}}, {"P1", "r"}};
    const corpus::Bite mid{"ab went to cd now.", {{"Q1", "ab", 0}, {0, 2}}, {{"Q2", "cd", 0}, {11, 13}}, {"P1", "r"}};
    const auto a = std::get<AssembledPrompt>(build_baseline(end, tok, 128));
    const auto b = std::get<AssembledPrompt>(build_baseline(mid, tok, 128));
    EXPECT_EQ(a.targets, b.targets);
    EXPECT_EQ(a.ids, b.ids);
}

TEST(Prompting, ObjectBeforeSubjectRejected) {
    // A valid bite always has a non-empty prefix; an object at offset 0 is invalid.
    const auto tok = lm::build_tokenizer({"cd went."}, 40);
    const corpus::Bite b{"cd went.", {{"Q1", "cd", 0}, {0, 2}}, {{"Q2", "cd", 0}, {0, 2}}, {"P1", "r"}};
    EXPECT_THROW(build_baseline(b, tok, 128), ValidationError);
}

TEST(Prompting, RagEinsteinTemplate) {
    EXPECT_EQ(textify("Albert Einstein", einstein_star().neighbors), "Albert Einstein, facial hair walrus moustache");
    EXPECT_EQ(textify_parenthetical("Albert Einstein", einstein_star().neighbors),
              "Albert Einstein (facial hair: walrus moustache)");
    const auto tok = einstein_tokenizer();
    const auto p = std::get<AssembledPrompt>(build_rag(einstein_bite(), einstein_star(), tok, 100, 128));
    EXPECT_EQ(tok.decode(p.ids), "Albert Einstein, facial hair walrus moustache wore a");
    EXPECT_EQ(p.targets, tok.encode(" walrus moustache"));
    EXPECT_EQ(p.neighbors_used, 1u);
}

TEST(Prompting, RagLedgerGrowsWithTopM) {
    const auto& f = fx();
    const auto& bite = f.stage2.front();
    const auto& star = f.stars.at(bite.subject.entity.qid);
    ASSERT_GE(star.degree(), 3u);
    std::size_t last = 0;
    for (std::size_t m = 1; m <= star.degree(); ++m) {
        const auto p = std::get<AssembledPrompt>(build_rag(bite, star, f.tokenizer, m, 128));
        EXPECT_GT(p.ledger.hard_tokens, last);
        last = p.ledger.hard_tokens;
    }
}

TEST(Prompting, RagTruncatesToFitContext) {
    const auto& f = fx();
    for (const auto& bite : f.stage2) {
        const auto& star = f.stars.at(bite.subject.entity.qid);
        for (std::size_t context : {40u, 60u, 128u}) {
            const auto r = build_rag(bite, star, f.tokenizer, 100, context);
            if (is_skip(r)) continue;
            const auto& p = std::get<AssembledPrompt>(r);
            EXPECT_LE(p.ids.size() + p.targets.size() - 1, context);
            EXPECT_LE(p.neighbors_used, star.degree());
        }
    }
    // Nothing fits into a context shorter than the bare sentence.
    const auto& bite = f.stage2.front();
    EXPECT_TRUE(is_skip(build_rag(bite, f.stars.at(bite.subject.entity.qid), f.tokenizer, 100, 5)));
}

TEST(Prompting, InjectionSplicesAfterSubject) {
    const auto& f = fx();
    LabelBank bank(f.lm, f.tokenizer);
    for (const auto& bite : {f.stage1[3], f.stage2[3]}) {
        const auto& star = f.stars.at(bite.subject.entity.qid);
        bank.add_star(star, 1);
        const auto base = std::get<AssembledPrompt>(build_baseline(bite, f.tokenizer, 128));
        const auto p = std::get<AssembledPrompt>(build_injected(bite, star, f.cf, f.tokenizer, f.lm, bank, 100));
        EXPECT_EQ(p.ledger.soft_vectors, 3u);
        EXPECT_EQ(p.embeddings.rows(), base.ids.size() + 3);
        EXPECT_EQ(p.ids, base.ids);
        EXPECT_EQ(p.targets, base.targets);
        // The token before the soft rows ends the subject mention.
        const auto trunc = std::get<Truncation>(truncate_before_object(bite));
        const auto offs = f.tokenizer.encode_with_offsets(trunc.prefix);
        ASSERT_GT(p.insertion_index, 0u);
        EXPECT_EQ(offs[p.insertion_index - 1].end, trunc.subject_end);
        // Original rows keep their order around the splice.
        const auto emb = lm::embedding_rows(f.lm, std::span<const TokenId>(base.ids));
        for (std::size_t i = 0; i < base.ids.size(); ++i) {
            const std::size_t row = i < p.insertion_index ? i : i + 3;
            for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(p.embeddings(row, j), emb(i, j));
        }
        // Removing the soft rows reproduces the baseline logits bitwise.
        Matrix<float> stripped(base.ids.size(), 16);
        for (std::size_t i = 0; i < base.ids.size(); ++i) {
            const std::size_t row = i < p.insertion_index ? i : i + 3;
            for (std::size_t j = 0; j < 16; ++j) stripped(i, j) = p.embeddings(row, j);
        }
        const auto a = lm::forward_embeddings(f.lm, stripped).logits;
        const auto b = lm::forward_tokens(f.lm, std::span<const TokenId>(base.ids)).logits;
        EXPECT_EQ(max_abs_diff(a, b), 0.0f);
    }
}

TEST(Prompting, SingleVectorLedger) {
    const auto& f = fx();
    const auto one = cf::init_params<float>(16, 16, 1, 8, 0.01f, 5);
    LabelBank bank(f.lm, f.tokenizer);
    const auto& bite = f.stage2[5];
    const auto& star = f.stars.at(bite.subject.entity.qid);
    bank.add_star(star, 1);
    const auto p = std::get<AssembledPrompt>(build_injected(bite, star, one, f.tokenizer, f.lm, bank, 100));
    EXPECT_EQ(p.ledger.soft_vectors, 1u);
    EXPECT_EQ(p.ledger.expansion(), 1u);
    EXPECT_EQ(p.length(), p.ids.size() + 1);
}

TEST(Prompting, IsolatedSubjectDowngrades) {
    const auto& f = fx();
    const auto& bite = f.stage2[0];
    graph::StarGraph lonely{f.stars.at(bite.subject.entity.qid).center, {}};
    LabelBank bank(f.lm, f.tokenizer);
    bank.add_star(lonely, 1);
    const auto p = std::get<AssembledPrompt>(build_injected(bite, lonely, f.cf, f.tokenizer, f.lm, bank, 100));
    EXPECT_EQ(p.mode, Mode::baseline);
    EXPECT_EQ(p.ledger.soft_vectors, 0u);
    EXPECT_FALSE(p.downgrade.empty());
}

TEST(Prompting, CenterMismatchSkips) {
    const auto& f = fx();
    LabelBank bank(f.lm, f.tokenizer);
    const auto& bite = f.stage2[0];
    const auto& other = f.stars.rbegin()->second;
    ASSERT_NE(other.center.qid, bite.subject.entity.qid);
    bank.add_star(other, 1);
    EXPECT_TRUE(is_skip(plan_injection(bite, other, f.tokenizer, bank, 100, 3, 128)));
}

TEST(Prompting, TargetsAgreeAcrossModes) {
    const auto& f = fx();
    LabelBank bank(f.lm, f.tokenizer);
    for (std::size_t i = 0; i < f.stage2.size(); i += 11) {
        const auto& bite = f.stage2[i];
        const auto& star = f.stars.at(bite.subject.entity.qid);
        bank.add_star(star, 1);
        const auto a = std::get<AssembledPrompt>(build_baseline(bite, f.tokenizer, 128));
        const auto b = std::get<AssembledPrompt>(build_rag(bite, star, f.tokenizer, 100, 128));
        const auto c = std::get<AssembledPrompt>(build_injected(bite, star, f.cf, f.tokenizer, f.lm, bank, 100));
        EXPECT_EQ(a.targets, b.targets);
        EXPECT_EQ(a.targets, c.targets);
        EXPECT_FALSE(a.targets.empty());
    }
}

TEST(Prompting, LabelBankRequiresKnownLabels) {
    const auto& f = fx();
    LabelBank bank(f.lm, f.tokenizer);
    EXPECT_THROW(bank.at("never added"), ValidationError);
    bank.add({"bada"}, 1);
    EXPECT_EQ(bank.at("bada").cols(), 16u);
    EXPECT_EQ(bank.size(), 1u);
}

TEST(Prompting, EmbedSubgraphShapes) {
    const auto& f = fx();
    LabelBank bank(f.lm, f.tokenizer);
    const auto& star = f.stars.begin()->second;
    bank.add_star(star, 1);
    const auto g = embed_subgraph(star, 2, bank);
    EXPECT_EQ(g.C.rows(), 1u);
    EXPECT_EQ(g.m(), std::min<std::size_t>(2, star.degree()));
    EXPECT_EQ(g.N.cols(), 16u);
    EXPECT_EQ(g.E.rows(), g.N.rows());
    const auto& first = bank.at(star.neighbors[0].entity.label);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(g.N(0, j), first(0, j));
}

TEST(Prompting, DumpRecord) {
    const auto tok = einstein_tokenizer();
    const auto p = std::get<AssembledPrompt>(build_baseline(einstein_bite(), tok, 128));
    const auto j = dump_record(p);
    EXPECT_EQ(j.at("mode"), "baseline");
    EXPECT_EQ(j.at("ledger").at("soft_vectors"), 0);
    EXPECT_EQ(j.at("target_ids").size(), p.targets.size());
    EXPECT_EQ(mode_from_string("cf"), Mode::cf);
    EXPECT_THROW(mode_from_string("soft"), ValidationError);
}
