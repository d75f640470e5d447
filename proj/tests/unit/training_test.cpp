#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/rng.hpp"
#include "kginject/training.hpp"
#include "support/small_world.hpp"

using namespace kginject;
using namespace kginject::train;
using kginject::testing::small_bank;
using kginject::testing::small_plans;
using kginject::testing::small_world;

namespace {

TrainConfig quick_config() {
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.batch_size = 8;
    c.max_epochs = 3;
    c.patience = 1;
    c.seed = 17;
    return c;
}

lm::LMParams<float> zero_lm(std::size_t vocab) {
    lm::LMConfig c;
    c.vocab_size = vocab;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.ff = 8;
    c.context = 16;
    return lm::LMParams<float>::zeros(c);
}

Matrix<float> random_rows(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix<float> m(r, c);
    for (auto& v : m.flat()) v = static_cast<float>(rng.normal(0.0, 1.0));
    return m;
}

}  // namespace

TEST(Training, EarlyStopperPatienceOne) {
    EarlyStopper s(1);
    EXPECT_TRUE(s.update(1.00));
    EXPECT_FALSE(s.should_stop());
    EXPECT_TRUE(s.update(0.90));
    EXPECT_FALSE(s.should_stop());
    EXPECT_FALSE(s.update(0.92));
    EXPECT_TRUE(s.should_stop());
    EXPECT_EQ(s.best_epoch(), 2u);
    EXPECT_DOUBLE_EQ(s.best_loss(), 0.90);
}

TEST(Training, EarlyStopperEqualIsNotImprovement) {
    EarlyStopper s(2);
    s.update(1.0);
    EXPECT_FALSE(s.update(1.0));
    EXPECT_FALSE(s.should_stop());
    EXPECT_FALSE(s.update(1.1));
    EXPECT_TRUE(s.should_stop());
    EXPECT_EQ(s.best_epoch(), 1u);
}

TEST(Training, UniformLogitsGiveLogVocab) {
    // All-zero weights: every hidden state is zero, so logits are uniform.
    const auto lm = zero_lm(512);
    const std::vector<lm::TokenId> targets{3, 7, 400};
    const auto r = object_loss<float>(lm, nullptr, random_rows(4, 8, 1), targets, 0);
    EXPECT_NEAR(r.loss, std::log(512.0), 1e-5);
}

TEST(Training, CertainTargetsGiveZeroLoss) {
    auto lm = zero_lm(20);
    lm.lnf_b(0, 0) = 1.0f;
    lm.head(0, 5) = 200.0f;
    const std::vector<lm::TokenId> targets{5, 5};
    const auto r = object_loss<float>(lm, nullptr, random_rows(3, 8, 2), targets, 0);
    EXPECT_NEAR(r.loss, 0.0, 1e-12);
}

TEST(Training, LossMatchesIndependentLogSoftmax) {
    const auto& f = small_world();
    const auto prompt = random_rows(6, 16, 3);
    const std::vector<lm::TokenId> targets{11, 42, 7};
    const auto r = object_loss<float>(f.lm, nullptr, prompt, targets, 0);

    // Rebuild the teacher-forced sequence, dump logits and recompute.
    Matrix<float> seq(8, 16);
    const auto emb = lm::embedding_rows(f.lm, std::span<const lm::TokenId>(targets).first(2));
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 16; ++j) seq(i, j) = prompt(i, j);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 16; ++j) seq(6 + i, j) = emb(i, j);
    const auto logits = lm::forward_embeddings(f.lm, seq).logits;
    long double total = 0;
    for (std::size_t t = 0; t < 3; ++t) {
        const std::size_t row = 5 + t;
        long double mx = -1e300L, sum = 0;
        for (std::size_t v = 0; v < logits.cols(); ++v) mx = std::max<long double>(mx, logits(row, v));
        for (std::size_t v = 0; v < logits.cols(); ++v) sum += std::exp(static_cast<long double>(logits(row, v)) - mx);
        total -= static_cast<long double>(logits(row, static_cast<std::size_t>(targets[t]))) - mx - std::log(sum);
    }
    EXPECT_NEAR(r.loss, static_cast<double>(total / 3), 1e-5);
}

TEST(Training, InputGradientMatchesFiniteDifferences) {
    const auto& f = small_world();
    const auto lm = lm::cast_params<double>(f.lm);
    Rng rng(9);
    Matrix<double> prompt(5, 16);
    for (auto& v : prompt.flat()) v = rng.normal(0.0, 1.0);
    const std::vector<lm::TokenId> targets{4, 19, 250};
    const lm::TransposedWeights<double> tw(lm);
    const auto r = object_loss<double>(lm, &tw, prompt, targets, 2);
    ASSERT_EQ(r.input_grad.rows(), 7u);
    double worst = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 16; j += 3) {
            auto p = prompt, m = prompt;
            const double h = 1e-5;
            p(i, j) += h;
            m(i, j) -= h;
            const double fd = (object_loss<double>(lm, nullptr, p, targets, 0).loss -
                               object_loss<double>(lm, nullptr, m, targets, 0).loss) / (2 * h);
            if (i < 2) {
                EXPECT_EQ(r.input_grad(i, j), 0.0);
            } else {
                const double a = r.input_grad(i, j);
                worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
            }
        }
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(Training, OverlongSequenceRejected) {
    const auto lm = zero_lm(20);
    const std::vector<lm::TokenId> targets{1, 2, 3};
    EXPECT_THROW(object_loss<float>(lm, nullptr, random_rows(15, 8, 1), targets, 0), ValidationError);
    EXPECT_THROW(object_loss<float>(lm, nullptr, random_rows(3, 8, 1), std::vector<lm::TokenId>{}, 0),
                 ValidationError);
}

TEST(Training, InjectedGradientCoversSoftRowsOnly) {
    const auto& f = small_world();
    const auto bank = small_bank();
    const auto& bite = f.stage2[2];
    const auto p = std::get<prompt::AssembledPrompt>(
        prompt::build_injected(bite, f.stars.at(bite.subject.entity.qid), f.cf, f.tokenizer, f.lm, bank, 100));
    const auto r = object_loss(f.lm, p);
    EXPECT_EQ(r.vector_grad.rows(), 3u);
    EXPECT_EQ(r.vector_grad.cols(), 16u);
    EXPECT_TRUE(all_finite(r.vector_grad));
    EXPECT_GT(r.loss, 0.0);
}

TEST(Training, ConfigValidation) {
    TrainConfig c;
    c.validate();
    c.learning_rate = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.patience = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.numeric_width = 64;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_DOUBLE_EQ(TrainConfig{}.learning_rate, 6e-5);
    EXPECT_DOUBLE_EQ(TrainConfig{}.weight_decay, 0.01);
}

TEST(Training, StageIsDeterministicAndAudited) {
    const auto& f = small_world();
    const auto bank = small_bank();
    const auto train = small_plans(std::vector<corpus::Bite>(f.stage1.begin(), f.stage1.begin() + 40), bank, 3);
    const auto val = small_plans(std::vector<corpus::Bite>(f.stage1.begin() + 40, f.stage1.begin() + 60), bank, 3);
    const auto a = train_stage(f.cf, f.lm, train, val, quick_config(), "stage1");
    const auto b = train_stage(f.cf, f.lm, train, val, quick_config(), "stage1");
    EXPECT_EQ(a.report.to_json().dump(), b.report.to_json().dump());
    EXPECT_EQ(a.report.final_cf_fingerprint, b.report.final_cf_fingerprint);
    EXPECT_EQ(a.report.lm_fingerprint_before, a.report.lm_fingerprint_after);
    EXPECT_EQ(a.report.lm_fingerprint_before, to_hex(lm::fingerprint(f.lm)));
    // Loss goes down and the restored parameters are the best-validation ones.
    ASSERT_FALSE(a.report.epochs.empty());
    EXPECT_LT(a.report.epochs.front().train_loss, a.report.initial_train_loss);
    const auto& best = a.report.epochs[a.report.best_epoch - 1];
    EXPECT_EQ(best.cf_fingerprint, a.report.final_cf_fingerprint);
    EXPECT_DOUBLE_EQ(mean_loss(a.params, f.lm, val, 1), best.val_loss);
}

TEST(Training, ThreadCountDoesNotChangeResult) {
    const auto& f = small_world();
    const auto bank = small_bank();
    const auto train = small_plans(std::vector<corpus::Bite>(f.stage1.begin(), f.stage1.begin() + 24), bank, 3);
    const auto val = small_plans(std::vector<corpus::Bite>(f.stage1.begin() + 24, f.stage1.begin() + 32), bank, 3);
    auto c = quick_config();
    c.max_epochs = 1;
    const auto one = train_stage(f.cf, f.lm, train, val, c, "s");
    c.threads = 3;
    const auto three = train_stage(f.cf, f.lm, train, val, c, "s");
    EXPECT_EQ(one.report.final_cf_fingerprint, three.report.final_cf_fingerprint);
}

TEST(Training, EmptySetsRejected) {
    const auto& f = small_world();
    const auto bank = small_bank();
    const auto some = small_plans(std::vector<corpus::Bite>(f.stage1.begin(), f.stage1.begin() + 4), bank, 3);
    EXPECT_THROW(train_stage(f.cf, f.lm, {}, some, quick_config(), "s"), ValidationError);
    EXPECT_THROW(train_stage(f.cf, f.lm, some, {}, quick_config(), "s"), ValidationError);
    const auto wide = cf::init_params<float>(16, 24, 3, 8, 0.01f, 1);
    EXPECT_THROW(train_stage(wide, f.lm, some, some, quick_config(), "s"), ValidationError);
}

TEST(Training, TwoStageChainsAndCanSkip) {
    const auto& f = small_world();
    const auto bank = small_bank();
    TwoStageData d;
    d.stage1_train = small_plans(std::vector<corpus::Bite>(f.stage1.begin(), f.stage1.begin() + 24), bank, 3);
    d.stage1_val = small_plans(std::vector<corpus::Bite>(f.stage1.begin() + 24, f.stage1.begin() + 32), bank, 3);
    d.stage2_train = small_plans(std::vector<corpus::Bite>(f.stage2.begin(), f.stage2.begin() + 24), bank, 3);
    d.stage2_val = small_plans(std::vector<corpus::Bite>(f.stage2.begin() + 24, f.stage2.begin() + 32), bank, 3);
    auto c = quick_config();
    c.max_epochs = 2;
    const auto both = run_two_stage(f.cf, f.lm, d, c, c, false);
    ASSERT_TRUE(both.stage1.has_value());
    EXPECT_EQ(both.stage2.initial_cf_fingerprint, both.stage1->final_cf_fingerprint);
    EXPECT_EQ(both.stage1->lm_fingerprint_after, both.stage2.lm_fingerprint_after);
    EXPECT_FALSE(both.to_json().at("stage1_skipped").get<bool>());

    const auto skipped = run_two_stage(f.cf, f.lm, d, c, c, true);
    EXPECT_FALSE(skipped.stage1.has_value());
    EXPECT_TRUE(skipped.to_json().at("stage1_skipped").get<bool>());
    EXPECT_EQ(skipped.stage2.initial_cf_fingerprint, to_hex(cf::fingerprint(f.cf)));
}

TEST(Training, CheckpointRoundTrip) {
    const auto& f = small_world();
    const auto dir = std::filesystem::temp_directory_path() / "kginject_ckpt_test";
    std::filesystem::remove_all(dir);
    const auto path = save_checkpoint(dir, f.cf, 2, {{"note", "test"}});
    EXPECT_EQ(path, checkpoint_path(dir, 3, 2));
    EXPECT_EQ(path.filename(), "cf_n3_stage2.cfp1");
    EXPECT_EQ(cf::fingerprint(cf::load_cf(path)), cf::fingerprint(f.cf));
    auto sidecar = path;
    sidecar.replace_extension(".json");
    const auto j = nlohmann::json::parse(read_text_file(sidecar));
    EXPECT_EQ(j.at("cf_fingerprint"), to_hex(cf::fingerprint(f.cf)));
}
