#include <gtest/gtest.h>

#include <string>

#include "kginject/error.hpp"
#include "kginject_tools/run_config.hpp"

using kginject::ValidationError;
using kginject::tools::RunConfig;

namespace {

std::string message_of(const nlohmann::json& j) {
    try {
        RunConfig::from_json(j);
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(RunConfig, EmptyUserConfigGivesDefaults) {
    const auto c = RunConfig::from_json(nlohmann::json::object());
    EXPECT_EQ(c.hash(), RunConfig::defaults().hash());
    EXPECT_EQ(c.lm.vocab_size, 512u);
    EXPECT_EQ(c.lm.dim, 64u);
    EXPECT_EQ(c.lm.context, 128u);
    EXPECT_EQ(c.n_vectors, 5u);
    EXPECT_EQ(c.ks, (std::vector<std::size_t>{1, 5, 10}));
}

TEST(RunConfig, JsonRoundTrip) {
    auto c = RunConfig::defaults();
    c.seed = 77;
    c.stage2.learning_rate = 1e-4;
    c.n_vectors = 3;
    const auto back = RunConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
}

TEST(RunConfig, PartialOverrideKeepsSiblings) {
    const auto c = RunConfig::from_json({{"stage1", {{"max_epochs", 2}}}});
    EXPECT_EQ(c.stage1.max_epochs, 2u);
    EXPECT_DOUBLE_EQ(c.stage1.learning_rate, RunConfig::defaults().stage1.learning_rate);
}

TEST(RunConfig, UnknownKeyNamesDottedPath) {
    EXPECT_NE(message_of({{"stage1", {{"learning_rat", 0.1}}}}).find("stage1.learning_rat"), std::string::npos);
    EXPECT_NE(message_of({{"bogus", 1}}).find("bogus"), std::string::npos);
}

TEST(RunConfig, TypeMismatchRejected) {
    EXPECT_NE(message_of({{"seed", "one"}}).find("seed"), std::string::npos);
    EXPECT_NE(message_of({{"lm", {{"dim", 1.5}}}}).find("lm.dim"), std::string::npos);
    EXPECT_NE(message_of({{"threads", -2}}).find("threads"), std::string::npos);
    EXPECT_FALSE(message_of({{"lm", 3}}).empty());
}

TEST(RunConfig, FloatKeysAcceptIntegers) {
    EXPECT_DOUBLE_EQ(RunConfig::from_json({{"pretrain", {{"rag_fraction", 1}}}}).rag_fraction, 1.0);
}

TEST(RunConfig, SemanticValidation) {
    EXPECT_FALSE(message_of({{"cf", {{"n_vectors", 0}}}}).empty());
    EXPECT_FALSE(message_of({{"cf", {{"slope", 1.0}}}}).empty());
    EXPECT_FALSE(message_of({{"pretrain", {{"rag_fraction", 1.5}}}}).empty());
    EXPECT_FALSE(message_of({{"eval", {{"style", "stage3"}}}}).empty());
    EXPECT_FALSE(message_of({{"eval", {{"ks", nlohmann::json::array()}}}}).empty());
    EXPECT_FALSE(message_of({{"lm", {{"heads", 5}}}}).empty());
}

TEST(RunConfig, HashTracksEverySetting) {
    const auto a = RunConfig::defaults();
    auto b = a;
    b.stage2.beta2 = 0.998;
    auto c = a;
    c.eval_split = "validation";
    EXPECT_NE(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(a.hash().size(), 64u);
}
