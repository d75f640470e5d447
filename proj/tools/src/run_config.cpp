#include "kginject_tools/run_config.hpp"

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/hashing.hpp"

namespace kginject::tools {

namespace {

using ojson = nlohmann::ordered_json;

ojson train_json(const train::TrainConfig& c) {
    return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
            {"beta2", c.beta2},                 {"epsilon", c.epsilon},           {"batch_size", c.batch_size},
            {"max_epochs", c.max_epochs},       {"patience", c.patience},         {"numeric_width", c.numeric_width}};
}

void train_from(const ojson& j, train::TrainConfig& c) {
    c.learning_rate = j.at("learning_rate");
    c.weight_decay = j.at("weight_decay");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.epsilon = j.at("epsilon");
    c.batch_size = j.at("batch_size");
    c.max_epochs = j.at("max_epochs");
    c.patience = j.at("patience");
    c.numeric_width = j.at("numeric_width");
}

bool same_kind(const ojson& a, const nlohmann::json& b) {
    if (a.is_number()) {
        if (a.is_number_float()) return b.is_number();
        return b.is_number_integer() || b.is_number_unsigned();
    }
    return a.type() == b.type();
}

void merge(ojson& base, const nlohmann::json& user, const std::string& path) {
    if (!user.is_object()) throw ValidationError("config section '" + path + "' must be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string dotted = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ValidationError("unknown config key '" + dotted + "'");
        auto& slot = base[key];
        if (slot.is_object()) {
            merge(slot, value, dotted);
        } else {
            if (!same_kind(slot, value)) throw ValidationError("config key '" + dotted + "' has the wrong type");
            if (slot.is_number_unsigned() && value.is_number_integer() && value.get<std::int64_t>() < 0)
                throw ValidationError("config key '" + dotted + "' must be non-negative");
            slot = value;
        }
    }
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.pretrain.epochs = 8;
    c.pretrain.batch_size = 16;
    c.pretrain.learning_rate = 3e-3;
    c.pretrain.warmup_steps = 100;
    c.stage1.learning_rate = 1e-3;
    c.stage1.batch_size = 16;
    c.stage1.max_epochs = 6;
    c.stage2.learning_rate = 5e-4;
    c.stage2.batch_size = 16;
    c.stage2.max_epochs = 4;
    return c;
}

ojson RunConfig::to_json() const {
    ojson j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["world"] = {{"subjects", world.subjects},       {"value_pool", world.value_pool},
                  {"predicates", world.predicates},   {"min_degree", world.min_degree},
                  {"max_degree", world.max_degree},   {"min_syllables", world.min_syllables},
                  {"max_syllables", world.max_syllables},
                  {"split", {{"train", split.train}, {"validation", split.validation}, {"test", split.test}}}};
    j["lm"] = {{"vocab_size", lm.vocab_size}, {"dim", lm.dim},         {"layers", lm.layers},
               {"heads", lm.heads},           {"context", lm.context}, {"ff", lm.ff}};
    j["pretrain"] = {{"epochs", pretrain.epochs},
                     {"batch_size", pretrain.batch_size},
                     {"learning_rate", pretrain.learning_rate},
                     {"min_lr_ratio", pretrain.min_lr_ratio},
                     {"warmup_steps", pretrain.warmup_steps},
                     {"weight_decay", pretrain.weight_decay},
                     {"eval_sequences", pretrain.eval_sequences},
                     {"rag_fraction", rag_fraction}};
    j["cf"] = {{"n_vectors", n_vectors}, {"hidden", cf_hidden}, {"slope", cf_slope}, {"top_m", cf_top_m},
               {"skip_stage1", skip_stage1}};
    j["stage1"] = train_json(stage1);
    j["stage2"] = train_json(stage2);
    j["eval"] = {{"ks", ks}, {"rag_top_m", rag_top_m}, {"style", eval_style}, {"split", eval_split}};
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& user) {
    ojson j = defaults().to_json();
    merge(j, user, "");
    RunConfig c;
    try {
        c.seed = j.at("seed");
        c.threads = j.at("threads");
        const auto& w = j.at("world");
        c.world.subjects = w.at("subjects");
        c.world.value_pool = w.at("value_pool");
        c.world.predicates = w.at("predicates");
        c.world.min_degree = w.at("min_degree");
        c.world.max_degree = w.at("max_degree");
        c.world.min_syllables = w.at("min_syllables");
        c.world.max_syllables = w.at("max_syllables");
        c.split = {w.at("split").at("train"), w.at("split").at("validation"), w.at("split").at("test")};
        const auto& l = j.at("lm");
        c.lm = {l.at("vocab_size"), l.at("dim"), l.at("layers"), l.at("heads"), l.at("context"), l.at("ff")};
        const auto& p = j.at("pretrain");
        c.pretrain.epochs = p.at("epochs");
        c.pretrain.batch_size = p.at("batch_size");
        c.pretrain.learning_rate = p.at("learning_rate");
        c.pretrain.min_lr_ratio = p.at("min_lr_ratio");
        c.pretrain.warmup_steps = p.at("warmup_steps");
        c.pretrain.weight_decay = p.at("weight_decay");
        c.pretrain.eval_sequences = p.at("eval_sequences");
        c.rag_fraction = p.at("rag_fraction");
        const auto& f = j.at("cf");
        c.n_vectors = f.at("n_vectors");
        c.cf_hidden = f.at("hidden");
        c.cf_slope = f.at("slope");
        c.cf_top_m = f.at("top_m");
        c.skip_stage1 = f.at("skip_stage1");
        train_from(j.at("stage1"), c.stage1);
        train_from(j.at("stage2"), c.stage2);
        const auto& e = j.at("eval");
        c.ks = e.at("ks").get<std::vector<std::size_t>>();
        c.rag_top_m = e.at("rag_top_m");
        c.eval_style = e.at("style");
        c.eval_split = e.at("split");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("invalid config value: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

std::string RunConfig::hash() const { return to_hex(sha256(to_json().dump())); }

void RunConfig::validate() const {
    lm.validate();
    stage1.validate();
    stage2.validate();
    if (threads < 1) throw ValidationError("threads must be >= 1");
    if (n_vectors < 1 || n_vectors > 100) throw ValidationError("cf.n_vectors must be in [1, 100]");
    if (cf_hidden < 1) throw ValidationError("cf.hidden must be >= 1");
    if (!(cf_slope > 0.0 && cf_slope < 1.0)) throw ValidationError("cf.slope must lie in (0, 1)");
    if (rag_fraction < 0.0 || rag_fraction > 1.0) throw ValidationError("pretrain.rag_fraction must lie in [0, 1]");
    if (ks.empty()) throw ValidationError("eval.ks must not be empty");
    if (eval_style != "stage1" && eval_style != "stage2") throw ValidationError("eval.style must be stage1 or stage2");
    corpus::split_from_string(eval_split);
}

}  // namespace kginject::tools
