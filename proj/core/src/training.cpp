#include "kginject/training.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "kginject/binary_io.hpp"
#include "kginject/error.hpp"
#include "kginject/optim.hpp"
#include "kginject/parallel.hpp"
#include "kginject/rng.hpp"
#include "kginject/seeds.hpp"

namespace kginject::train {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
    if (weight_decay < 0.0) throw ValidationError("weight decay must be >= 0");
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (max_epochs < 1) throw ValidationError("max epochs must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1 epoch");
    if (numeric_width != 32) throw ValidationError("only 32-bit training is supported");
}

nlohmann::ordered_json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"beta1", beta1},
            {"beta2", beta2},                 {"epsilon", epsilon},           {"batch_size", batch_size},
            {"max_epochs", max_epochs},       {"patience", patience},         {"seed", seed},
            {"numeric_width", numeric_width}};
}

template <class T>
ObjectLoss<T> object_loss(const lm::LMParams<T>& lm, const lm::TransposedWeights<T>* tw, const Matrix<T>& prompt,
                          std::span<const lm::TokenId> targets, std::size_t grad_row0) {
    const std::size_t P = prompt.rows(), Tn = targets.size(), d = lm.config.dim;
    if (Tn == 0) throw ValidationError("object loss needs at least one target id");
    if (P == 0) throw ValidationError("object loss needs a non-empty prompt");
    const std::size_t L = P + Tn - 1;
    if (L > lm.config.context)
        throw ValidationError("prompt plus targets exceed the context (required <= " +
                              std::to_string(lm.config.context) + ", actual " + std::to_string(L) + ")");
    Matrix<T> x(L, d);
    std::copy_n(prompt.data(), P * d, x.data());
    if (Tn > 1) {
        const auto rows = lm::embedding_rows(lm, targets.first(Tn - 1));
        std::copy_n(rows.data(), rows.size(), x.data() + P * d);
    }
    const auto tr = lm::forward_trace(lm, x, P - 1);
    const std::size_t V = lm.config.vocab_size;
    ObjectLoss<T> out;
    Matrix<T> dlogits(tw ? Tn : 0, tw ? V : 0);
    const T inv = T{1} / static_cast<T>(Tn);
    for (std::size_t t = 0; t < Tn; ++t) {
        const auto ls = lm::log_softmax<T>(tr.logits.row(t));
        const auto target = static_cast<std::size_t>(targets[t]);
        if (target >= V) throw ValidationError("target id outside vocabulary");
        out.loss -= static_cast<double>(ls[target]);
        if (tw) {
            for (std::size_t v = 0; v < V; ++v) dlogits(t, v) = std::exp(ls[v]) * inv;
            dlogits(t, target) -= inv;
        }
    }
    out.loss /= static_cast<double>(Tn);
    if (tw) out.input_grad = lm::backward(lm, *tw, tr, dlogits, nullptr, grad_row0);
    return out;
}

InjectedLoss object_loss(const lm::LMParams<float>& lm, const prompt::AssembledPrompt& p) {
    const auto rows = prompt::prompt_embeddings(p, lm);
    const std::size_t n = p.ledger.soft_vectors, d = lm.config.dim;
    if (n == 0) return {object_loss<float>(lm, nullptr, rows, p.targets, 0).loss, {}};
    const lm::TransposedWeights<float> tw(lm);
    const auto ol = object_loss<float>(lm, &tw, rows, p.targets, p.insertion_index);
    InjectedLoss out{ol.loss, Matrix<float>(n, d)};
    std::copy_n(ol.input_grad.data() + p.insertion_index * d, n * d, out.vector_grad.data());
    return out;
}

bool EarlyStopper::update(double val_loss) {
    ++epochs_;
    if (val_loss < best_) {
        best_ = val_loss;
        best_epoch_ = epochs_;
        bad_epochs_ = 0;
        return true;
    }
    ++bad_epochs_;
    return false;
}

nlohmann::ordered_json TrainReport::to_json() const {
    nlohmann::ordered_json j;
    j["stage"] = stage;
    j["n_vectors"] = n_vectors;
    j["train_examples"] = train_examples;
    j["val_examples"] = val_examples;
    j["initial_train_loss"] = initial_train_loss;
    j["initial_val_loss"] = initial_val_loss;
    auto& ep = j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : epochs)
        ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"cf_fingerprint", e.cf_fingerprint}});
    j["best_epoch"] = best_epoch;
    j["stop_reason"] = stop_reason;
    j["lm_fingerprint_before"] = lm_fingerprint_before;
    j["lm_fingerprint_after"] = lm_fingerprint_after;
    j["initial_cf_fingerprint"] = initial_cf_fingerprint;
    j["final_cf_fingerprint"] = final_cf_fingerprint;
    j["config"] = config.to_json();
    return j;
}

namespace {

// Loss of one plan and, when acc is given, its ConceptFormer gradient scaled by `scale`.
double plan_loss(const cf::CFParams<float>& cf, const lm::LMParams<float>& lm, const lm::TransposedWeights<float>* tw,
                 const prompt::InjectionPlan& plan, cf::CFParams<float>* acc, float scale) {
    const auto fr = cf::forward(cf, plan.graph);
    const auto p = prompt::assemble_injected(plan, fr.vectors, lm);
    const auto ol = object_loss<float>(lm, tw, p.embeddings, plan.targets, plan.insertion_index);
    if (acc) {
        const std::size_t n = cf.n(), d = lm.config.dim;
        Matrix<float> upstream(n, d);
        const float* src = ol.input_grad.data() + plan.insertion_index * d;
        for (std::size_t i = 0; i < n * d; ++i) upstream.data()[i] = src[i] * scale;
        cf::accumulate_gradients(cf, plan.graph, upstream, *acc);
    }
    return ol.loss;
}

std::string cf_hex(const cf::CFParams<float>& p) { return to_hex(cf::fingerprint(p)); }

}  // namespace

double mean_loss(const cf::CFParams<float>& cf, const lm::LMParams<float>& lm,
                 const std::vector<prompt::InjectionPlan>& plans, unsigned threads) {
    if (plans.empty()) return 0.0;
    std::vector<double> losses(plans.size());
    parallel_for(plans.size(), threads, [&](std::size_t i) { losses[i] = plan_loss(cf, lm, nullptr, plans[i], nullptr, 0.0f); });
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(plans.size());
}

StageResult train_stage(const cf::CFParams<float>& init, const lm::LMParams<float>& lm,
                        const std::vector<prompt::InjectionPlan>& train_set,
                        const std::vector<prompt::InjectionPlan>& val_set, const TrainConfig& config,
                        const std::string& stage_label) {
    config.validate();
    if (train_set.empty()) throw ValidationError("training set for " + stage_label + " is empty");
    if (val_set.empty()) throw ValidationError("validation set for " + stage_label + " is empty");
    if (init.dim_o != lm.config.dim)
        throw ValidationError("ConceptFormer output width " + std::to_string(init.dim_o) + " does not match LM dim " +
                              std::to_string(lm.config.dim));

    StageResult result{init, {}};
    auto& report = result.report;
    report.stage = stage_label;
    report.n_vectors = init.n();
    report.train_examples = train_set.size();
    report.val_examples = val_set.size();
    report.config = config;
    report.lm_fingerprint_before = to_hex(lm::fingerprint(lm));
    report.initial_cf_fingerprint = cf_hex(init);

    auto& params = result.params;
    report.initial_train_loss = mean_loss(params, lm, train_set, config.threads);
    report.initial_val_loss = mean_loss(params, lm, val_set, config.threads);
    spdlog::info("{}: n={} train={} val={} initial train loss {:.4f} val loss {:.4f}", stage_label, init.n(),
                 train_set.size(), val_set.size(), report.initial_train_loss, report.initial_val_loss);

    std::vector<AdamW<float>::Slot> slots;
    params.visit([&](const std::string&, Matrix<float>& m) { slots.push_back({m.flat(), true}); });
    AdamW<float> opt(std::move(slots), {config.learning_rate, config.weight_decay, config.beta1, config.beta2,
                                        config.epsilon});

    const lm::TransposedWeights<float> tw(lm);
    const std::size_t B = config.batch_size;
    const auto zero = cf::CFParams<float>::zeros(init.dim_i, init.dim_o, init.n(), init.hidden, init.slope);
    std::vector<cf::CFParams<float>> slot_grads(std::min(B, train_set.size()), zero);
    std::vector<double> slot_loss(slot_grads.size());
    auto total = zero;
    EarlyStopper stopper(config.patience);
    auto best = params;
    report.stop_reason = "max_epochs";

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(config.seed, epoch));
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += B) {
            const std::size_t nb = std::min(B, order.size() - start);
            const float scale = 1.0f / static_cast<float>(nb);
            parallel_for(nb, config.threads, [&](std::size_t i) {
                auto& g = slot_grads[i];
                g.visit([](const std::string&, Matrix<float>& m) { m.fill(0.0f); });
                slot_loss[i] = plan_loss(params, lm, &tw, train_set[order[start + i]], &g, scale);
            });
            total.visit([](const std::string&, Matrix<float>& m) { m.fill(0.0f); });
            std::vector<Matrix<float>*> dst;
            total.visit([&](const std::string&, Matrix<float>& m) { dst.push_back(&m); });
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < nb; ++i) {
                batch_loss += slot_loss[i];
                std::size_t k = 0;
                slot_grads[i].visit([&](const std::string&, const Matrix<float>& m) {
                    float* o = dst[k++]->data();
                    for (std::size_t e = 0; e < m.size(); ++e) o[e] += m.data()[e];
                });
            }
            batch_loss /= static_cast<double>(nb);
            if (!std::isfinite(batch_loss)) {
                std::ostringstream msg;
                msg << stage_label << ": non-finite loss in epoch " << epoch << "; batch:";
                for (std::size_t i = 0; i < nb; ++i)
                    msg << ' ' << order[start + i] << '(' << train_set[order[start + i]].center_qid << ')';
                throw Error(msg.str());
            }
            epoch_loss += batch_loss * static_cast<double>(nb);
            std::vector<std::span<const float>> grads;
            for (auto* m : dst) grads.emplace_back(m->flat());
            opt.step(grads, config.learning_rate);
        }
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = epoch_loss / static_cast<double>(train_set.size());
        em.val_loss = mean_loss(params, lm, val_set, config.threads);
        em.cf_fingerprint = cf_hex(params);
        report.epochs.push_back(em);
        spdlog::info("{}: epoch {} train loss {:.4f} val loss {:.4f}", stage_label, epoch, em.train_loss, em.val_loss);
        if (!std::isfinite(em.val_loss)) throw Error(stage_label + ": non-finite validation loss in epoch " + std::to_string(epoch));
        if (stopper.update(em.val_loss)) best = params;
        if (stopper.should_stop()) {
            report.stop_reason = "early_stop";
            break;
        }
    }
    params = best;
    report.best_epoch = stopper.best_epoch();
    report.final_cf_fingerprint = cf_hex(params);
    report.lm_fingerprint_after = to_hex(lm::fingerprint(lm));
    if (report.lm_fingerprint_after != report.lm_fingerprint_before)
        throw IntegrityError("LM fingerprint changed during " + stage_label + " (expected " +
                             report.lm_fingerprint_before + ", got " + report.lm_fingerprint_after + ")");
    return result;
}

nlohmann::ordered_json TwoStageResult::to_json() const {
    nlohmann::ordered_json j;
    j["stage1_skipped"] = !stage1.has_value();
    j["stage1"] = stage1 ? stage1->to_json() : nlohmann::ordered_json();
    j["stage2"] = stage2.to_json();
    return j;
}

TwoStageResult run_two_stage(const cf::CFParams<float>& init, const lm::LMParams<float>& lm,
                             const TwoStageData& data, const TrainConfig& stage1, const TrainConfig& stage2,
                             bool skip_stage1) {
    TwoStageResult out{init, init, std::nullopt, {}};
    if (!skip_stage1) {
        auto r1 = train_stage(init, lm, data.stage1_train, data.stage1_val, stage1, "stage1");
        out.stage1_params = r1.params;
        out.stage1 = std::move(r1.report);
    }
    auto r2 = train_stage(out.stage1_params, lm, data.stage2_train, data.stage2_val, stage2,
                          skip_stage1 ? "stage2 (stage 1 skipped)" : "stage2");
    out.params = std::move(r2.params);
    out.stage2 = std::move(r2.report);
    return out;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t n, int stage) {
    return dir / ("cf_n" + std::to_string(n) + "_stage" + std::to_string(stage) + ".cfp1");
}

std::filesystem::path save_checkpoint(const std::filesystem::path& dir, const cf::CFParams<float>& params, int stage,
                                      const nlohmann::ordered_json& provenance) {
    const auto path = checkpoint_path(dir, params.n(), stage);
    const auto bytes = cf::serialize(params);
    write_file_bytes(path, bytes);
    auto side = provenance;
    side["checkpoint"] = path.filename().string();
    side["cf_fingerprint"] = to_hex(sha256(bytes));
    auto sidecar = path;
    sidecar.replace_extension(".json");
    write_text_file(sidecar, side.dump(2) + "\n");
    return path;
}

template ObjectLoss<float> object_loss<float>(const lm::LMParams<float>&, const lm::TransposedWeights<float>*,
                                              const Matrix<float>&, std::span<const lm::TokenId>, std::size_t);
template ObjectLoss<double> object_loss<double>(const lm::LMParams<double>&, const lm::TransposedWeights<double>*,
                                                const Matrix<double>&, std::span<const lm::TokenId>, std::size_t);

}  // namespace kginject::train
