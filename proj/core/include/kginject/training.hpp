#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kginject/conceptformer.hpp"
#include "kginject/prompting.hpp"
#include "kginject/toy_lm.hpp"

namespace kginject::train {

struct TrainConfig {
    double learning_rate = 6e-5;  // constant
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 10;
    std::size_t patience = 1;  // epochs without improvement before stopping
    std::uint64_t seed = 1;
    unsigned numeric_width = 32;  // only float32 training is implemented
    unsigned threads = 1;

    void validate() const;
    nlohmann::ordered_json to_json() const;
};

template <class T>
struct ObjectLoss {
    double loss = 0.0;      // mean -log p over the target tokens
    Matrix<T> input_grad;   // d loss / d prompt rows; rows before grad_row0 are zero
};

// Teacher-forced object loss: the prompt rows are followed by the embeddings
// of targets[0 .. T-2] and target t is scored at position prompt.rows() - 1 + t.
// Throws ValidationError when the sequence exceeds the context.
template <class T>
ObjectLoss<T> object_loss(const lm::LMParams<T>& lm, const lm::TransposedWeights<T>* tw, const Matrix<T>& prompt,
                          std::span<const lm::TokenId> targets, std::size_t grad_row0);

// Loss and gradient with respect to the injected rows of an assembled cf prompt
// (soft_vectors x dim). For prompts without soft vectors the gradient is empty.
struct InjectedLoss {
    double loss = 0.0;
    Matrix<float> vector_grad;
};
InjectedLoss object_loss(const lm::LMParams<float>& lm, const prompt::AssembledPrompt& prompt);

// Stops once `patience` consecutive epochs fail to beat the best loss.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}
    // Returns true when this epoch is a new best.
    bool update(double val_loss);
    bool should_stop() const noexcept { return bad_epochs_ >= patience_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }  // 1-based, 0 before any update
    double best_loss() const noexcept { return best_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t bad_epochs_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    std::string cf_fingerprint;
};

struct TrainReport {
    std::string stage;
    std::size_t n_vectors = 0;
    std::size_t train_examples = 0;
    std::size_t val_examples = 0;
    double initial_train_loss = 0.0;
    double initial_val_loss = 0.0;
    std::vector<EpochMetrics> epochs;
    std::size_t best_epoch = 0;
    std::string stop_reason;
    std::string lm_fingerprint_before;
    std::string lm_fingerprint_after;
    std::string initial_cf_fingerprint;
    std::string final_cf_fingerprint;
    TrainConfig config;

    nlohmann::ordered_json to_json() const;
};

struct StageResult {
    cf::CFParams<float> params;
    TrainReport report;
};

// Mean object loss over plans using the given ConceptFormer.
double mean_loss(const cf::CFParams<float>& cf, const lm::LMParams<float>& lm,
                 const std::vector<prompt::InjectionPlan>& plans, unsigned threads);

// Mini-batch AdamW on the ConceptFormer only. The best-validation parameters
// are returned. Throws Error naming the batch on a non-finite loss and
// IntegrityError if the LM fingerprint changes.
StageResult train_stage(const cf::CFParams<float>& init, const lm::LMParams<float>& lm,
                        const std::vector<prompt::InjectionPlan>& train_set,
                        const std::vector<prompt::InjectionPlan>& val_set, const TrainConfig& config,
                        const std::string& stage_label);

struct TwoStageData {
    std::vector<prompt::InjectionPlan> stage1_train, stage1_val;
    std::vector<prompt::InjectionPlan> stage2_train, stage2_val;
};

struct TwoStageResult {
    cf::CFParams<float> stage1_params;
    cf::CFParams<float> params;
    std::optional<TrainReport> stage1;  // empty when stage 1 was skipped
    TrainReport stage2;

    nlohmann::ordered_json to_json() const;
};

// Stage 1 output initializes stage 2. skip_stage1 trains stage 2 from `init`.
TwoStageResult run_two_stage(const cf::CFParams<float>& init, const lm::LMParams<float>& lm,
                             const TwoStageData& data, const TrainConfig& stage1, const TrainConfig& stage2,
                             bool skip_stage1);

// Writes cf_n{n}_stage{stage}.cfp1 and a .json provenance sidecar.
std::filesystem::path save_checkpoint(const std::filesystem::path& dir, const cf::CFParams<float>& params, int stage,
                                      const nlohmann::ordered_json& provenance);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t n, int stage);

}  // namespace kginject::train
