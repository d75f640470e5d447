#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "kginject/hashing.hpp"
#include "kginject/tensor.hpp"
#include "kginject/tokenizer.hpp"

namespace kginject::lm {

struct LMConfig {
    std::size_t vocab_size = 512;
    std::size_t dim = 64;  // input-embedding width seen by injected vectors
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t context = 128;
    std::size_t ff = 256;

    void validate() const;
    std::size_t head_dim() const noexcept { return dim / heads; }
    bool operator==(const LMConfig&) const = default;
};

template <class T>
struct LayerWeights {
    Matrix<T> ln1_g, ln1_b;    // 1 x d
    Matrix<T> w_qkv, b_qkv;    // d x 3d, 1 x 3d
    Matrix<T> w_proj, b_proj;  // d x d, 1 x d
    Matrix<T> ln2_g, ln2_b;    // 1 x d
    Matrix<T> w_fc, b_fc;      // d x ff, 1 x ff
    Matrix<T> w_out, b_out;    // ff x d, 1 x d
};

// Pre-normalization GPT-style decoder with learned positions and an untied
// output head.
template <class T>
struct LMParams {
    LMConfig config;
    Matrix<T> tok_emb;  // vocab x d
    Matrix<T> pos_emb;  // context x d
    std::vector<LayerWeights<T>> layers;
    Matrix<T> lnf_g, lnf_b;
    Matrix<T> head;  // d x vocab

    // Allocates every tensor with its declared shape, filled with zeros.
    static LMParams zeros(const LMConfig& config);

    // Visits tensors in canonical (serialization) order.
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t parameter_count() const;

private:
    template <class Self, class F>
    static void visit_impl(Self& p, F& f) {
        f("tok_emb", p.tok_emb);
        f("pos_emb", p.pos_emb);
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            auto& w = p.layers[l];
            const std::string pre = "layers." + std::to_string(l) + ".";
            f(pre + "ln1_g", w.ln1_g);
            f(pre + "ln1_b", w.ln1_b);
            f(pre + "w_qkv", w.w_qkv);
            f(pre + "b_qkv", w.b_qkv);
            f(pre + "w_proj", w.w_proj);
            f(pre + "b_proj", w.b_proj);
            f(pre + "ln2_g", w.ln2_g);
            f(pre + "ln2_b", w.ln2_b);
            f(pre + "w_fc", w.w_fc);
            f(pre + "b_fc", w.b_fc);
            f(pre + "w_out", w.w_out);
            f(pre + "b_out", w.b_out);
        }
        f(std::string("lnf_g"), p.lnf_g);
        f(std::string("lnf_b"), p.lnf_b);
        f(std::string("head"), p.head);
    }
};

// Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2 * layers),
// unit layer-norm gains, zero biases.
template <class T>
LMParams<T> init_lm(const LMConfig& config, std::uint64_t seed);

template <class T>
LMParams<T> cast_params(const LMParams<double>& p);
template <class T>
LMParams<T> cast_params(const LMParams<float>& p);

template <class T>
struct LMOutput {
    Matrix<T> logits;  // len x vocab
    Matrix<T> hidden;  // len x d, after the final layer norm
};

// Token-embedding rows for ids (no positional term).
template <class T>
Matrix<T> embedding_rows(const LMParams<T>& params, std::span<const TokenId> ids);

template <class T>
LMOutput<T> forward_tokens(const LMParams<T>& params, std::span<const TokenId> ids);

// Same computation as forward_tokens after the embedding lookup. Row i of
// `vectors` receives positional embedding i.
template <class T>
LMOutput<T> forward_embeddings(const LMParams<T>& params, const Matrix<T>& vectors);

// Activations kept for reverse mode.
template <class T>
struct LayerTrace {
    Matrix<T> xhat1, ln1;
    std::vector<T> rstd1;
    Matrix<T> qkv;
    Matrix<T> probs;  // (heads * len) x len, causal
    Matrix<T> att;
    Matrix<T> xhat2, ln2;
    std::vector<T> rstd2;
    Matrix<T> fc, act;
};

template <class T>
struct Trace {
    std::size_t len = 0;
    std::size_t logit_row0 = 0;
    std::vector<LayerTrace<T>> layers;
    Matrix<T> xhatf;
    std::vector<T> rstdf;
    Matrix<T> hidden;
    Matrix<T> logits;  // (len - logit_row0) x vocab
};

// Transposed weight copies used by the backward pass.
template <class T>
struct TransposedWeights {
    std::vector<Matrix<T>> qkv, proj, fc, out;
    Matrix<T> head;

    explicit TransposedWeights(const LMParams<T>& p);
};

// Forward pass recording activations. Logits are produced only for rows
// logit_row0 and later.
template <class T>
Trace<T> forward_trace(const LMParams<T>& params, const Matrix<T>& vectors, std::size_t logit_row0);

// Reverse mode through the whole network. `dlogits` has one row per logit row
// of the trace. Weight gradients are accumulated into *grads when non-null.
// Returns the gradient with respect to the input vectors; rows before
// grad_row0 are left zero and, when grads is null, are not computed at all.
template <class T>
Matrix<T> backward(const LMParams<T>& params, const TransposedWeights<T>& tw, const Trace<T>& trace,
                   const Matrix<T>& dlogits, std::type_identity_t<LMParams<T>>* grads, std::size_t grad_row0);

// Numerically stable log-softmax of one logit row.
template <class T>
std::vector<T> log_softmax(std::span<const T> logits);

// Elementwise mean of the last-layer hidden states over the label's tokens.
template <class T>
Matrix<T> embed_label(const LMParams<T>& params, const Tokenizer& tokenizer, std::string_view label);

// TLM1 container: float32, little-endian. Fingerprint is SHA-256 of the bytes.
std::vector<std::uint8_t> serialize(const LMParams<float>& params);
LMParams<float> deserialize_lm(std::span<const std::uint8_t> bytes);
void save_lm(const LMParams<float>& params, const std::filesystem::path& path);
LMParams<float> load_lm(const std::filesystem::path& path);
Digest fingerprint(const LMParams<float>& params);

struct PretrainConfig {
    std::uint64_t seed = 1;
    std::size_t epochs = 6;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;
    double min_lr_ratio = 0.1;  // cosine floor
    std::size_t warmup_steps = 100;
    double weight_decay = 0.01;
    std::size_t eval_sequences = 256;  // fixed subset used for perplexity
    unsigned threads = 1;
};

struct PretrainReport {
    double initial_perplexity = 0.0;
    double final_perplexity = 0.0;
    std::vector<double> epoch_loss;
    std::size_t sequences = 0;
    std::size_t tokens = 0;
    std::string fingerprint;
};

struct PretrainResult {
    LMParams<float> params;
    PretrainReport report;
};

// Next-token cross-entropy pretraining on pre-tokenized sequences, each no
// longer than the context. Throws Error with diagnostics if the loss diverges.
PretrainResult pretrain(const LMConfig& config, const std::vector<std::vector<TokenId>>& sequences,
                        const PretrainConfig& train);

// Mean next-token loss over the given sequences.
double mean_sequence_loss(const LMParams<float>& params, const std::vector<std::vector<TokenId>>& sequences,
                          unsigned threads);

}  // namespace kginject::lm
