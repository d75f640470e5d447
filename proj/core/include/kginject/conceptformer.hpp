#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kginject/hashing.hpp"
#include "kginject/tensor.hpp"

namespace kginject::cf {

// Center, neighbor and edge embeddings of one star subgraph.
template <class T>
struct EmbeddedSubgraph {
    Matrix<T> C;  // 1 x dim_i
    Matrix<T> N;  // m x dim_i
    Matrix<T> E;  // m x dim_i
    std::vector<std::string> neighbor_qids;  // optional, one per row of N

    std::size_t m() const noexcept { return N.rows(); }
    // Throws ValidationError on shape mismatch, m == 0 ("empty neighborhood")
    // or non-finite entries.
    void validate(std::size_t dim_i) const;
};

template <class T>
struct CFParams {
    std::size_t dim_i = 0;
    std::size_t dim_o = 0;
    std::size_t hidden = 0;
    double slope = 0.01;  // LeakyReLU negative slope
    std::vector<Matrix<T>> wq, wk, wv, wo;  // per block, dim_i x dim_i
    Matrix<T> wp1;                          // dim_i x hidden, shared
    Matrix<T> wp2;                          // hidden x dim_o, shared

    std::size_t n() const noexcept { return wq.size(); }
    static CFParams zeros(std::size_t dim_i, std::size_t dim_o, std::size_t n, std::size_t hidden, double slope);

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
        for (std::size_t b = 0; b < p.wq.size(); ++b) {
            const std::string pre = "block" + std::to_string(b) + ".";
            f(pre + "wq", p.wq[b]);
            f(pre + "wk", p.wk[b]);
            f(pre + "wv", p.wv[b]);
            f(pre + "wo", p.wo[b]);
        }
        f(std::string("wp1"), p.wp1);
        f(std::string("wp2"), p.wp2);
    }
};

// Glorot-uniform weights, each drawn in +-sqrt(6 / (fan_in + fan_out)).
template <class T>
CFParams<T> init_params(std::size_t dim_i, std::size_t dim_o, std::size_t n, std::size_t hidden, double slope,
                        std::uint64_t seed);

template <class T, class U>
CFParams<T> cast_params(const CFParams<U>& p);

template <class T>
struct ForwardResult {
    Matrix<T> vectors;    // n x dim_o
    Matrix<T> attention;  // n x m
};

// Per block: Q = C Wq, K = N Wk + E, V = N Wv,
// O = softmax(Q K^T / sqrt(dim_i)) V Wo; row = LeakyReLU(O Wp1) Wp2.
template <class T>
ForwardResult<T> forward(const CFParams<T>& params, const EmbeddedSubgraph<T>& g);

template <class T>
struct Gradients {
    CFParams<T> params;
    Matrix<T> dC, dN, dE;
};

// Reverse mode for a cotangent `upstream` of shape n x dim_o.
template <class T>
Gradients<T> gradients(const CFParams<T>& params, const EmbeddedSubgraph<T>& g, const Matrix<T>& upstream);

// Same as gradients() but accumulates weight gradients into *acc and returns
// nothing else. Used by the training loop.
template <class T>
void accumulate_gradients(const CFParams<T>& params, const EmbeddedSubgraph<T>& g, const Matrix<T>& upstream,
                          CFParams<T>& acc);

struct AttentionReport {
    std::vector<std::string> neighbor_qids;
    Matrix<double> weights;  // n x m
};

template <class T>
AttentionReport attention_report(const CFParams<T>& params, const EmbeddedSubgraph<T>& g);

struct ConceptVectors {
    std::string center_qid;
    std::string params_fingerprint;  // hex SHA-256 of the CFP1 bytes
    Matrix<float> matrix;            // n x dim_o
};

// CFP1 container: float32, little-endian.
std::vector<std::uint8_t> serialize(const CFParams<float>& params);
CFParams<float> deserialize_cf(std::span<const std::uint8_t> bytes);
void save_cf(const CFParams<float>& params, const std::filesystem::path& path);
CFParams<float> load_cf(const std::filesystem::path& path);
Digest fingerprint(const CFParams<float>& params);

ConceptVectors generate(const CFParams<float>& params, const EmbeddedSubgraph<float>& g, std::string center_qid);

}  // namespace kginject::cf
