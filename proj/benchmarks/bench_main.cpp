#include <benchmark/benchmark.h>

#include <vector>

#include "kginject/conceptformer.hpp"
#include "kginject/evaluation.hpp"
#include "kginject/rng.hpp"
#include "kginject/toy_lm.hpp"

using namespace kginject;

namespace {

Matrix<float> random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix<float> m(r, c);
    for (auto& v : m.flat()) v = static_cast<float>(rng.normal(0.0, 0.5));
    return m;
}

cf::EmbeddedSubgraph<float> random_graph(std::size_t m, std::size_t dim) {
    Rng rng(11);
    cf::EmbeddedSubgraph<float> g;
    g.C = random_matrix(1, dim, rng);
    g.N = random_matrix(m, dim, rng);
    g.E = random_matrix(m, dim, rng);
    return g;
}

lm::LMParams<float> reference_lm() { return lm::init_lm<float>(lm::LMConfig{}, 5); }

void bm_cf_forward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto m = static_cast<std::size_t>(state.range(1));
    const auto p = cf::init_params<float>(64, 64, n, 128, 0.01, 1);
    const auto g = random_graph(m, 64);
    for (auto _ : state) benchmark::DoNotOptimize(cf::forward(p, g));
}
BENCHMARK(bm_cf_forward)->Args({1, 12})->Args({5, 12})->Args({5, 100})->Args({15, 100});

void bm_cf_gradients(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto p = cf::init_params<float>(64, 64, n, 128, 0.01, 1);
    const auto g = random_graph(12, 64);
    Rng rng(3);
    const auto up = random_matrix(n, 64, rng);
    auto acc = cf::CFParams<float>::zeros(64, 64, n, 128, 0.01);
    for (auto _ : state) cf::accumulate_gradients(p, g, up, acc);
}
BENCHMARK(bm_cf_gradients)->Arg(1)->Arg(5)->Arg(15);

void bm_lm_forward(benchmark::State& state) {
    const auto lm = reference_lm();
    std::vector<lm::TokenId> ids(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<lm::TokenId>((i * 37) % 512);
    for (auto _ : state) benchmark::DoNotOptimize(lm::forward_tokens(lm, ids));
}
BENCHMARK(bm_lm_forward)->Arg(24)->Arg(128);

void bm_lm_backward(benchmark::State& state) {
    const auto lm = reference_lm();
    const lm::TransposedWeights<float> tw(lm);
    Rng rng(4);
    const auto x = random_matrix(32, 64, rng);
    const auto trace = lm::forward_trace(lm, x, 28);
    const auto dl = random_matrix(4, 512, rng);
    for (auto _ : state) benchmark::DoNotOptimize(lm::backward(lm, tw, trace, dl, nullptr, 20));
}
BENCHMARK(bm_lm_backward);

void bm_token_rank(benchmark::State& state) {
    Rng rng(8);
    std::vector<float> logits(512);
    for (auto& v : logits) v = static_cast<float>(rng.normal());
    for (auto _ : state) benchmark::DoNotOptimize(eval::token_rank<float>(logits, 100));
}
BENCHMARK(bm_token_rank);

}  // namespace
BENCHMARK_MAIN();
