#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "kginject/binary_io.hpp"
#include "kginject/conceptformer.hpp"

namespace kginject::testing {

struct TinyCf {
    cf::CFParams<double> params;
    cf::EmbeddedSubgraph<double> graph;
    Matrix<double> expected_vectors;
    Matrix<double> expected_attention;
};

inline Matrix<double> matrix_from_json(const nlohmann::json& j) {
    Matrix<double> m(j.size(), j.at(0).size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = j.at(i).at(k).get<double>();
    return m;
}

inline TinyCf load_tiny_cf(const std::string& fixture_dir) {
    const auto j = nlohmann::json::parse(read_text_file(fixture_dir + "/tiny_cf.json"));
    TinyCf t;
    t.params = cf::CFParams<double>::zeros(j.at("dim_i"), j.at("dim_o"), j.at("n"), j.at("hidden"), j.at("slope"));
    for (std::size_t b = 0; b < t.params.n(); ++b) {
        const auto& blk = j.at("blocks").at(b);
        t.params.wq[b] = matrix_from_json(blk.at("wq"));
        t.params.wk[b] = matrix_from_json(blk.at("wk"));
        t.params.wv[b] = matrix_from_json(blk.at("wv"));
        t.params.wo[b] = matrix_from_json(blk.at("wo"));
    }
    t.params.wp1 = matrix_from_json(j.at("wp1"));
    t.params.wp2 = matrix_from_json(j.at("wp2"));
    t.graph.C = matrix_from_json(j.at("C"));
    t.graph.N = matrix_from_json(j.at("N"));
    t.graph.E = matrix_from_json(j.at("E"));
    t.expected_vectors = matrix_from_json(j.at("expected_vectors"));
    t.expected_attention = matrix_from_json(j.at("expected_attention"));
    return t;
}

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Largest relative error between analytic CF gradients and central differences
// of L = sum(upstream .* forward(params, graph)). Covers every weight and C, N, E.
inline double max_cf_gradient_error(const TinyCf& t, const Matrix<double>& upstream, double step,
                                    std::string* worst = nullptr) {
    auto params = t.params;
    auto graph = t.graph;
    const auto g = cf::gradients(params, graph, upstream);
    auto loss = [&]() {
        const auto y = cf::forward(params, graph).vectors;
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * upstream.data()[i];
        return s;
    };
    double max_err = 0;
    auto probe = [&](const std::string& name, Matrix<double>& value, const Matrix<double>& grad) {
        for (std::size_t e = 0; e < value.size(); ++e) {
            const double orig = value.data()[e];
            value.data()[e] = orig + step;
            const double fp = loss();
            value.data()[e] = orig - step;
            const double fm = loss();
            value.data()[e] = orig;
            const double err = relative_error(grad.data()[e], (fp - fm) / (2 * step));
            if (err > max_err) {
                max_err = err;
                if (worst) *worst = name + "[" + std::to_string(e) + "]";
            }
        }
    };
    std::vector<std::pair<std::string, Matrix<double>*>> values;
    params.visit([&](const std::string& n, Matrix<double>& m) { values.emplace_back(n, &m); });
    std::vector<const Matrix<double>*> grads;
    g.params.visit([&](const std::string&, const Matrix<double>& m) { grads.push_back(&m); });
    for (std::size_t i = 0; i < values.size(); ++i) probe(values[i].first, *values[i].second, *grads[i]);
    probe("C", graph.C, g.dC);
    probe("N", graph.N, g.dN);
    probe("E", graph.E, g.dE);
    return max_err;
}

}  // namespace kginject::testing
