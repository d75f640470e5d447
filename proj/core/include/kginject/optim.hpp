#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kginject/error.hpp"

namespace kginject {

struct AdamWConfig {
    double learning_rate = 6e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// AdamW with decoupled weight decay: the decay shrinks parameters directly and
// never passes through the moment estimates.
template <class T>
class AdamW {
public:
    struct Slot {
        std::span<T> param;
        bool decay = true;
    };

    AdamW(std::vector<Slot> slots, AdamWConfig config) : slots_(std::move(slots)), config_(config) {
        for (const auto& s : slots_) {
            m_.emplace_back(s.param.size(), 0.0);
            v_.emplace_back(s.param.size(), 0.0);
        }
    }

    // grads[i] must have the same length as slot i.
    void step(const std::vector<std::span<const T>>& grads, double lr) {
        if (grads.size() != slots_.size()) throw ValidationError("optimizer: gradient count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t s = 0; s < slots_.size(); ++s) {
            auto p = slots_[s].param;
            const auto g = grads[s];
            if (g.size() != p.size()) throw ValidationError("optimizer: gradient shape mismatch");
            auto& m = m_[s];
            auto& v = v_[s];
            const double decay = slots_[s].decay ? lr * config_.weight_decay : 0.0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                double pi = static_cast<double>(p[i]);
                pi -= decay * pi;
                pi -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
                p[i] = static_cast<T>(pi);
            }
        }
    }

    std::size_t steps() const noexcept { return t_; }
    const AdamWConfig& config() const noexcept { return config_; }

private:
    std::vector<Slot> slots_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

}  // namespace kginject
