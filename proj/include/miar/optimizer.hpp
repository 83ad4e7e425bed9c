#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "miar/params.hpp"

namespace miar {

// Adam with bias-corrected first/second moment estimates.
template <typename T>
class Adam {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    Adam(std::size_t n, double learning_rate) : lr_(learning_rate), m_(n, T(0)), v_(n, T(0)) {}

    void step(ParamSet<T>& params, const ParamSet<T>& grad) {
        ++t_;
        const T b1 = static_cast<T>(kBeta1);
        const T b2 = static_cast<T>(kBeta2);
        const T c1 = static_cast<T>(1.0 - std::pow(kBeta1, static_cast<double>(t_)));
        const T c2 = static_cast<T>(1.0 - std::pow(kBeta2, static_cast<double>(t_)));
        const T lr = static_cast<T>(lr_);
        const T eps = static_cast<T>(kEps);
        auto& p = params.values();
        const auto& g = grad.values();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m_[i] = b1 * m_[i] + (T(1) - b1) * g[i];
            v_[i] = b2 * v_[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = m_[i] / c1;
            const T vhat = v_[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    double lr_;
    std::size_t t_ = 0;
    std::vector<T> m_;
    std::vector<T> v_;
};

// Rescales grad so its global L2 norm is at most max_norm; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamSet<T>& grad, double max_norm) {
    double sq = 0.0;
    for (T g : grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-12));
        for (T& g : grad.values()) g *= s;
    }
    return norm;
}

}  // namespace miar
