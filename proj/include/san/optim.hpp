#pragma once

#include <cmath>
#include <map>
#include <string>

#include "san/nn.hpp"

namespace san {

struct AdamConfig {
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be checkpointed and restored independently of object layout.
template <class T>
class Adam {
public:
    Adam() = default;
    Adam(NamedParams<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, p] : params_.params) {
            m_.emplace(name, Tensor<T>(p->shape()));
            v_.emplace(name, Tensor<T>(p->shape()));
        }
    }

    void zero_grad() { params_.zero_grad(); }

    void step(double lr) {
        ++t_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (auto& [name, p] : params_.params) {
            const Tensor<T>& g = p->grad();
            if (g.empty()) continue;  // untouched this step
            Tensor<T>& m = m_.at(name);
            Tensor<T>& v = v_.at(name);
            Tensor<T>& w = p->mutable_value();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i];
                m[i] = static_cast<T>(b1 * m[i] + (1 - b1) * gi);
                v[i] = static_cast<T>(b2 * v[i] + (1 - b2) * gi * gi);
                const double mh = m[i] / c1, vh = v[i] / c2;
                w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + cfg_.eps));
            }
        }
    }

    long steps() const { return t_; }
    void set_steps(long t) { t_ = t; }
    std::map<std::string, Tensor<T>>& first_moments() { return m_; }
    std::map<std::string, Tensor<T>>& second_moments() { return v_; }
    const NamedParams<T>& params() const { return params_; }

private:
    NamedParams<T> params_;
    AdamConfig cfg_;
    std::map<std::string, Tensor<T>> m_, v_;
    long t_ = 0;
};

}  // namespace san
