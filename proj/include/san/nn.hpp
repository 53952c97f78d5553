#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "san/ops.hpp"

namespace san {

enum class Mode { train, eval };

/// Flat, named view over a model's trainable parameters and state buffers.
/// Holds non-owning pointers, so collect it again after moving a model.
template <class T>
struct NamedParams {
    std::vector<std::pair<std::string, Var<T>*>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    void zero_grad() {
        for (auto& [name, p] : params) p->zero_grad();
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params) n += p->value().size();
        return n;
    }
};

namespace nn {

inline std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

template <class T>
Var<T> make_param(Tensor<T> t) {
    return Var<T>(std::move(t), true);
}

/// Convolution weights drawn from N(0, stddev). stddev <= 0 selects He scaling.
template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in, int out, int kernel, int stride, int pad, std::mt19937_64& rng, T stddev = T(0.02),
           bool bias = true)
        : stride_(stride), pad_(pad) {
        const T sd = stddev > 0 ? stddev : static_cast<T>(std::sqrt(2.0 / (in * kernel * kernel)));
        weight = make_param(randn<T>(Shape{out, in, kernel, kernel}, rng, sd));
        if (bias) this->bias = make_param(Tensor<T>(Shape{out}));
    }

    Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride_, pad_); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.params.emplace_back(join(prefix, "weight"), &weight);
        if (bias.defined()) out.params.emplace_back(join(prefix, "bias"), &bias);
    }

    Var<T> weight;
    Var<T> bias;

private:
    int stride_ = 1;
    int pad_ = 0;
};

template <class T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in, int out, int kernel, int stride, int pad, std::mt19937_64& rng, T stddev = T(0.02))
        : stride_(stride), pad_(pad) {
        weight = make_param(randn<T>(Shape{in, out, kernel, kernel}, rng, stddev));
        bias = make_param(Tensor<T>(Shape{out}));
    }

    Var<T> operator()(const Var<T>& x) const { return ops::conv_transpose2d(x, weight, bias, stride_, pad_); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.params.emplace_back(join(prefix, "weight"), &weight);
        out.params.emplace_back(join(prefix, "bias"), &bias);
    }

    Var<T> weight;
    Var<T> bias;

private:
    int stride_ = 2;
    int pad_ = 1;
};

/// Affine normalization; batch statistics or per-instance statistics.
template <class T>
class Norm {
public:
    Norm() = default;
    Norm(int channels, ops::NormKind kind) : kind_(kind) {
        gamma = make_param(Tensor<T>(Shape{channels}, T(1)));
        beta = make_param(Tensor<T>(Shape{channels}));
        stats.mean = Tensor<T>(Shape{channels});
        stats.var = Tensor<T>(Shape{channels}, T(1));
    }

    Var<T> operator()(const Var<T>& x, Mode mode) {
        if (kind_ == ops::NormKind::none) return x;
        return ops::normalize(x, gamma, beta, kind_, mode == Mode::train, &stats);
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        if (kind_ == ops::NormKind::none) return;
        out.params.emplace_back(join(prefix, "gamma"), &gamma);
        out.params.emplace_back(join(prefix, "beta"), &beta);
        if (kind_ == ops::NormKind::batch) {
            out.buffers.emplace_back(join(prefix, "running_mean"), &stats.mean);
            out.buffers.emplace_back(join(prefix, "running_var"), &stats.var);
        }
    }

    Var<T> gamma;
    Var<T> beta;
    ops::RunningStats<T> stats;

private:
    ops::NormKind kind_ = ops::NormKind::batch;
};

template <class T>
class Linear {
public:
    Linear() = default;
    Linear(int in, int out, std::mt19937_64& rng) {
        weight = make_param(randn<T>(Shape{out, in}, rng, static_cast<T>(std::sqrt(1.0 / in))));
        bias = make_param(Tensor<T>(Shape{out}));
    }

    Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        out.params.emplace_back(join(prefix, "weight"), &weight);
        out.params.emplace_back(join(prefix, "bias"), &bias);
    }

    Var<T> weight;
    Var<T> bias;
};

}  // namespace nn

inline ops::NormKind parse_norm_kind(const std::string& s) {
    if (s == "batch") return ops::NormKind::batch;
    if (s == "instance") return ops::NormKind::instance;
    if (s == "none") return ops::NormKind::none;
    throw ConfigError("unknown normalization kind '" + s + "'");
}

inline std::string to_string(ops::NormKind k) {
    switch (k) {
        case ops::NormKind::batch: return "batch";
        case ops::NormKind::instance: return "instance";
        case ops::NormKind::none: return "none";
    }
    return "batch";
}

/// Deterministic child seed for an independent stream (init, sampling, ...).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace san
