#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "san/log.hpp"
#include "san/nn.hpp"

namespace san {

inline constexpr double kLogEpsilon = 1e-7;

/// Weights of the adversarial, pixel and perceptual terms.
struct LossWeights {
    double alpha = 10.0;
    double beta = 15.0;
    double gamma = 5.0;

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("loss weights must be nonnegative");
        if (alpha == 0 && beta == 0 && gamma == 0) throw ConfigError("at least one loss weight must be positive");
    }
};

struct ExtractorConfig {
    std::vector<int> channels{8, 16, 32};
    std::vector<int> layers{0, 1, 2};  // which activations feed the distance
    std::uint64_t seed = 1234;
};

/// Frozen random convolutional pyramid (3×3, stride 2, LeakyReLU). Stands in
/// for a pretrained backbone; parameters are fixed at construction.
template <class T>
class FeatureExtractor {
public:
    explicit FeatureExtractor(ExtractorConfig cfg = {}) : cfg_(std::move(cfg)) {
        if (cfg_.channels.empty()) throw ConfigError("extractor needs at least one layer");
        for (int l : cfg_.layers)
            if (l < 0 || l >= static_cast<int>(cfg_.channels.size()))
                throw ConfigError("extractor layer index " + std::to_string(l) + " out of range");
        std::mt19937_64 rng(derive_seed(cfg_.seed, 3));
        int in = 3;
        for (int out : cfg_.channels) {
            nn::Conv2d<T> conv(in, out, 3, 2, 1, rng, T(0));
            // Frozen: plain constants, so gradients only reach the image.
            conv.weight = Var<T>(conv.weight.value(), false);
            conv.bias = Var<T>(conv.bias.value(), false);
            convs_.push_back(std::move(conv));
            in = out;
        }
    }

    const ExtractorConfig& config() const { return cfg_; }
    const nn::Conv2d<T>& layer(std::size_t i) const { return convs_.at(i); }

    /// Activations of the configured layers, in layer order.
    std::vector<Var<T>> operator()(const Var<T>& image) const {
        const Shape& s = image.shape();
        const int f = 1 << convs_.size();
        if (s.rank() != 4 || s.c() != 3 || s.h() < f || s.w() < f)
            throw ShapeError("extractor cannot take " + s.str());
        std::vector<Var<T>> all;
        Var<T> h = image;
        for (const auto& conv : convs_) {
            h = ops::leaky_relu(conv(h), T(0.2));
            all.push_back(h);
        }
        std::vector<Var<T>> picked;
        for (int l : cfg_.layers) picked.push_back(all[static_cast<std::size_t>(l)]);
        return picked;
    }

private:
    ExtractorConfig cfg_;
    std::vector<nn::Conv2d<T>> convs_;
};

namespace detail {
inline std::atomic<long>& clamp_events() {
    static std::atomic<long> n{0};
    return n;
}
template <class T>
void note_clamps(const Tensor<T>& p) {
    for (T v : p.vec())
        if (v <= T(kLogEpsilon) || v >= T(1) - T(kLogEpsilon)) {
            if (clamp_events()++ == 0)
                log_warning("discriminator probability at the boundary; clamping log arguments by 1e-7");
            return;
        }
}
}  // namespace detail

/// Number of adversarial evaluations that hit the log clamp so far.
inline long adversarial_clamp_events() { return detail::clamp_events(); }

/// mean log D_real + mean log(1 - D_fake); the quantity the discriminator ascends.
template <class T>
Var<T> adv_loss(const Var<T>& d_real, const Var<T>& d_fake) {
    detail::note_clamps(d_real.value());
    detail::note_clamps(d_fake.value());
    const T eps = static_cast<T>(kLogEpsilon);
    return ops::add(ops::mean(ops::log_clamped(d_real, eps)), ops::mean(ops::log_clamped(ops::one_minus(d_fake), eps)));
}

/// Plain-number form of adv_loss over per-sample probabilities.
inline double adv_loss(const std::vector<double>& d_real, const std::vector<double>& d_fake) {
    auto mean_log = [](const std::vector<double>& v, bool complement) {
        double acc = 0;
        for (double p : v) acc += std::log(std::clamp(complement ? 1.0 - p : p, kLogEpsilon, 1.0 - kLogEpsilon));
        return acc / static_cast<double>(v.size());
    };
    return mean_log(d_real, false) + mean_log(d_fake, true);
}

/// Non-saturating generator term: -mean log D_fake.
template <class T>
Var<T> generator_adv_loss(const Var<T>& d_fake) {
    detail::note_clamps(d_fake.value());
    return ops::scale(ops::mean(ops::log_clamped(d_fake, static_cast<T>(kLogEpsilon))), T(-1));
}

/// Binary cross-entropy the discriminator minimizes. With soft targets
/// (real_target, fake_target) = (1, 0) this is exactly -adv_loss.
template <class T>
Var<T> discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake, T real_target, T fake_target) {
    const T eps = static_cast<T>(kLogEpsilon);
    auto bce = [&](const Var<T>& p, T target) {
        auto pos = ops::mean(ops::log_clamped(p, eps));
        auto neg = ops::mean(ops::log_clamped(ops::one_minus(p), eps));
        return ops::weighted_sum<T>({pos, neg}, {-target, -(T(1) - target)});
    };
    return ops::add(bce(d_real, real_target), bce(d_fake, fake_target));
}

/// Mean absolute pixel difference.
template <class T>
Var<T> l1_loss(const Var<T>& target, const Var<T>& generated) {
    return ops::mean_abs_diff(generated, target);
}

/// Sum over layers of the per-element mean squared feature difference.
template <class T>
Var<T> feature_distance(const std::vector<Var<T>>& generated, const std::vector<Var<T>>& target) {
    if (generated.size() != target.size() || generated.empty()) throw ShapeError("feature layer count mismatch");
    std::vector<Var<T>> terms;
    for (std::size_t i = 0; i < generated.size(); ++i) terms.push_back(ops::mean_sq_diff(generated[i], target[i]));
    return ops::weighted_sum<T>(terms, std::vector<T>(terms.size(), T(1)));
}

template <class T>
Var<T> perceptual_loss(const FeatureExtractor<T>& extractor, const Var<T>& target, const Var<T>& generated) {
    require_same_shape(target.shape(), generated.shape(), "perceptual_loss");
    return feature_distance(extractor(generated), extractor(target.detach()));
}

template <class T>
Var<T> full_loss(const LossWeights& w, const Var<T>& adv, const Var<T>& l1, const Var<T>& perc) {
    return ops::weighted_sum<T>({adv, l1, perc},
                                {static_cast<T>(w.alpha), static_cast<T>(w.beta), static_cast<T>(w.gamma)});
}

inline double full_loss(const LossWeights& w, double adv, double l1, double perc) {
    return w.alpha * adv + w.beta * l1 + w.gamma * perc;
}

}  // namespace san
