#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "san/nn.hpp"

namespace san {

struct DiscriminatorConfig {
    int base_channels = 64;
    int image_height = 128;
    int image_width = 64;
    int residual_blocks = 3;
    int down_convs = 2;
    double leaky_slope = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (base_channels < 1 || residual_blocks < 1 || down_convs < 1)
            throw ConfigError("discriminator counts must be positive");
        const int f = 1 << down_convs;
        if (image_height % f || image_width % f) throw ConfigError("discriminator input not divisible by 2^down_convs");
    }
};

/// x + conv(lrelu(conv(x))). No normalization inside.
template <class T>
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(int channels, T slope, std::mt19937_64& rng)
        : conv0_(channels, channels, 3, 1, 1, rng), conv1_(channels, channels, 3, 1, 1, rng), slope_(slope) {}

    Var<T> operator()(const Var<T>& x) const {
        return ops::add(x, conv1_(ops::leaky_relu(conv0_(x), slope_)));
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        conv0_.collect(nn::join(prefix, "conv0"), out);
        conv1_.collect(nn::join(prefix, "conv1"), out);
    }

    nn::Conv2d<T>& branch_out() { return conv1_; }

private:
    nn::Conv2d<T> conv0_;
    nn::Conv2d<T> conv1_;
    T slope_ = T(0.2);
};

/// Conditional discriminator over a (reference, candidate) image pair:
/// strided convolutions, residual blocks, a one-channel score map, global
/// average pooling and a sigmoid.
template <class T>
class Discriminator {
public:
    explicit Discriminator(DiscriminatorConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(derive_seed(cfg_.seed, 2));
        int in = 6;
        int c = cfg_.base_channels;
        for (int i = 0; i < cfg_.down_convs; ++i) {
            downs_.emplace_back(in, c, 4, 2, 1, rng);
            in = c;
            if (i + 1 < cfg_.down_convs) c *= 2;
        }
        for (int i = 0; i < cfg_.residual_blocks; ++i) blocks_.emplace_back(c, static_cast<T>(cfg_.leaky_slope), rng);
        score_ = nn::Conv2d<T>(c, 1, 3, 1, 1, rng);
    }

    const DiscriminatorConfig& config() const { return cfg_; }

    /// Pre-sigmoid score, N×1.
    Var<T> logits(const Var<T>& reference, const Var<T>& candidate) {
        require_same_shape(reference.shape(), candidate.shape(), "discriminator inputs");
        if (reference.shape().rank() != 4 || reference.shape().c() != 3)
            throw ShapeError("discriminator expects N x 3 x H x W images, got " + reference.shape().str());
        Var<T> h = ops::concat_channels<T>({reference, candidate});
        const T slope = static_cast<T>(cfg_.leaky_slope);
        for (auto& d : downs_) h = ops::leaky_relu(d(h), slope);
        for (auto& b : blocks_) h = b(h);
        return ops::global_avg_pool(score_(h));
    }

    /// Probability in (0, 1) that `candidate` is a real image of the person
    /// in `reference`, N×1.
    Var<T> operator()(const Var<T>& reference, const Var<T>& candidate) {
        return ops::sigmoid(logits(reference, candidate));
    }

    ResidualBlock<T>& block(int i) { return blocks_.at(static_cast<std::size_t>(i)); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        for (std::size_t i = 0; i < downs_.size(); ++i) downs_[i].collect(nn::join(prefix, "down" + std::to_string(i)), out);
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(nn::join(prefix, "res" + std::to_string(i)), out);
        score_.collect(nn::join(prefix, "score"), out);
    }

    NamedParams<T> parameters(const std::string& prefix = "discriminator") {
        NamedParams<T> p;
        collect(prefix, p);
        return p;
    }

private:
    DiscriminatorConfig cfg_;
    std::vector<nn::Conv2d<T>> downs_;
    std::vector<ResidualBlock<T>> blocks_;
    nn::Conv2d<T> score_;
};

}  // namespace san
