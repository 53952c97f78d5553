#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "san/nn.hpp"

namespace san {

struct GeneratorConfig {
    int sab_blocks = 5;
    int base_channels = 64;
    int down_stages = 2;       // encoder stride-2 convolutions
    int label_count = 20;
    int image_height = 128;
    int image_width = 64;
    double leaky_slope = 0.2;
    ops::NormKind norm = ops::NormKind::batch;
    std::uint64_t seed = 0;

    static constexpr int content_stages = 3;

    /// Total spatial reduction from image to the deepest content stage.
    int total_downsampling() const { return 1 << (down_stages + content_stages); }

    void validate() const {
        if (sab_blocks < 1) throw ConfigError("sab_blocks must be >= 1");
        if (base_channels < 1 || label_count < 1 || down_stages < 1) throw ConfigError("generator sizes must be positive");
        const int f = total_downsampling();
        if (image_height <= 0 || image_width <= 0 || image_height % f || image_width % f)
            throw ConfigError("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                              " must be divisible by " + std::to_string(f));
    }
};

template <class T>
using FeatureCode = Var<T>;

/// Conv → Norm → LeakyReLU stack.
template <class T>
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(int in, int out, int kernel, int stride, ops::NormKind norm, T slope, std::mt19937_64& rng)
        : conv_(in, out, kernel, stride, kernel / 2, rng), norm_(out, norm), slope_(slope) {}

    Var<T> operator()(const Var<T>& x, Mode mode) { return ops::leaky_relu(norm_(conv_(x), mode), slope_); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        conv_.collect(nn::join(prefix, "conv"), out);
        norm_.collect(nn::join(prefix, "norm"), out);
    }

private:
    nn::Conv2d<T> conv_;
    nn::Norm<T> norm_;
    T slope_ = T(0.2);
};

/// 7×7 then two 3×3 convolutions over depth-stacked inputs. The 3×3 layers
/// each halve the resolution when `down_stages` is 2.
template <class T>
class PathwayEncoder {
public:
    PathwayEncoder() = default;
    PathwayEncoder(int in_channels, const GeneratorConfig& cfg, std::mt19937_64& rng) {
        const T slope = static_cast<T>(cfg.leaky_slope);
        const int c = cfg.base_channels;
        layers_.emplace_back(in_channels, c, 7, 1, cfg.norm, slope, rng);
        for (int i = 0; i < 2; ++i) layers_.emplace_back(c, c, 3, i < cfg.down_stages ? 2 : 1, cfg.norm, slope, rng);
        for (int i = 2; i < cfg.down_stages; ++i) layers_.emplace_back(c, c, 3, 2, cfg.norm, slope, rng);
    }

    Var<T> operator()(Var<T> x, Mode mode) {
        for (auto& l : layers_) x = l(x, mode);
        return x;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(nn::join(prefix, std::to_string(i)), out);
    }

private:
    std::vector<ConvBlock<T>> layers_;
};

/// One semantic attention block: a sigmoid gate computed from the semantic
/// code selects what of the semantic code is added to the appearance code;
/// the semantic code is then refreshed from both.
template <class T>
class SemanticAttentionBlock {
public:
    SemanticAttentionBlock() = default;
    SemanticAttentionBlock(int channels, ops::NormKind norm, T slope, std::mt19937_64& rng)
        : mask_conv0_(channels, channels, 3, 1, 1, rng),
          mask_norm0_(channels, norm),
          mask_conv1_(channels, channels, 3, 1, 1, rng),
          mask_norm1_(channels, norm),
          mask_conv2_(channels, channels, 3, 1, 1, rng),
          update_(2 * channels, channels, 3, 1, norm, slope, rng),
          slope_(slope) {}

    /// Pre-sigmoid attention scores.
    Var<T> attention_logits(const FeatureCode<T>& semantic_prev, Mode mode) {
        auto h = ops::leaky_relu(mask_norm0_(mask_conv0_(semantic_prev), mode), slope_);
        h = ops::leaky_relu(mask_norm1_(mask_conv1_(h), mode), slope_);
        return mask_conv2_(h);
    }

    Var<T> attention_mask(const FeatureCode<T>& semantic_prev, Mode mode) {
        return ops::sigmoid(attention_logits(semantic_prev, mode));
    }

    /// Code update for a given gate. Returns (appearance, semantic).
    std::pair<FeatureCode<T>, FeatureCode<T>> update(const FeatureCode<T>& appearance_prev,
                                                     const FeatureCode<T>& semantic_prev, const Var<T>& mask,
                                                     Mode mode) {
        require_same_shape(appearance_prev.shape(), semantic_prev.shape(), "attention block codes");
        require_same_shape(mask.shape(), semantic_prev.shape(), "attention mask");
        auto appearance = ops::add(ops::mul(mask, semantic_prev), appearance_prev);
        auto semantic = update_(ops::concat_channels<T>({semantic_prev, appearance}), mode);
        return {appearance, semantic};
    }

    std::pair<FeatureCode<T>, FeatureCode<T>> operator()(const FeatureCode<T>& appearance_prev,
                                                         const FeatureCode<T>& semantic_prev, Mode mode) {
        require_same_shape(appearance_prev.shape(), semantic_prev.shape(), "attention block codes");
        return update(appearance_prev, semantic_prev, attention_mask(semantic_prev, mode), mode);
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        mask_conv0_.collect(nn::join(prefix, "mask_conv0"), out);
        mask_norm0_.collect(nn::join(prefix, "mask_norm0"), out);
        mask_conv1_.collect(nn::join(prefix, "mask_conv1"), out);
        mask_norm1_.collect(nn::join(prefix, "mask_norm1"), out);
        mask_conv2_.collect(nn::join(prefix, "mask_conv2"), out);
        update_.collect(nn::join(prefix, "update"), out);
    }

private:
    nn::Conv2d<T> mask_conv0_;
    nn::Norm<T> mask_norm0_;
    nn::Conv2d<T> mask_conv1_;
    nn::Norm<T> mask_norm1_;
    nn::Conv2d<T> mask_conv2_;
    ConvBlock<T> update_;
    T slope_ = T(0.2);
};

/// Three stride-2 stages (conv → LeakyReLU → norm); every stage output is kept
/// for the decoder skips.
template <class T>
class ContentNet {
public:
    ContentNet() = default;
    ContentNet(int in_channels, const GeneratorConfig& cfg, std::mt19937_64& rng) : slope_(static_cast<T>(cfg.leaky_slope)) {
        int in = in_channels;
        for (int out : stage_channels(cfg)) {
            convs_.emplace_back(in, out, 3, 2, 1, rng);
            norms_.emplace_back(out, cfg.norm);
            in = out;
        }
    }

    static std::vector<int> stage_channels(const GeneratorConfig& cfg) {
        const int c = cfg.base_channels;
        return {2 * c, 4 * c, 4 * c};
    }

    std::vector<Var<T>> operator()(Var<T> x, Mode mode) {
        if (x.shape().h() % 8 || x.shape().w() % 8)
            throw ShapeError("content network needs spatial size divisible by 8, got " + x.shape().str());
        std::vector<Var<T>> stages;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            x = norms_[i](ops::leaky_relu(convs_[i](x), slope_), mode);
            stages.push_back(x);
        }
        return stages;
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect(nn::join(prefix, "stage" + std::to_string(i) + ".conv"), out);
            norms_[i].collect(nn::join(prefix, "stage" + std::to_string(i) + ".norm"), out);
        }
    }

private:
    std::vector<nn::Conv2d<T>> convs_;
    std::vector<nn::Norm<T>> norms_;
    T slope_ = T(0.2);
};

/// U-Net style decoder over stage lists ordered shallow to deep: the final
/// attention-block codes first, then the three content stages. Starting from
/// the deepest pair, each transposed convolution doubles the resolution;
/// wherever a stage of matching size exists, the appearance and semantic
/// stages are concatenated onto the running feature first.
template <class T>
class Decoder {
public:
    Decoder() = default;
    Decoder(const GeneratorConfig& cfg, std::mt19937_64& rng) : slope_(static_cast<T>(cfg.leaky_slope)) {
        const auto st = ContentNet<T>::stage_channels(cfg);
        const int c = cfg.base_channels;
        // Deepest: concat(A3, S3) → st[1]; concat(up, A2, S2) → st[0];
        // concat(up, A1, S1) → c; concat(up, A0, S0) → c at the code
        // resolution; then plain up-sampling to full size.
        std::vector<std::pair<int, int>> io{{2 * st[2], st[1]}, {3 * st[1], st[0]}, {3 * st[0], c}, {3 * c, c}};
        for (int i = 1; i < cfg.down_stages; ++i) io.emplace_back(c, c);
        for (auto [in, out] : io) {
            deconvs_.emplace_back(in, out, 4, 2, 1, rng);
            norms_.emplace_back(out, cfg.norm);
        }
        to_rgb_ = nn::Conv2d<T>(c, 3, 3, 1, 1, rng);
    }

    static constexpr std::size_t kStages = GeneratorConfig::content_stages + 1;

    int transposed_layers() const { return static_cast<int>(deconvs_.size()); }

    Var<T> operator()(const std::vector<Var<T>>& appearance, const std::vector<Var<T>>& semantic, Mode mode) {
        if (appearance.size() != kStages || semantic.size() != kStages)
            throw ShapeError("decoder needs " + std::to_string(kStages) + " appearance and semantic stages");
        for (std::size_t i = 0; i < appearance.size(); ++i)
            require_same_shape(appearance[i].shape(), semantic[i].shape(), "decoder stage");
        const std::size_t deepest = appearance.size() - 1;
        Var<T> h = ops::concat_channels<T>({appearance[deepest], semantic[deepest]});
        for (std::size_t i = 0; i < deconvs_.size(); ++i) {
            if (i > 0 && i <= deepest) {
                const std::size_t s = deepest - i;
                h = ops::concat_channels<T>({h, appearance[s], semantic[s]});
            }
            h = ops::leaky_relu(norms_[i](deconvs_[i](h), mode), slope_);
        }
        return ops::tanh(to_rgb_(h));
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        for (std::size_t i = 0; i < deconvs_.size(); ++i) {
            deconvs_[i].collect(nn::join(prefix, "up" + std::to_string(i) + ".deconv"), out);
            norms_[i].collect(nn::join(prefix, "up" + std::to_string(i) + ".norm"), out);
        }
        to_rgb_.collect(nn::join(prefix, "to_rgb"), out);
    }

private:
    std::vector<nn::ConvTranspose2d<T>> deconvs_;
    std::vector<nn::Norm<T>> norms_;
    nn::Conv2d<T> to_rgb_;
    T slope_ = T(0.2);
};

/// Pose-transfer generator. All inputs are NCHW batches: images N×3×H×W,
/// masks N×1×H×W, semantic maps N×L×H×W.
template <class T>
class SanGenerator {
public:
    enum class Pathway { appearance, semantic };

    explicit SanGenerator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(derive_seed(cfg_.seed, 1));
        const T slope = static_cast<T>(cfg_.leaky_slope);
        enc_appearance_ = PathwayEncoder<T>(3 + 1 + cfg_.label_count, cfg_, rng);
        enc_semantic_ = PathwayEncoder<T>(1 + cfg_.label_count, cfg_, rng);
        for (int t = 0; t < cfg_.sab_blocks; ++t) blocks_.emplace_back(cfg_.base_channels, cfg_.norm, slope, rng);
        content_appearance_ = ContentNet<T>(cfg_.base_channels, cfg_, rng);
        content_semantic_ = ContentNet<T>(cfg_.base_channels, cfg_, rng);
        decoder_ = Decoder<T>(cfg_, rng);
    }

    const GeneratorConfig& config() const { return cfg_; }

    FeatureCode<T> encode_appearance(const Var<T>& image, const Var<T>& mask, const Var<T>& semantic, Mode mode) {
        check_inputs(image, 3, "source image");
        check_inputs(mask, 1, "source mask");
        check_inputs(semantic, cfg_.label_count, "source semantic map");
        return enc_appearance_(ops::concat_channels<T>({image, mask, semantic}), mode);
    }

    FeatureCode<T> encode_semantic(const Var<T>& mask, const Var<T>& semantic, Mode mode) {
        check_inputs(mask, 1, "target mask");
        check_inputs(semantic, cfg_.label_count, "target semantic map");
        return enc_semantic_(ops::concat_channels<T>({mask, semantic}), mode);
    }

    SemanticAttentionBlock<T>& block(int t) { return blocks_.at(static_cast<std::size_t>(t)); }
    int block_count() const { return static_cast<int>(blocks_.size()); }

    std::pair<FeatureCode<T>, FeatureCode<T>> sab_forward(int t, const FeatureCode<T>& appearance_prev,
                                                          const FeatureCode<T>& semantic_prev, Mode mode) {
        return block(t)(appearance_prev, semantic_prev, mode);
    }

    std::pair<FeatureCode<T>, FeatureCode<T>> run_san(FeatureCode<T> appearance, FeatureCode<T> semantic, int blocks,
                                                      Mode mode) {
        if (blocks != block_count())
            throw ConfigError("run_san asked for " + std::to_string(blocks) + " blocks, model has " +
                              std::to_string(block_count()));
        for (int t = 0; t < blocks; ++t) std::tie(appearance, semantic) = sab_forward(t, appearance, semantic, mode);
        return {appearance, semantic};
    }

    std::vector<Var<T>> content_features(const FeatureCode<T>& code, Pathway which, Mode mode) {
        return which == Pathway::appearance ? content_appearance_(code, mode) : content_semantic_(code, mode);
    }

    Var<T> decode(const std::vector<Var<T>>& appearance_stages, const std::vector<Var<T>>& semantic_stages, Mode mode) {
        return decoder_(appearance_stages, semantic_stages, mode);
    }

    /// Full pipeline. The source background is removed with its mask before
    /// encoding, so an all-ones mask keeps the background in play.
    Var<T> generate(const Var<T>& source_image, const Var<T>& source_mask, const Var<T>& source_semantic,
                    const Var<T>& target_mask, const Var<T>& target_semantic, Mode mode) {
        const Var<T> foreground = ops::mul_channel_broadcast(source_image, source_mask);
        auto appearance = encode_appearance(foreground, source_mask, source_semantic, mode);
        auto semantic = encode_semantic(target_mask, target_semantic, mode);
        std::tie(appearance, semantic) = run_san(appearance, semantic, block_count(), mode);
        auto a_stages = content_features(appearance, Pathway::appearance, mode);
        auto s_stages = content_features(semantic, Pathway::semantic, mode);
        a_stages.insert(a_stages.begin(), appearance);
        s_stages.insert(s_stages.begin(), semantic);
        return decode(a_stages, s_stages, mode);
    }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        enc_appearance_.collect(nn::join(prefix, "enc_appearance"), out);
        enc_semantic_.collect(nn::join(prefix, "enc_semantic"), out);
        for (std::size_t t = 0; t < blocks_.size(); ++t) blocks_[t].collect(nn::join(prefix, "sab" + std::to_string(t)), out);
        content_appearance_.collect(nn::join(prefix, "conv_a"), out);
        content_semantic_.collect(nn::join(prefix, "conv_s"), out);
        decoder_.collect(nn::join(prefix, "decoder"), out);
    }

    NamedParams<T> parameters(const std::string& prefix = "generator") {
        NamedParams<T> p;
        collect(prefix, p);
        return p;
    }

private:
    void check_inputs(const Var<T>& x, int channels, const char* what) const {
        const Shape& s = x.shape();
        if (s.rank() != 4 || s.c() != channels || s.h() != cfg_.image_height || s.w() != cfg_.image_width)
            throw ShapeError(std::string(what) + " " + s.str() + ", expected N x " + std::to_string(channels) + " x " +
                             std::to_string(cfg_.image_height) + " x " + std::to_string(cfg_.image_width));
    }

    GeneratorConfig cfg_;
    PathwayEncoder<T> enc_appearance_;
    PathwayEncoder<T> enc_semantic_;
    std::vector<SemanticAttentionBlock<T>> blocks_;
    ContentNet<T> content_appearance_;
    ContentNet<T> content_semantic_;
    Decoder<T> decoder_;
};

}  // namespace san
