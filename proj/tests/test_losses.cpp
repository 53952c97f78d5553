#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "san/losses.hpp"

using namespace san;

namespace {
Var<double> column(std::vector<double> v) {
    return Var<double>(Tensor<double>(Shape{static_cast<int>(v.size()), 1}, v));
}
double scalar(const Var<double>& v) { return v.value()[0]; }
}  // namespace

TEST(Adversarial, HalfHalf) {
    EXPECT_NEAR(scalar(adv_loss(column({0.5}), column({0.5}))), -1.3863, 1e-4);
    EXPECT_NEAR(adv_loss(std::vector<double>{0.5}, std::vector<double>{0.5}), 2 * std::log(0.5), 1e-12);
}

TEST(Adversarial, ApproachesZeroAtDiscriminatorOptimum) {
    EXPECT_GT(scalar(adv_loss(column({0.999999}), column({1e-6}))), -1e-5);
    EXPECT_LE(scalar(adv_loss(column({0.999999}), column({1e-6}))), 0.0);
}

TEST(Adversarial, BatchMean) {
    std::vector<double> r{0.9, 0.7, 0.4, 0.55}, f{0.1, 0.3, 0.6, 0.2};
    double oracle = 0;
    for (std::size_t i = 0; i < r.size(); ++i) oracle += std::log(r[i]) / 4 + std::log(1 - f[i]) / 4;
    EXPECT_NEAR(scalar(adv_loss(column(r), column(f))), oracle, 1e-12);
    EXPECT_NEAR(adv_loss(r, f), oracle, 1e-12);
}

TEST(Adversarial, ClampedAtBoundaryStaysFinite) {
    const long before = adversarial_clamp_events();
    double v = scalar(adv_loss(column({0.0}), column({1.0})));
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 2 * std::log(1e-7), 1e-9);
    EXPECT_GT(adversarial_clamp_events(), before);
}

TEST(Adversarial, DiscriminatorLossMatchesNegativeAdvWithHardLabels) {
    auto r = column({0.8, 0.6}), f = column({0.3, 0.1});
    EXPECT_NEAR(scalar(discriminator_loss(r, f, 1.0, 0.0)), -scalar(adv_loss(r, f)), 1e-12);
    // Smoothed targets: BCE(p, 0.9) + BCE(q, 0.1) by hand.
    double oracle = 0;
    for (double p : {0.8, 0.6}) oracle += -(0.9 * std::log(p) + 0.1 * std::log(1 - p)) / 2;
    for (double q : {0.3, 0.1}) oracle += -(0.1 * std::log(q) + 0.9 * std::log(1 - q)) / 2;
    EXPECT_NEAR(scalar(discriminator_loss(r, f, 0.9, 0.1)), oracle, 1e-12);
}

TEST(Adversarial, GeneratorTermGradient) {
    std::mt19937_64 rng(1);
    Var<double> p(rand_uniform<double>(Shape{4, 1}, rng, 0.1, 0.9), true);
    std::vector<Var<double>*> in{&p};
    auto rep = san::testing::gradcheck([&] { return generator_adv_loss(p); }, in, 4);
    EXPECT_EQ(rep.passed, rep.checked);
}

TEST(L1, Examples) {
    Tensor<double> a(Shape{1, 3, 4, 4}, 0.3);
    EXPECT_EQ(scalar(l1_loss(Var<double>(a), Var<double>(a))), 0.0);
    Tensor<double> zero(Shape{1, 3, 2, 2}, 0.0), half(Shape{1, 3, 2, 2}, 0.5);
    EXPECT_DOUBLE_EQ(scalar(l1_loss(Var<double>(zero), Var<double>(half))), 0.5);
}

TEST(L1, MatchesLoopOracleAndIsSymmetric) {
    std::mt19937_64 rng(2);
    auto x = rand_uniform<double>(Shape{2, 3, 5, 4}, rng, -1, 1);
    auto y = rand_uniform<double>(Shape{2, 3, 5, 4}, rng, -1, 1);
    double acc = 0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 4; ++w) acc += std::abs(x.at(n, c, h, w) - y.at(n, c, h, w));
    acc /= 2 * 3 * 5 * 4;
    EXPECT_NEAR(scalar(l1_loss(Var<double>(x), Var<double>(y))), acc, 1e-12);
    EXPECT_NEAR(scalar(l1_loss(Var<double>(y), Var<double>(x))), acc, 1e-12);
    EXPECT_THROW(l1_loss(Var<double>(x), Var<double>(Tensor<double>(Shape{2, 3, 4, 4}))), ShapeError);
}

TEST(L1, GradientAwayFromKinks) {
    std::mt19937_64 rng(3);
    auto target = Var<double>(rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1));
    Tensor<double> g0 = target.value();
    for (auto& v : g0.vec()) v += (rng() % 2 ? 0.3 : -0.3);
    Var<double> gen(g0, true);
    std::vector<Var<double>*> in{&gen};
    auto rep = san::testing::gradcheck([&] { return l1_loss(target, gen); }, in, 20);
    EXPECT_EQ(rep.passed, rep.checked);
}

TEST(Perceptual, FeatureDistanceExamples) {
    Tensor<double> a(Shape{1, 2, 3, 3}, 0.7);
    std::vector<Var<double>> fa{Var<double>(a)};
    EXPECT_EQ(scalar(feature_distance(fa, fa)), 0.0);
    Tensor<double> b(Shape{1, 2, 3, 3}, 1.7);
    std::vector<Var<double>> fb{Var<double>(b)};
    EXPECT_DOUBLE_EQ(scalar(feature_distance(fa, fb)), 1.0);
}

TEST(Perceptual, TwoLayerOracle) {
    std::mt19937_64 rng(4);
    auto g0 = randn<double>(Shape{1, 2, 2, 2}, rng), t0 = randn<double>(Shape{1, 2, 2, 2}, rng);
    auto g1 = randn<double>(Shape{1, 3, 1, 1}, rng), t1 = randn<double>(Shape{1, 3, 1, 1}, rng);
    double l0 = 0, l1 = 0;
    for (std::size_t i = 0; i < 8; ++i) l0 += std::pow(g0[i] - t0[i], 2);
    for (std::size_t i = 0; i < 3; ++i) l1 += std::pow(g1[i] - t1[i], 2);
    double oracle = l0 / 8 + l1 / 3;
    std::vector<Var<double>> g{Var<double>(g0), Var<double>(g1)}, t{Var<double>(t0), Var<double>(t1)};
    EXPECT_NEAR(scalar(feature_distance(g, t)), oracle, 1e-12);
}

TEST(Perceptual, ExtractorLossProperties) {
    FeatureExtractor<double> fx;
    std::mt19937_64 rng(5);
    Var<double> x(rand_uniform<double>(Shape{2, 3, 16, 16}, rng, -1, 1));
    Var<double> y(rand_uniform<double>(Shape{2, 3, 16, 16}, rng, -1, 1));
    EXPECT_EQ(scalar(perceptual_loss(fx, x, x)), 0.0);
    double xy = scalar(perceptual_loss(fx, x, y));
    EXPECT_GT(xy, 0.0);
    EXPECT_NEAR(xy, scalar(perceptual_loss(fx, y, x)), 1e-12);
    FeatureExtractor<double> fx2;
    EXPECT_EQ(xy, scalar(perceptual_loss(fx2, x, y)));
    EXPECT_EQ(fx(x).size(), 3u);
}

TEST(Perceptual, GradientReachesGeneratedImageOnly) {
    FeatureExtractor<double> fx;
    std::mt19937_64 rng(6);
    Var<double> target(rand_uniform<double>(Shape{1, 3, 8, 8}, rng, -1, 1), true);
    Var<double> gen(rand_uniform<double>(Shape{1, 3, 8, 8}, rng, -1, 1), true);
    std::vector<Var<double>*> in{&gen};
    auto rep = san::testing::gradcheck([&] { return perceptual_loss(fx, target, gen); }, in, 20);
    EXPECT_GE(rep.pass_fraction(), 0.95) << rep.max_rel;
    target.zero_grad();
    backward(perceptual_loss(fx, target, gen));
    for (double v : target.grad().vec()) EXPECT_EQ(v, 0.0);
}

TEST(Full, WeightedSum) {
    LossWeights w;  // 10, 15, 5
    EXPECT_NEAR(full_loss(w, 0.1, 0.2, 0.3), 5.5, 1e-12);
    auto v = full_loss(w, column({0.1}), column({0.2}), column({0.3}));
    EXPECT_NEAR(scalar(v), 5.5, 1e-12);
    LossWeights fashion{15, 1, 5};
    EXPECT_NEAR(full_loss(fashion, 0.1, 0.2, 0.3), 1.5 + 0.2 + 1.5, 1e-12);
    LossWeights bad{-1, 1, 1};
    EXPECT_THROW(bad.validate(), ConfigError);
    LossWeights zero{0, 0, 0};
    EXPECT_THROW(zero.validate(), ConfigError);
}
