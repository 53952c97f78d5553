#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "san/synth.hpp"
#include "san/trainer.hpp"
#include "temp_dir.hpp"

using namespace san;

namespace {

// Small dataset shared by the tests in this file.
struct Fixture {
    san::testing::TempDir dir{"trainer"};
    DatasetManifest train, test;
    std::vector<Sample> samples;

    Fixture() {
        SynthConfig sc;
        sc.identities = 4;
        sc.test_identities = 3;
        sc.poses = 4;
        synth_generate(sc, dir.path() / "data");
        train = load_dataset(dir.path() / "data", "train");
        test = load_dataset(dir.path() / "data", "test");
        samples = read_samples(train);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

Config small_config() {
    Config c;
    c.set("model.base_channels", "8");
    c.set("model.disc_channels", "8");
    c.set("model.sab_blocks", "2");
    c.set("train.epochs", "4");
    c.set("train.decay_start", "2");
    c.set("train.pairs_per_epoch", "8");
    c.set("train.batch", "4");
    c.set("train.eval_pairs", "6");
    c.set("train.checkpoint_every", "1");
    return c;
}

template <class T>
PairBatch<T> first_batch(std::size_t n, std::uint64_t seed = 3, bool disable_mask = false) {
    auto pairs = make_pairs(fixture().train, seed, n);
    return make_batch<T>(fixture().samples, pairs, disable_mask);
}

}  // namespace

TEST(LrSchedule, MarketEndpointsAndShape) {
    Config c;
    c.apply_preset("market");
    auto t = train_config_from(c);
    EXPECT_DOUBLE_EQ(lr_schedule(t, 0), 2e-4);
    EXPECT_DOUBLE_EQ(lr_schedule(t, 300), 2e-4);
    EXPECT_EQ(lr_schedule(t, 599), 0.0);
    double prev = lr_schedule(t, 0);
    for (int e = 1; e < 600; ++e) {
        const double lr = lr_schedule(t, e);
        EXPECT_LE(lr, prev);
        prev = lr;
    }
    EXPECT_THROW(lr_schedule(t, 600), std::out_of_range);
    EXPECT_THROW(lr_schedule(t, -1), std::out_of_range);
}

TEST(LrSchedule, DecayMidpointIsHalf) {
    auto t = train_config_from(Config{});  // 30 epochs, decay segment 15..29
    EXPECT_DOUBLE_EQ(lr_schedule(t, 22), t.lr / 2);
    EXPECT_EQ(lr_schedule(t, 29), 0.0);
}

TEST(LrSchedule, EmptyDecaySegment) {
    Config c;
    c.set("train.epochs", "5");
    c.set("train.decay_start", "9");
    auto t = train_config_from(c);
    for (int e = 0; e < 5; ++e) EXPECT_DOUBLE_EQ(lr_schedule(t, e), t.lr);
}

TEST(TrainStep, IdenticalStateGivesIdenticalRecords) {
    auto cfg = train_config_from(small_config());
    auto b = first_batch<float>(4);
    Trainer<float> a(cfg), c(cfg);
    for (int i = 0; i < 3; ++i) {
        auto ra = a.train_step(b, 1e-3);
        auto rc = c.train_step(b, 1e-3);
        EXPECT_EQ(ra, rc);
        EXPECT_TRUE(std::isfinite(ra.full));
    }
}

TEST(TrainStep, FullIsWeightedSum) {
    auto c = small_config();
    c.set("loss.alpha", "10");
    auto cfg = train_config_from(c);
    Trainer<float> t(cfg);
    auto r = t.train_step(first_batch<float>(4), 1e-4);
    EXPECT_NEAR(r.full, 10 * r.adv_g + 15 * r.l1 + 5 * r.perc, 1e-4);
    EXPECT_GT(r.perc, 0.0);
    EXPECT_LT(r.adv_d, 0.0);
}

TEST(TrainStep, DisablePerceptualExcludesTerm) {
    auto c = small_config();
    c.set("train.disable_perceptual", "true");
    c.set("loss.alpha", "10");
    Trainer<float> t(train_config_from(c));
    auto r = t.train_step(first_batch<float>(4), 1e-4);
    EXPECT_EQ(r.perc, 0.0);
    EXPECT_NEAR(r.full, 10 * r.adv_g + 15 * r.l1, 1e-5);
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
    Trainer<float> t(train_config_from(small_config()));
    auto& p = t.generator_params();
    p.params.front().second->mutable_value().fill(std::numeric_limits<float>::quiet_NaN());
    try {
        t.train_step(first_batch<float>(4), 1e-4);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        EXPECT_TRUE(msg.find("adv") != std::string::npos || msg.find("l1") != std::string::npos) << msg;
        EXPECT_EQ(e.exit_code(), 4);
    }
}

TEST(TrainStep, TinyStepDoesNotIncreaseGeneratorLoss) {
    auto cfg = train_config_from(small_config());
    Trainer<double> t(cfg);
    auto b = first_batch<double>(4);
    const double before = t.generator_objective(b).full;
    t.generator_step(b, 1e-7);
    const double after = t.generator_objective(b).full;
    EXPECT_LE(after, before);
}

TEST(TrainStep, DisabledMaskNeverReadsMaskPixels) {
    auto samples = fixture().samples;
    auto pairs = make_pairs(fixture().train, 4, 4);
    auto clean = make_batch<float>(samples, pairs, true);
    std::mt19937_64 rng(5);
    for (auto& s : samples) {
        std::vector<std::uint8_t> bits(static_cast<std::size_t>(s.mask.height() * s.mask.width()));
        for (auto& v : bits) v = static_cast<std::uint8_t>(rng() % 2);
        s.mask = PoseMask(s.mask.height(), s.mask.width(), bits);
    }
    auto poisoned = make_batch<float>(samples, pairs, true);
    auto ones = make_batch<float>(samples, pairs, false);
    for (auto& s : samples) s.mask = PoseMask::ones(s.mask.height(), s.mask.width());
    ones = make_batch<float>(samples, pairs, false);

    SanGenerator<float> g(train_config_from(small_config()).generator);
    NoGradGuard ng;
    auto gen = [&](const PairBatch<float>& b) {
        return g.generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, Mode::eval).value();
    };
    EXPECT_EQ(gen(poisoned), gen(ones));
    EXPECT_EQ(gen(poisoned), gen(clean));
}

TEST(TrainStep, FixedBatchLossDropsThirtyPercentIn200Steps) {
    // Synthetic preset model on one fixed batch of 8 pairs.
    SynthConfig sc;
    san::testing::TempDir dir("fixed_batch");
    synth_generate(sc, dir.path());
    auto m = load_dataset(dir.path(), "train");
    auto samples = read_samples(m);
    auto b = make_batch<float>(samples, make_pairs(m, 5, 8), false);
    auto cfg = train_config_from(Config{});
    Trainer<float> t(cfg);
    const double first = t.train_step(b, cfg.lr).full;
    double last = first;
    for (int s = 1; s < 200; ++s) last = t.train_step(b, cfg.lr).full;
    EXPECT_LE(last, 0.7 * first) << "step 1 " << first << ", step 200 " << last;
}

TEST(Train, WritesLogsAndCheckpoints) {
    auto& f = fixture();
    san::testing::TempDir out("train_logs");
    auto r = train(small_config(), f.train, f.test, out.path());
    EXPECT_TRUE(fs::exists(r.checkpoint));
    for (int e = 1; e <= 4; ++e) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", e);
        EXPECT_TRUE(fs::exists(out.path() / "checkpoints" / name)) << name;
    }
    std::ifstream is(r.metrics_csv);
    std::string header;
    std::getline(is, header);
    EXPECT_EQ(header, "step,epoch,lr,adv_d,adv_g,l1,perc,full");
    int rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    EXPECT_EQ(rows, 8);  // 4 epochs × 2 steps
    ASSERT_EQ(r.eval.size(), 4u);
    EXPECT_EQ(r.eval.back().lr, 0.0);
    auto ck = load_checkpoint(r.checkpoint);
    EXPECT_EQ(ck.config_text, small_config().to_text());
}

TEST(Train, ResumeReproducesTrajectory) {
    auto& f = fixture();
    san::testing::TempDir a("resume_a"), b("resume_b");
    train(small_config(), f.train, f.test, a.path());
    TrainOptions stop;
    stop.stop_after = 2;
    train(small_config(), f.train, f.test, b.path(), stop);
    TrainOptions resume;
    resume.resume = b.path() / "checkpoints" / "epoch_0002.ckpt";
    train(small_config(), f.train, f.test, b.path(), resume);
    EXPECT_EQ(san::testing::read_bytes(a.path() / "metrics.csv"), san::testing::read_bytes(b.path() / "metrics.csv"));
    EXPECT_EQ(san::testing::read_bytes(a.path() / "eval.csv"), san::testing::read_bytes(b.path() / "eval.csv"));
    EXPECT_EQ(san::testing::read_bytes(a.path() / "model.ckpt"), san::testing::read_bytes(b.path() / "model.ckpt"));
}

TEST(Train, CheckpointRoundTripGivesIdenticalEvaluation) {
    auto& f = fixture();
    san::testing::TempDir out("roundtrip");
    auto c = small_config();
    c.set("train.epochs", "1");
    c.set("train.decay_start", "1");
    train(c, f.train, f.test, out.path());
    auto first = load_generator(out.path() / "model.ckpt");
    auto test_samples = read_samples(f.test);
    auto pairs = make_pairs(f.test, 9, 6);
    auto metric = metric_extractor<float>(first.train.metric_seed);
    std::vector<Tensor<float>> out1, out2;
    auto r1 = evaluate_generator(*first.generator, test_samples, pairs, metric, false, 16, &out1);

    // Save the loaded model again and reload it.
    Checkpoint ck;
    ck.config_text = first.config.to_text();
    store(ck, first.generator->parameters());
    save_checkpoint(out.path() / "again.ckpt", ck);
    auto second = load_generator(out.path() / "again.ckpt");
    auto r2 = evaluate_generator(*second.generator, test_samples, pairs, metric, false, 16, &out2);
    EXPECT_EQ(std::memcmp(&r1.masked_l1, &r2.masked_l1, sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&r1.fid, &r2.fid, sizeof(double)), 0);
    ASSERT_EQ(out1.size(), out2.size());
    for (std::size_t i = 0; i < out1.size(); ++i) EXPECT_EQ(out1[i], out2[i]);
}

TEST(Train, RejectsMismatchedDataset) {
    auto& f = fixture();
    san::testing::TempDir out("mismatch");
    auto c = small_config();
    c.set("image.height", "64");
    try {
        train(c, f.train, f.test, out.path());
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("32x32"), std::string::npos);
    }
}
