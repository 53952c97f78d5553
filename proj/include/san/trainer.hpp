#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "san/checkpoint.hpp"
#include "san/config.hpp"
#include "san/data.hpp"
#include "san/discriminator.hpp"
#include "san/generator.hpp"
#include "san/losses.hpp"
#include "san/metrics.hpp"
#include "san/optim.hpp"

namespace san {

struct TrainConfig {
    std::string preset = "synthetic";
    int epochs = 30;
    int decay_start = 15;
    int batch = 8;
    double lr = 2e-4;
    AdamConfig adam;
    LossWeights weights;
    GeneratorConfig generator;
    DiscriminatorConfig discriminator;
    ExtractorConfig extractor;
    std::uint64_t metric_seed = 4321;
    bool disable_perceptual = false;
    bool disable_mask = false;
    bool label_smoothing = true;
    std::uint64_t seed = 7;
    int checkpoint_every = 10;  // epochs; 0 writes only the final checkpoint
    int pairs_per_epoch = 160;
    int eval_pairs = 64;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (decay_start < 0) throw ConfigError("train.decay_start must be >= 0");
        if (batch < 1) throw ConfigError("train.batch must be >= 1");
        if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
        if (pairs_per_epoch < 1) throw ConfigError("train.pairs_per_epoch must be >= 1");
        if (eval_pairs < 2) throw ConfigError("train.eval_pairs must be >= 2");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
        if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
            throw ConfigError("Adam betas must lie in [0, 1)");
        weights.validate();
        generator.validate();
        discriminator.validate();
    }
};

inline TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.preset = c.str("preset");
    t.epochs = static_cast<int>(c.integer("train.epochs"));
    t.decay_start = static_cast<int>(c.integer("train.decay_start"));
    t.batch = static_cast<int>(c.integer("train.batch"));
    t.lr = c.real("train.lr");
    t.adam.beta1 = c.real("train.beta1");
    t.adam.beta2 = c.real("train.beta2");
    t.weights = {c.real("loss.alpha"), c.real("loss.beta"), c.real("loss.gamma")};
    t.seed = c.u64("seed");

    t.generator.sab_blocks = static_cast<int>(c.integer("model.sab_blocks"));
    t.generator.base_channels = static_cast<int>(c.integer("model.base_channels"));
    t.generator.down_stages = static_cast<int>(c.integer("model.down_stages"));
    t.generator.label_count = static_cast<int>(c.integer("image.labels"));
    t.generator.image_height = static_cast<int>(c.integer("image.height"));
    t.generator.image_width = static_cast<int>(c.integer("image.width"));
    t.generator.norm = parse_norm_kind(c.str("model.norm"));
    t.generator.seed = t.seed;

    t.discriminator.base_channels = static_cast<int>(c.integer("model.disc_channels"));
    t.discriminator.image_height = t.generator.image_height;
    t.discriminator.image_width = t.generator.image_width;
    t.discriminator.seed = t.seed;

    t.extractor.seed = c.u64("loss.extractor_seed");
    t.metric_seed = c.u64("metrics.extractor_seed");
    t.disable_perceptual = c.boolean("train.disable_perceptual");
    t.disable_mask = c.boolean("train.disable_mask");
    t.label_smoothing = c.boolean("train.label_smoothing");
    t.checkpoint_every = static_cast<int>(c.integer("train.checkpoint_every"));
    t.pairs_per_epoch = static_cast<int>(c.integer("train.pairs_per_epoch"));
    t.eval_pairs = static_cast<int>(c.integer("train.eval_pairs"));
    t.validate();
    return t;
}

/// Constant through `decay_start`, then linear to zero at the last epoch.
inline double lr_schedule(const TrainConfig& cfg, int epoch) {
    if (epoch < 0 || epoch >= cfg.epochs)
        throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
    const int last = cfg.epochs - 1;
    if (epoch <= cfg.decay_start || cfg.decay_start >= last) return cfg.lr;
    return cfg.lr * static_cast<double>(last - epoch) / static_cast<double>(last - cfg.decay_start);
}

/// Metric extractor: same family as the perceptual extractor, own seed.
template <class T>
FeatureExtractor<T> metric_extractor(std::uint64_t seed) {
    ExtractorConfig e;
    e.seed = seed;
    return FeatureExtractor<T>(e);
}

/// Stacked source/target tensors for a list of pairs.
template <class T>
struct PairBatch {
    Var<T> source_image, source_mask, source_map;
    Var<T> target_image, target_mask, target_map;
    Tensor<T> target_foreground;  // from the target parsing map; used by metrics only

    int size() const { return source_image.shape().n(); }
};

/// With `disable_mask` the mask inputs are all-ones and mask pixels are never read.
template <class T>
PairBatch<T> make_batch(const std::vector<Sample>& samples, std::span<const PairRef> pairs, bool disable_mask) {
    if (pairs.empty()) throw std::invalid_argument("make_batch: empty pair list");
    std::vector<Tensor<T>> si, sm, ss, ti, tm, ts, fg;
    for (const auto& p : pairs) {
        const Sample& s = samples.at(p.source);
        const Sample& t = samples.at(p.target);
        si.push_back(s.image.tensor().template cast<T>());
        ss.push_back(s.map.to_tensor<T>());
        ti.push_back(t.image.tensor().template cast<T>());
        ts.push_back(t.map.to_tensor<T>());
        if (disable_mask) {
            sm.push_back(PoseMask::ones(s.image.height(), s.image.width()).to_tensor<T>());
            tm.push_back(PoseMask::ones(t.image.height(), t.image.width()).to_tensor<T>());
        } else {
            sm.push_back(s.mask.to_tensor<T>());
            tm.push_back(t.mask.to_tensor<T>());
        }
        fg.push_back(mask_from_semantic(t.map).to_tensor<T>());
    }
    auto v = [](std::vector<Tensor<T>>& xs) { return Var<T>(stack_batch<T>(xs)); };
    return {v(si), v(sm), v(ss), v(ti), v(tm), v(ts), stack_batch<T>(fg)};
}

struct LossRecord {
    double adv_d = 0;  // mean log D_real + mean log(1 - D_fake), before the D update
    double adv_g = 0;  // -mean log D_fake after the D update
    double l1 = 0;
    double perc = 0;
    double full = 0;   // alpha*adv_g + beta*l1 + gamma*perc
    bool operator==(const LossRecord&) const = default;
};

template <class T>
class Trainer {
public:
    explicit Trainer(TrainConfig cfg)
        : cfg_(std::move(cfg)),
          gen_((cfg_.validate(), cfg_.generator)),
          disc_(cfg_.discriminator),
          extractor_(cfg_.extractor),
          gparams_(gen_.parameters()),
          dparams_(disc_.parameters()),
          opt_g_(gparams_, cfg_.adam),
          opt_d_(dparams_, cfg_.adam) {}

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    const TrainConfig& config() const { return cfg_; }
    SanGenerator<T>& generator() { return gen_; }
    Discriminator<T>& discriminator() { return disc_; }
    NamedParams<T>& generator_params() { return gparams_; }
    NamedParams<T>& discriminator_params() { return dparams_; }
    Adam<T>& generator_optimizer() { return opt_g_; }
    Adam<T>& discriminator_optimizer() { return opt_d_; }

    Var<T> generate(const PairBatch<T>& b, Mode mode) {
        return gen_.generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, mode);
    }

    /// One discriminator step, then one generator step, at learning rate `lr`.
    LossRecord train_step(const PairBatch<T>& b, double lr) {
        LossRecord rec;
        Var<T> fake = generate(b, Mode::train);

        opt_d_.zero_grad();
        auto d_real = disc_(b.source_image, b.target_image);
        auto d_fake = disc_(b.source_image, fake.detach());
        rec.adv_d = adv_loss(d_real, d_fake).value()[0];
        check_finite("adv_d", rec.adv_d);
        const T real_target = cfg_.label_smoothing ? T(0.9) : T(1);
        const T fake_target = cfg_.label_smoothing ? T(0.1) : T(0);
        auto loss_d = discriminator_loss(d_real, d_fake, real_target, fake_target);
        check_finite("discriminator", loss_d.value()[0]);
        backward(loss_d);
        opt_d_.step(lr);

        opt_g_.zero_grad();
        auto terms = generator_terms(b, fake);
        rec.adv_g = terms.adv.value()[0];
        rec.l1 = terms.l1.value()[0];
        rec.perc = terms.perc.defined() ? terms.perc.value()[0] : 0.0;
        rec.full = terms.full.value()[0];
        check_record(rec);
        backward(terms.full);
        opt_g_.step(lr);
        ++steps_;
        return rec;
    }

    /// Generator objective on `b` with no parameter update.
    LossRecord generator_objective(const PairBatch<T>& b) {
        auto terms = generator_terms(b, generate(b, Mode::train));
        LossRecord rec;
        rec.adv_g = terms.adv.value()[0];
        rec.l1 = terms.l1.value()[0];
        rec.perc = terms.perc.defined() ? terms.perc.value()[0] : 0.0;
        rec.full = terms.full.value()[0];
        return rec;
    }

    /// Generator-only descent step; the discriminator is held fixed.
    void generator_step(const PairBatch<T>& b, double lr) {
        opt_g_.zero_grad();
        auto terms = generator_terms(b, generate(b, Mode::train));
        check_finite("full", terms.full.value()[0]);
        backward(terms.full);
        opt_g_.step(lr);
        opt_d_.zero_grad();
    }

    long steps() const { return steps_; }
    void set_steps(long s) { steps_ = s; }

private:
    struct Terms {
        Var<T> adv, l1, perc, full;
    };

    Terms generator_terms(const PairBatch<T>& b, const Var<T>& fake) {
        Terms t;
        t.adv = generator_adv_loss(disc_(b.source_image, fake));
        t.l1 = l1_loss(b.target_image, fake);
        std::vector<Var<T>> parts{t.adv, t.l1};
        std::vector<T> w{static_cast<T>(cfg_.weights.alpha), static_cast<T>(cfg_.weights.beta)};
        if (!cfg_.disable_perceptual) {
            t.perc = perceptual_loss(extractor_, b.target_image, fake);
            parts.push_back(t.perc);
            w.push_back(static_cast<T>(cfg_.weights.gamma));
        }
        t.full = ops::weighted_sum<T>(parts, w);
        return t;
    }

    void check_finite(const char* term, double v) const {
        if (!std::isfinite(v))
            throw NumericError("non-finite " + std::string(term) + " loss at step " + std::to_string(steps_ + 1));
    }

    void check_record(const LossRecord& r) const {
        check_finite("adv_g", r.adv_g);
        check_finite("l1", r.l1);
        check_finite("perc", r.perc);
        check_finite("full", r.full);
    }

    TrainConfig cfg_;
    SanGenerator<T> gen_;
    Discriminator<T> disc_;
    FeatureExtractor<T> extractor_;
    NamedParams<T> gparams_;
    NamedParams<T> dparams_;
    Adam<T> opt_g_;
    Adam<T> opt_d_;
    long steps_ = 0;
};

struct EvalReport {
    double masked_l1 = 0;
    double fid = 0;
    double lpips_mean = 0;
    double mask_lpips_mean = 0;
    std::size_t n_pairs = 0;
};

/// Generates every pair in eval mode and scores it against the real target.
/// Masked metrics use the foreground of the target parsing map.
inline EvalReport evaluate_generator(SanGenerator<float>& gen, const std::vector<Sample>& samples,
                                     const std::vector<PairRef>& pairs, const FeatureExtractor<float>& metric,
                                     bool disable_mask, int chunk = 16, std::vector<Tensor<float>>* outputs = nullptr) {
    if (pairs.size() < 2) throw EmptyResultError("evaluation needs at least 2 pairs");
    NoGradGuard ng;
    EvalReport r;
    r.n_pairs = pairs.size();
    double l1_acc = 0, l1_count = 0, lp = 0, mlp = 0;
    std::vector<Eigen::MatrixXd> real_f, fake_f;
    for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(chunk)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(chunk), pairs.size() - i);
        auto b = make_batch<float>(samples, std::span<const PairRef>(pairs).subspan(i, n), disable_mask);
        Tensor<float> fake =
            gen.generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, Mode::eval).value();
        const Tensor<float>& real = b.target_image.value();
        double fg = 0;
        for (float v : b.target_foreground.vec()) fg += v;
        l1_acc += masked_l1(fake, real, b.target_foreground) * fg * 3;
        l1_count += fg * 3;
        for (double v : lpips_batch(metric, fake, real)) lp += v;
        const Tensor<float> mf = mask_fill(fake, b.target_foreground), mr = mask_fill(real, b.target_foreground);
        for (double v : lpips_batch(metric, mf, mr)) mlp += v;
        real_f.push_back(fid_features(metric, real));
        fake_f.push_back(fid_features(metric, fake));
        if (outputs)
            for (int k = 0; k < fake.shape().n(); ++k) outputs->push_back(fake.sample(k));
    }
    auto stack = [](const std::vector<Eigen::MatrixXd>& parts) {
        Eigen::Index rows = 0;
        for (const auto& p : parts) rows += p.rows();
        Eigen::MatrixXd m(rows, parts.front().cols());
        Eigen::Index at = 0;
        for (const auto& p : parts) {
            m.middleRows(at, p.rows()) = p;
            at += p.rows();
        }
        return m;
    };
    r.masked_l1 = l1_acc / l1_count;
    r.fid = fid(fit_stats(stack(real_f)), fit_stats(stack(fake_f)));
    r.lpips_mean = lp / static_cast<double>(pairs.size());
    r.mask_lpips_mean = mlp / static_cast<double>(pairs.size());
    return r;
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

struct EvalRow {
    int epoch = 0;
    double lr = 0;
    double masked_l1 = 0;
    double fid = 0;
};

struct TrainResult {
    fs::path checkpoint;
    fs::path metrics_csv;
    fs::path eval_csv;
    std::vector<EvalRow> eval;
    std::vector<LossRecord> losses;
};

struct TrainOptions {
    std::optional<fs::path> resume;  // checkpoint to continue from
    std::optional<int> stop_after;   // stop once this many epochs are complete
};

inline constexpr const char* kMetricsHeader = "step,epoch,lr,adv_d,adv_g,l1,perc,full";
inline constexpr const char* kEvalHeader = "epoch,lr,masked_l1,fid";

inline Checkpoint make_checkpoint(const Config& resolved, Trainer<float>& tr, int epochs_done) {
    Checkpoint ck;
    ck.config_text = resolved.to_text();
    store(ck, tr.generator_params());
    store(ck, tr.discriminator_params());
    auto moments = [&](Adam<float>& opt) {
        for (auto& [name, t] : opt.first_moments()) ck.arrays["adam.m." + name] = t;
        for (auto& [name, t] : opt.second_moments()) ck.arrays["adam.v." + name] = t;
    };
    moments(tr.generator_optimizer());
    moments(tr.discriminator_optimizer());
    ck.arrays["trainer.state"] = Tensor<float>(
        Shape{4}, std::vector<float>{static_cast<float>(epochs_done), static_cast<float>(tr.steps()),
                                     static_cast<float>(tr.generator_optimizer().steps()),
                                     static_cast<float>(tr.discriminator_optimizer().steps())});
    return ck;
}

/// Restores everything written by make_checkpoint; returns epochs completed.
inline int restore_checkpoint(const Checkpoint& ck, Trainer<float>& tr) {
    restore(ck, tr.generator_params());
    restore(ck, tr.discriminator_params());
    auto moments = [&](Adam<float>& opt) {
        for (auto& [name, t] : opt.first_moments()) t = ck.get("adam.m." + name);
        for (auto& [name, t] : opt.second_moments()) t = ck.get("adam.v." + name);
    };
    moments(tr.generator_optimizer());
    moments(tr.discriminator_optimizer());
    const Tensor<float>& st = ck.get("trainer.state");
    if (st.size() != 4) throw DataError("checkpoint trainer.state has the wrong size");
    tr.set_steps(static_cast<long>(st[1]));
    tr.generator_optimizer().set_steps(static_cast<long>(st[2]));
    tr.discriminator_optimizer().set_steps(static_cast<long>(st[3]));
    return static_cast<int>(st[0]);
}

/// Generator with parameters loaded from a checkpoint written by `train`.
struct LoadedGenerator {
    Config config;
    TrainConfig train;
    std::unique_ptr<SanGenerator<float>> generator;
};

inline LoadedGenerator load_generator(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    LoadedGenerator g;
    g.config = Config::from_text(ck.config_text, path.string() + " (config echo)");
    g.train = train_config_from(g.config);
    g.generator = std::make_unique<SanGenerator<float>>(g.train.generator);
    auto params = g.generator->parameters();
    restore(ck, params);
    return g;
}

inline void check_manifest(const TrainConfig& cfg, const DatasetManifest& m) {
    if (m.image_height != cfg.generator.image_height || m.image_width != cfg.generator.image_width)
        throw DataError("dataset '" + m.split_dir().string() + "' has images of " + std::to_string(m.image_height) + "x" +
                        std::to_string(m.image_width) + " but the config expects " +
                        std::to_string(cfg.generator.image_height) + "x" + std::to_string(cfg.generator.image_width));
    if (m.label_count != cfg.generator.label_count)
        throw DataError("dataset label count " + std::to_string(m.label_count) + " differs from image.labels " +
                        std::to_string(cfg.generator.label_count));
}

/// Held-out pairs used for per-epoch evaluation.
inline std::vector<PairRef> heldout_pairs(const TrainConfig& cfg, const DatasetManifest& heldout) {
    return make_pairs(heldout, derive_seed(cfg.seed, 11), static_cast<std::size_t>(cfg.eval_pairs));
}

namespace detail {

/// Rows of an existing CSV whose epoch column (index `col`) is <= `epoch`.
inline std::vector<std::string> kept_rows(const fs::path& path, std::size_t col, int epoch) {
    std::vector<std::string> rows;
    std::ifstream is(path);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
        if (header) {
            header = false;
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t i = 0; i <= col; ++i) std::getline(ss, cell, ',');
        if (std::stoi(cell) <= epoch) rows.push_back(line);
    }
    return rows;
}

}  // namespace detail

/// Full training run. Writes `metrics.csv`, `eval.csv`, periodic checkpoints
/// under `checkpoints/` and `model.ckpt` to `out_dir`.
inline TrainResult train(const Config& resolved, const DatasetManifest& train_manifest, const DatasetManifest& heldout,
                         const fs::path& out_dir, const TrainOptions& opts = {}) {
    const TrainConfig cfg = train_config_from(resolved);
    check_manifest(cfg, train_manifest);
    check_manifest(cfg, heldout);
    const auto train_samples = read_samples(train_manifest);
    const auto heldout_samples = read_samples(heldout);
    const auto eval_pairs = heldout_pairs(cfg, heldout);
    const auto metric = metric_extractor<float>(cfg.metric_seed);

    Trainer<float> tr(cfg);
    int start_epoch = 0;
    TrainResult result;
    result.metrics_csv = out_dir / "metrics.csv";
    result.eval_csv = out_dir / "eval.csv";
    fs::create_directories(out_dir / "checkpoints");

    std::vector<std::string> old_metrics, old_eval;
    if (opts.resume) {
        Checkpoint ck = load_checkpoint(*opts.resume);
        if (ck.config_text != resolved.to_text())
            log_warning("resuming from a checkpoint whose config echo differs from the current config");
        start_epoch = restore_checkpoint(ck, tr);
        old_metrics = detail::kept_rows(result.metrics_csv, 1, start_epoch);
        old_eval = detail::kept_rows(result.eval_csv, 0, start_epoch);
    }
    std::ofstream metrics_os(result.metrics_csv), eval_os(result.eval_csv);
    if (!metrics_os || !eval_os) throw DataError("cannot write logs under " + out_dir.string());
    metrics_os << kMetricsHeader << '\n';
    for (const auto& r : old_metrics) metrics_os << r << '\n';
    eval_os << kEvalHeader << '\n';
    for (const auto& r : old_eval) eval_os << r << '\n';

    const int last = opts.stop_after ? std::min(*opts.stop_after, cfg.epochs) : cfg.epochs;
    for (int epoch = start_epoch; epoch < last; ++epoch) {
        const double lr = lr_schedule(cfg, epoch);
        const auto pairs =
            make_pairs(train_manifest, derive_seed(cfg.seed, 10, static_cast<std::uint64_t>(epoch)),
                       static_cast<std::size_t>(cfg.pairs_per_epoch));
        for (std::size_t i = 0; i < pairs.size(); i += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), pairs.size() - i);
            auto batch = make_batch<float>(train_samples, std::span<const PairRef>(pairs).subspan(i, n), cfg.disable_mask);
            const LossRecord rec = tr.train_step(batch, lr);
            result.losses.push_back(rec);
            metrics_os << tr.steps() << ',' << epoch + 1 << ',' << format_real(lr) << ',' << format_real(rec.adv_d) << ','
                       << format_real(rec.adv_g) << ',' << format_real(rec.l1) << ',' << format_real(rec.perc) << ','
                       << format_real(rec.full) << '\n';
        }
        metrics_os.flush();
        const EvalReport ev = evaluate_generator(tr.generator(), heldout_samples, eval_pairs, metric, cfg.disable_mask);
        result.eval.push_back({epoch + 1, lr, ev.masked_l1, ev.fid});
        eval_os << epoch + 1 << ',' << format_real(lr) << ',' << format_real(ev.masked_l1) << ',' << format_real(ev.fid)
                << '\n';
        eval_os.flush();
        log_info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " masked_l1 " +
                 format_real(ev.masked_l1) + " fid " + format_real(ev.fid));
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch + 1);
            save_checkpoint(out_dir / "checkpoints" / name, make_checkpoint(resolved, tr, epoch + 1));
        }
    }
    result.checkpoint = out_dir / "model.ckpt";
    save_checkpoint(result.checkpoint, make_checkpoint(resolved, tr, last));
    return result;
}

}  // namespace san
