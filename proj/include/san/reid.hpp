#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "san/trainer.hpp"

namespace san {

// ---------------------------------------------------------------- augment

/// Fills `out_root/<split>` with a copy of the training records plus, for
/// every record, alpha-1 images generated towards target poses drawn
/// uniformly from the whole training set. Generated records keep the source
/// identity, reuse the target's parsing and mask files and are flagged
/// synthetic. alpha = 1 returns the input manifest untouched.
inline DatasetManifest augment(const DatasetManifest& train, SanGenerator<float>& gen, bool disable_mask, int alpha,
                               std::uint64_t seed, const fs::path& out_root, int chunk = 16) {
    if (alpha < 1) throw ConfigError("augment.alpha must be >= 1");
    if (alpha == 1) return train;
    if (train.records.size() < 2) throw EmptyResultError("augmentation needs at least 2 training records");
    const auto& gc = gen.config();
    if (train.image_height != gc.image_height || train.image_width != gc.image_width || train.label_count != gc.label_count)
        throw DataError("dataset '" + train.split_dir().string() + "' does not match the generator's image size or labels");
    if (fs::exists(out_root) && fs::equivalent(out_root, train.root))
        throw DataError("augmentation output must differ from the input dataset root");

    DatasetManifest out = train;
    out.root = out_root;
    const fs::path dst = out.split_dir();
    fs::create_directories(dst);
    for (const auto& r : train.records)
        for (const std::string* rel : {&r.image, &r.parsing, &r.mask}) {
            fs::create_directories((dst / *rel).parent_path());
            fs::copy_file(train.split_dir() / *rel, dst / *rel, fs::copy_options::overwrite_existing);
        }

    std::mt19937_64 rng(derive_seed(seed, 30));
    std::uniform_int_distribution<std::size_t> pick(0, train.records.size() - 2);
    std::vector<PairRef> pairs;
    for (std::size_t i = 0; i < train.records.size(); ++i)
        for (int k = 1; k < alpha; ++k) {
            std::size_t j = pick(rng);
            if (j >= i) ++j;  // any other image
            pairs.push_back({i, j});
        }

    const auto samples = read_samples(train);
    fs::create_directories(dst / "augmented");
    NoGradGuard ng;
    std::map<std::size_t, int> made;
    for (std::size_t s = 0; s < pairs.size(); s += static_cast<std::size_t>(chunk)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(chunk), pairs.size() - s);
        const auto part = std::span<const PairRef>(pairs).subspan(s, n);
        auto b = make_batch<float>(samples, part, disable_mask);
        const Tensor<float> fake =
            gen.generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, Mode::eval).value();
        for (std::size_t k = 0; k < n; ++k) {
            const Record& src = train.records[part[k].source];
            const Record& tgt = train.records[part[k].target];
            Record r;
            r.image = "augmented/" + src.key() + "_g" + std::to_string(++made[part[k].source]) + ".png";
            r.parsing = tgt.parsing;
            r.mask = tgt.mask;
            r.identity = src.identity;
            r.pose = tgt.pose;
            r.synthetic = true;
            write_png(dst / r.image, Image(fake.sample(static_cast<int>(k))).to_raster());
            out.records.push_back(std::move(r));
        }
    }
    write_manifest(out);
    return out;
}

// ---------------------------------------------------------------- embedder

struct EmbedderConfig {
    int channels = 16;
    int embedding_dim = 32;
    int identities = 2;
    int image_height = 32;
    int image_width = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (channels < 1) throw ConfigError("reid.channels must be >= 1");
        if (embedding_dim < 1) throw ConfigError("reid.embedding_dim must be >= 1");
        if (identities < 2) throw DataError("identity classifier needs at least 2 identities");
        if (image_height % 8 || image_width % 8) throw ConfigError("embedder input must be divisible by 8");
    }
};

/// Small convolutional identity classifier. The layer before the classifier
/// is the embedding.
template <class T>
class Embedder {
public:
    explicit Embedder(EmbedderConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(derive_seed(cfg_.seed, 40));
        const int c = cfg_.channels;
        const int io[4][2] = {{3, c}, {c, 2 * c}, {2 * c, 4 * c}, {4 * c, 4 * c}};
        for (int i = 0; i < 4; ++i) {
            if (i == 0) convs_.emplace_back(io[i][0], io[i][1], 3, 1, 1, rng);
            else convs_.emplace_back(io[i][0], io[i][1], 4, 2, 1, rng);
            norms_.emplace_back(io[i][1], ops::NormKind::batch);
        }
        flat_ = 4 * c * (cfg_.image_height / 8) * (cfg_.image_width / 8);
        embed_ = nn::Linear<T>(flat_, cfg_.embedding_dim, rng);
        classify_ = nn::Linear<T>(cfg_.embedding_dim, cfg_.identities, rng);
    }

    const EmbedderConfig& config() const { return cfg_; }

    /// N×3×H×W → N×embedding_dim.
    Var<T> embed(const Var<T>& images, Mode mode) {
        Var<T> h = images;
        for (std::size_t i = 0; i < convs_.size(); ++i) h = ops::leaky_relu(norms_[i](convs_[i](h), mode), T(0.2));
        return embed_(ops::reshape(h, Shape{h.shape().n(), flat_}));
    }

    /// N×identities class scores.
    Var<T> logits(const Var<T>& images, Mode mode) { return classify_(embed(images, mode)); }

    void collect(const std::string& prefix, NamedParams<T>& out) {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect(nn::join(prefix, "conv" + std::to_string(i)), out);
            norms_[i].collect(nn::join(prefix, "norm" + std::to_string(i)), out);
        }
        embed_.collect(nn::join(prefix, "embed"), out);
        classify_.collect(nn::join(prefix, "classify"), out);
    }

    NamedParams<T> parameters(const std::string& prefix = "embedder") {
        NamedParams<T> p;
        collect(prefix, p);
        return p;
    }

private:
    EmbedderConfig cfg_;
    std::vector<nn::Conv2d<T>> convs_;
    std::vector<nn::Norm<T>> norms_;
    int flat_ = 0;
    nn::Linear<T> embed_;
    nn::Linear<T> classify_;
};

struct IdeConfig {
    EmbedderConfig embedder;
    int epochs = 12;
    int batch = 16;
    double lr = 1e-3;

    void validate() const {
        if (epochs < 1) throw ConfigError("reid.epochs must be >= 1");
        if (batch < 2) throw ConfigError("reid.batch must be >= 2");
        if (!(lr > 0)) throw ConfigError("reid.lr must be > 0");
    }
};

inline IdeConfig ide_config_from(const Config& c) {
    IdeConfig i;
    i.embedder.channels = static_cast<int>(c.integer("reid.channels"));
    i.embedder.embedding_dim = static_cast<int>(c.integer("reid.embedding_dim"));
    i.embedder.image_height = static_cast<int>(c.integer("image.height"));
    i.embedder.image_width = static_cast<int>(c.integer("image.width"));
    i.embedder.seed = c.u64("seed");
    i.epochs = static_cast<int>(c.integer("reid.epochs"));
    i.batch = static_cast<int>(c.integer("reid.batch"));
    i.lr = c.real("reid.lr");
    i.validate();
    return i;
}

/// Sorted identity names and the class index of every sample.
struct IdentityIndex {
    std::vector<std::string> names;
    std::vector<int> labels;
};

inline IdentityIndex index_identities(const std::vector<Sample>& samples) {
    IdentityIndex ix;
    for (const auto& s : samples) ix.names.push_back(s.identity);
    std::sort(ix.names.begin(), ix.names.end());
    ix.names.erase(std::unique(ix.names.begin(), ix.names.end()), ix.names.end());
    for (const auto& s : samples)
        ix.labels.push_back(static_cast<int>(std::lower_bound(ix.names.begin(), ix.names.end(), s.identity) - ix.names.begin()));
    return ix;
}

inline Var<float> image_batch(const std::vector<Sample>& samples, std::span<const std::size_t> idx) {
    std::vector<Tensor<float>> xs;
    for (std::size_t i : idx) xs.push_back(samples.at(i).image.tensor());
    return Var<float>(stack_batch<float>(xs));
}

/// N×d embeddings in eval mode.
inline Eigen::MatrixXd embed_samples(Embedder<float>& e, const std::vector<Sample>& samples, int chunk = 32) {
    NoGradGuard ng;
    const int d = e.config().embedding_dim;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(samples.size()), d);
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t s = 0; s < samples.size(); s += static_cast<std::size_t>(chunk)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(chunk), samples.size() - s);
        const Tensor<float> z = e.embed(image_batch(samples, std::span<const std::size_t>(idx).subspan(s, n)), Mode::eval).value();
        for (std::size_t i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out(static_cast<Eigen::Index>(s + i), j) = z[i * static_cast<std::size_t>(d) + j];
    }
    return out;
}

struct IdeResult {
    std::unique_ptr<Embedder<float>> embedder;
    IdentityIndex identities;
    std::vector<double> epoch_loss;
    double train_accuracy = 0;  // eval mode, whole training set
};

/// Softmax identity classification on the training images. Deterministic
/// given cfg.embedder.seed.
inline IdeResult train_ide(const std::vector<Sample>& samples, IdeConfig cfg) {
    IdeResult r;
    r.identities = index_identities(samples);
    cfg.embedder.identities = static_cast<int>(r.identities.names.size());
    if (cfg.embedder.identities < 2) throw DataError("identity classifier needs at least 2 identities");
    cfg.validate();
    r.embedder = std::make_unique<Embedder<float>>(cfg.embedder);
    Adam<float> opt(r.embedder->parameters(), AdamConfig{0.9, 0.999, 1e-8});

    std::vector<std::size_t> order(samples.size());
    const std::size_t batch = static_cast<std::size_t>(cfg.batch);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(derive_seed(cfg.embedder.seed, 41, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        int steps = 0;
        for (std::size_t s = 0; s + 2 <= order.size(); s += batch) {
            const std::size_t n = std::min(batch, order.size() - s);
            if (n < 2) break;  // batch statistics need two samples
            const auto idx = std::span<const std::size_t>(order).subspan(s, n);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(r.identities.labels[i]);
            opt.zero_grad();
            Var<float> loss = ops::softmax_cross_entropy(r.embedder->logits(image_batch(samples, idx), Mode::train), labels);
            if (!std::isfinite(loss.value()[0])) throw NumericError("identity loss is not finite");
            backward(loss);
            opt.step(cfg.lr);
            loss_sum += loss.value()[0];
            ++steps;
        }
        r.epoch_loss.push_back(steps ? loss_sum / steps : 0.0);
    }

    NoGradGuard ng;
    std::size_t correct = 0;
    std::vector<std::size_t> all(samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t s = 0; s < all.size(); s += 32) {
        const std::size_t n = std::min<std::size_t>(32, all.size() - s);
        const Tensor<float> z = r.embedder->logits(image_batch(samples, std::span<const std::size_t>(all).subspan(s, n)), Mode::eval).value();
        const int k = cfg.embedder.identities;
        for (std::size_t i = 0; i < n; ++i) {
            const float* row = z.data() + i * static_cast<std::size_t>(k);
            if (std::max_element(row, row + k) - row == r.identities.labels[s + i]) ++correct;
        }
    }
    r.train_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return r;
}

// ---------------------------------------------------------------- metric

enum class MetricKind { euclidean, kissme };

inline MetricKind parse_metric_kind(const std::string& s) {
    if (s == "euclidean") return MetricKind::euclidean;
    if (s == "kissme") return MetricKind::kissme;
    throw ConfigError("unknown reid.metric '" + s + "' (expected euclidean or kissme)");
}

inline std::string to_string(MetricKind k) { return k == MetricKind::kissme ? "kissme" : "euclidean"; }

struct MetricModel {
    MetricKind kind = MetricKind::euclidean;
    Eigen::MatrixXd m;  // kissme only; symmetric PSD
};

namespace detail {

/// Second-moment matrix of difference vectors, ridge-regularized when it is
/// numerically singular.
inline Eigen::MatrixXd difference_covariance(const Eigen::MatrixXd& diffs, const char* what) {
    const Eigen::Index d = diffs.cols();
    if (diffs.rows() < d + 1)
        throw DataError(std::string("KISSME needs at least d+1 ") + what + " pairs, got " + std::to_string(diffs.rows()));
    Eigen::MatrixXd cov = diffs.transpose() * diffs / static_cast<double>(diffs.rows());
    cov = 0.5 * (cov + cov.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    if (es.eigenvalues().minCoeff() <= 1e-12 * top) {
        log_warning(std::string(what) + "-pair covariance is singular; adding 1e-6 to the diagonal");
        cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    }
    return cov;
}

}  // namespace detail

/// M = inv(cov_same) - inv(cov_diff), projected onto the PSD cone. Rows of
/// each argument are embedding differences x_i - x_j.
inline MetricModel fit_kissme(const Eigen::MatrixXd& same, const Eigen::MatrixXd& different) {
    if (same.cols() != different.cols()) throw ShapeError("KISSME difference sets have different dimensions");
    const Eigen::MatrixXd cs = detail::difference_covariance(same, "same");
    const Eigen::MatrixXd cd = detail::difference_covariance(different, "different");
    const Eigen::MatrixXd raw = cs.ldlt().solve(Eigen::MatrixXd::Identity(cs.rows(), cs.cols())) -
                                cd.ldlt().solve(Eigen::MatrixXd::Identity(cd.rows(), cd.cols()));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (raw + raw.transpose()));
    if (es.info() != Eigen::Success) throw NumericError("KISSME eigendecomposition failed");
    const Eigen::VectorXd clipped = es.eigenvalues().cwiseMax(0.0);
    MetricModel model;
    model.kind = MetricKind::kissme;
    model.m = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
    model.m = 0.5 * (model.m + model.m.transpose());
    return model;
}

/// All same-identity and different-identity difference vectors (i < j).
inline MetricModel fit_kissme(const Eigen::MatrixXd& embeddings, const std::vector<int>& labels) {
    if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) throw ShapeError("embedding and label counts differ");
    std::vector<Eigen::Index> same_i, same_j, diff_i, diff_j;
    for (Eigen::Index i = 0; i < embeddings.rows(); ++i)
        for (Eigen::Index j = i + 1; j < embeddings.rows(); ++j) {
            auto& a = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? same_i : diff_i;
            auto& b = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? same_j : diff_j;
            a.push_back(i);
            b.push_back(j);
        }
    auto gather = [&](const std::vector<Eigen::Index>& is, const std::vector<Eigen::Index>& js) {
        Eigen::MatrixXd d(static_cast<Eigen::Index>(is.size()), embeddings.cols());
        for (std::size_t k = 0; k < is.size(); ++k) d.row(static_cast<Eigen::Index>(k)) = embeddings.row(is[k]) - embeddings.row(js[k]);
        return d;
    };
    return fit_kissme(gather(same_i, same_j), gather(diff_i, diff_j));
}

/// Euclidean: ||x - y||. KISSME: (x - y)^T M (x - y).
inline double distance(const MetricModel& metric, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size()) throw ShapeError("embedding dimensions differ: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
    const Eigen::VectorXd d = x - y;
    if (metric.kind == MetricKind::euclidean) return d.norm();
    if (metric.m.rows() != d.size() || metric.m.cols() != d.size()) throw ShapeError("KISSME matrix does not match the embedding dimension");
    return d.dot(metric.m * d);
}

// ---------------------------------------------------------------- evaluation

struct ReidReport {
    double rank1 = 0;
    double rank5 = 0;
    double rank10 = 0;
    double mAP = 0;
    std::size_t queries = 0;
};

/// Single-query CMC and mean average precision. Gallery items are ranked by
/// distance with ties kept in gallery order. With exclude_self the gallery
/// item at the query's own index is skipped (query and gallery are the same
/// set).
inline ReidReport evaluate_reid(const MetricModel& metric, const Eigen::MatrixXd& query, const std::vector<std::string>& query_ids,
                                const Eigen::MatrixXd& gallery, const std::vector<std::string>& gallery_ids,
                                bool exclude_self = false) {
    if (gallery.rows() == 0) throw EmptyResultError("re-identification gallery is empty");
    if (query.rows() == 0) throw EmptyResultError("re-identification query set is empty");
    if (static_cast<std::size_t>(query.rows()) != query_ids.size() || static_cast<std::size_t>(gallery.rows()) != gallery_ids.size())
        throw ShapeError("embedding and identity counts differ");
    ReidReport r;
    r.queries = static_cast<std::size_t>(query.rows());
    for (Eigen::Index q = 0; q < query.rows(); ++q) {
        std::vector<std::pair<double, Eigen::Index>> ranked;
        for (Eigen::Index g = 0; g < gallery.rows(); ++g) {
            if (exclude_self && g == q) continue;
            ranked.emplace_back(distance(metric, query.row(q).transpose(), gallery.row(g).transpose()), g);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        const std::string& id = query_ids[static_cast<std::size_t>(q)];
        std::size_t hits = 0, first = 0;
        double ap = 0;
        for (std::size_t k = 0; k < ranked.size(); ++k)
            if (gallery_ids[static_cast<std::size_t>(ranked[k].second)] == id) {
                ++hits;
                if (hits == 1) first = k + 1;
                ap += static_cast<double>(hits) / static_cast<double>(k + 1);
            }
        if (hits == 0) throw DataError("query identity '" + id + "' has no match in the gallery");
        r.rank1 += first <= 1;
        r.rank5 += first <= 5;
        r.rank10 += first <= 10;
        r.mAP += ap / static_cast<double>(hits);
    }
    const double n = static_cast<double>(r.queries);
    r.rank1 /= n;
    r.rank5 /= n;
    r.rank10 /= n;
    r.mAP /= n;
    return r;
}

/// First record of every identity is the query; the rest form the gallery.
struct QueryGallerySplit {
    std::vector<std::size_t> query, gallery;
};

inline QueryGallerySplit split_query_gallery(const std::vector<Sample>& samples) {
    QueryGallerySplit s;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < samples.size(); ++i) (seen.insert(samples[i].identity).second ? s.query : s.gallery).push_back(i);
    return s;
}

struct ReidSeedResult {
    std::uint64_t seed = 0;
    double train_accuracy = 0;
    std::size_t train_records = 0;
    ReidReport report;
};

struct ReidExperiment {
    MetricKind kind = MetricKind::euclidean;
    int alpha = 1;
    std::vector<ReidSeedResult> per_seed;
    ReidReport mean;
};

/// One run per seed: optional augmentation, identity training, metric
/// fitting on the training embeddings, and ranking of held-out queries.
inline ReidExperiment run_reid(const Config& c, const DatasetManifest& train, const DatasetManifest& test, const fs::path& work) {
    ReidExperiment ex;
    ex.kind = parse_metric_kind(c.str("reid.metric"));
    ex.alpha = static_cast<int>(c.integer("reid.alpha"));
    if (ex.alpha < 1) throw ConfigError("reid.alpha must be >= 1");
    std::unique_ptr<LoadedGenerator> gen;
    if (ex.alpha > 1) {
        if (c.str("reid.generator").empty()) throw ConfigError("reid.alpha > 1 needs reid.generator (a trained checkpoint)");
        gen = std::make_unique<LoadedGenerator>(load_generator(c.str("reid.generator")));
    }
    const auto test_samples = read_samples(test);
    const auto qg = split_query_gallery(test_samples);
    if (qg.gallery.empty()) throw EmptyResultError("test split has no gallery images");

    for (std::uint64_t seed : c.u64_list("reid.seeds")) {
        Config sc = c;
        sc.set("seed", std::to_string(seed));
        DatasetManifest m = train;
        if (gen) m = augment(train, *gen->generator, gen->train.disable_mask, ex.alpha, seed, work / ("augmented_seed" + std::to_string(seed)));
        const auto samples = read_samples(m);
        IdeResult ide = train_ide(samples, ide_config_from(sc));

        MetricModel metric;
        metric.kind = ex.kind;
        if (ex.kind == MetricKind::kissme) metric = fit_kissme(embed_samples(*ide.embedder, samples), ide.identities.labels);

        const Eigen::MatrixXd all = embed_samples(*ide.embedder, test_samples);
        auto rows = [&](const std::vector<std::size_t>& idx, std::vector<std::string>& ids) {
            Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), all.cols());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                x.row(static_cast<Eigen::Index>(k)) = all.row(static_cast<Eigen::Index>(idx[k]));
                ids.push_back(test_samples[idx[k]].identity);
            }
            return x;
        };
        std::vector<std::string> qid, gid;
        const Eigen::MatrixXd q = rows(qg.query, qid), g = rows(qg.gallery, gid);
        ReidSeedResult sr;
        sr.seed = seed;
        sr.train_accuracy = ide.train_accuracy;
        sr.train_records = samples.size();
        sr.report = evaluate_reid(metric, q, qid, g, gid);
        log_info("reid seed " + std::to_string(seed) + " alpha " + std::to_string(ex.alpha) + " rank1 " +
                 format_real(sr.report.rank1) + " mAP " + format_real(sr.report.mAP));
        ex.per_seed.push_back(sr);
    }
    const double n = static_cast<double>(ex.per_seed.size());
    for (const auto& s : ex.per_seed) {
        ex.mean.rank1 += s.report.rank1 / n;
        ex.mean.rank5 += s.report.rank5 / n;
        ex.mean.rank10 += s.report.rank10 / n;
        ex.mean.mAP += s.report.mAP / n;
        ex.mean.queries = s.report.queries;
    }
    return ex;
}

}  // namespace san
