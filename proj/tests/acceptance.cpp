// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
// Usage: acceptance [work_dir] [criterion ...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "temp_dir.hpp"
#include "san/commands.hpp"

using namespace san;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// ------------------------------------------------------------ loop oracles

double adv_oracle(const std::vector<double>& r, const std::vector<double>& f) {
    double a = 0, b = 0;
    for (double p : r) a += std::log(p);
    for (double q : f) b += std::log(1 - q);
    return a / static_cast<double>(r.size()) + b / static_cast<double>(f.size());
}

Var<double> column(const std::vector<double>& v) {
    return Var<double>(Tensor<double>(Shape{static_cast<int>(v.size()), 1}, v));
}

// 3×3 stride-2 pad-1 convolution and LeakyReLU(0.2) on one image.
Tensor<double> conv_lrelu_loop(const nn::Conv2d<double>& conv, const Tensor<double>& x) {
    const auto& w = conv.weight.value();
    const auto& b = conv.bias.value();
    const int ic = x.shape().c(), h = x.shape().h(), wd = x.shape().w(), oc = w.shape()[0];
    const int oh = (h - 1) / 2 + 1, ow = (wd - 1) / 2 + 1;
    Tensor<double> out(Shape{1, oc, oh, ow});
    for (int o = 0; o < oc; ++o)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
                double acc = b[static_cast<std::size_t>(o)];
                for (int i = 0; i < ic; ++i)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int sy = 2 * y - 1 + ky, sx = 2 * xx - 1 + kx;
                            if (sy >= 0 && sx >= 0 && sy < h && sx < wd) acc += w.at(o, i, ky, kx) * x.at(0, i, sy, sx);
                        }
                out.at(0, o, y, xx) = acc > 0 ? acc : 0.2 * acc;
            }
    return out;
}

ExtractorConfig tiny_extractor() {
    ExtractorConfig e;
    e.channels = {4, 6};
    e.layers = {0, 1};
    e.seed = 99;
    return e;
}

// ------------------------------------------------------------ criteria 1-4

Outcome criterion1() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.02, 0.98);
    for (int n : {1, 2, 4}) {
        std::vector<double> r(static_cast<std::size_t>(n)), f(static_cast<std::size_t>(n));
        for (auto& v : r) v = u(rng);
        for (auto& v : f) v = u(rng);
        const double o = adv_oracle(r, f);
        worst = std::max(worst, std::abs(adv_loss(column(r), column(f)).value()[0] - o));
        worst = std::max(worst, std::abs(adv_loss(r, f) - o));
        double g = 0;
        for (double q : f) g -= std::log(q) / n;
        worst = std::max(worst, std::abs(generator_adv_loss(column(f)).value()[0] - g));
    }
    worst = std::max(worst, std::abs(adv_loss(column({0.5}), column({0.5})).value()[0] - 2 * std::log(0.5)));

    for (int h : {1, 2, 4}) {
        auto a = rand_uniform<double>(Shape{1, 3, h, h}, rng, -1, 1), b = rand_uniform<double>(Shape{1, 3, h, h}, rng, -1, 1);
        double o = 0;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < h; ++x) o += std::abs(a.at(0, c, y, x) - b.at(0, c, y, x));
        o /= 3.0 * h * h;
        worst = std::max(worst, std::abs(l1_loss(Var<double>(a), Var<double>(b)).value()[0] - o));
    }

    FeatureExtractor<double> fx(tiny_extractor());
    for (int trial = 0; trial < 3; ++trial) {
        auto a = rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1), b = rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1);
        Tensor<double> fa = a, fb = b;
        double o = 0;
        for (std::size_t l = 0; l < 2; ++l) {
            fa = conv_lrelu_loop(fx.layer(l), fa);
            fb = conv_lrelu_loop(fx.layer(l), fb);
            double s = 0;
            for (std::size_t i = 0; i < fa.size(); ++i) s += (fa[i] - fb[i]) * (fa[i] - fb[i]);
            o += s / static_cast<double>(fa.size());
        }
        worst = std::max(worst, std::abs(perceptual_loss(fx, Var<double>(a), Var<double>(b)).value()[0] - o));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-6 && secs < 5.0, "max |err| " + fmt(worst) + ", " + fmt(secs) + " s"};
}

Outcome criterion2() {
    using san::testing::gradcheck;
    const auto t0 = Clock::now();
    std::map<std::string, san::testing::GradCheckReport> reps;

    {
        std::mt19937_64 init(77);
        SemanticAttentionBlock<double> block(4, ops::NormKind::batch, 0.2, init);
        NamedParams<double> params;
        block.collect("sab", params);
        for (auto& [name, p] : params.params)
            if (name.find("weight") != std::string::npos)
                for (auto& v : p->mutable_value().vec()) v *= 20.0;
        std::mt19937_64 rng(78);
        Var<double> app(randn<double>(Shape{2, 4, 4, 4}, rng), true), sem(randn<double>(Shape{2, 4, 4, 4}, rng), true);
        auto wa = randn<double>(Shape{2, 4, 4, 4}, rng), ws = randn<double>(Shape{2, 4, 4, 4}, rng);
        std::vector<Var<double>*> in{&app, &sem};
        for (auto& [name, p] : params.params) in.push_back(p);
        reps["attention block"] = gradcheck(
            [&] {
                auto [a, s] = block(app, sem, Mode::train);
                return ops::add(ops::dot_const(a, wa), ops::dot_const(s, ws));
            },
            in, 12);
    }
    {
        DiscriminatorConfig c;
        c.base_channels = 2;
        c.image_height = c.image_width = 8;
        c.seed = 3;
        Discriminator<double> d(c);
        auto params = d.parameters();
        for (auto& [name, p] : params.params)
            for (auto& v : p->mutable_value().vec()) v *= 15.0;
        std::mt19937_64 rng(4);
        Var<double> a(rand_uniform<double>(Shape{2, 3, 8, 8}, rng, -1, 1), true);
        Var<double> b(rand_uniform<double>(Shape{2, 3, 8, 8}, rng, -1, 1), true);
        std::vector<Var<double>*> in{&a, &b};
        for (auto& [name, p] : params.params) in.push_back(p);
        reps["discriminator"] = gradcheck([&] { return ops::mean(ops::log_clamped(d(a, b), 1e-7)); }, in, 10);
    }
    {
        std::mt19937_64 rng(5);
        Var<double> target(rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1));
        Var<double> gen(rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1), true);
        std::vector<Var<double>*> in{&gen};
        reps["l1"] = gradcheck([&] { return l1_loss(target, gen); }, in, 48, 1e-3, 1e-6, 1, [&](std::size_t, std::size_t i) {
            return std::abs(gen.value()[i] - target.value()[i]) < 1e-6;
        });
    }
    {
        FeatureExtractor<double> fx(tiny_extractor());
        std::mt19937_64 rng(6);
        Var<double> target(rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1));
        Var<double> gen(rand_uniform<double>(Shape{1, 3, 4, 4}, rng, -1, 1), true);
        std::vector<Var<double>*> in{&gen};
        reps["perceptual"] = gradcheck([&] { return perceptual_loss(fx, target, gen); }, in, 48);
    }
    const double secs = seconds_since(t0);
    bool ok = secs < 120.0;
    std::string detail;
    for (const auto& [name, r] : reps) {
        ok = ok && r.checked > 0 && r.pass_fraction() >= 0.95;
        detail += name + " " + std::to_string(r.passed) + "/" + std::to_string(r.checked) + ", ";
    }
    return {ok, detail + fmt(secs) + " s"};
}

Outcome criterion3() {
    GeneratorConfig c;
    c.base_channels = 8;
    c.sab_blocks = 2;
    c.image_height = c.image_width = 32;
    c.seed = 42;
    SanGenerator<float> g(c);
    std::mt19937_64 rng(10);
    const Shape s{2, 8, 8, 8};
    Var<float> app(randn<float>(s, rng)), sem(randn<float>(s, rng));
    auto [a0, s0] = g.block(0).update(app, sem, Var<float>(Tensor<float>(s, 0.0f)), Mode::eval);
    const bool zero_ok = std::memcmp(a0.value().data(), app.value().data(), app.value().size() * sizeof(float)) == 0;
    auto [a1, s1] = g.block(1).update(app, sem, Var<float>(Tensor<float>(s, 1.0f)), Mode::eval);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < app.value().size(); ++i) exact += a1.value()[i] == app.value()[i] + sem.value()[i];
    return {zero_ok && exact == app.value().size(),
            std::string("M=0 bit-identical ") + (zero_ok ? "yes" : "no") + ", M=1 exact sums " + std::to_string(exact) + "/" +
                std::to_string(app.value().size())};
}

FeatureStats diag_stats(std::vector<double> mean, std::vector<double> var) {
    FeatureStats s;
    s.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), Eigen::Index(mean.size()));
    s.cov = Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(var.data(), Eigen::Index(var.size()))).asDiagonal();
    s.count = 100;
    return s;
}

Outcome criterion4() {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0, 1);
    Eigen::MatrixXd x(30, 6);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    const auto s = fit_stats(x);
    const double same = fid(s, s);
    const double one_d = fid(diag_stats({0}, {1}), diag_stats({1}, {1}));
    double worst_diag = 0;
    for (int trial = 0; trial < 5; ++trial) {
        std::uniform_real_distribution<double> mu(-2, 2), var(0.1, 4);
        std::vector<double> ma(5), mb(5), va(5), vb(5);
        double oracle = 0;
        for (int i = 0; i < 5; ++i) {
            ma[i] = mu(rng), mb[i] = mu(rng), va[i] = var(rng), vb[i] = var(rng);
            oracle += (ma[i] - mb[i]) * (ma[i] - mb[i]) + std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
        }
        worst_diag = std::max(worst_diag, std::abs(fid(diag_stats(ma, va), diag_stats(mb, vb)) - oracle));
    }
    const bool ok = std::abs(same) <= 1e-6 && near(one_d, 1.0, 1e-6) && worst_diag <= 1e-5;
    return {ok, "identical " + fmt(same) + ", 1-D " + fmt(one_d) + ", diagonal max |err| " + fmt(worst_diag)};
}

// ------------------------------------------------------------ training runs

struct Runs {
    fs::path work;
    DatasetManifest train, test;
    std::map<std::string, TrainResult> done;
    std::map<std::string, double> seconds;

    explicit Runs(fs::path w) : work(std::move(w)) {
        const Config c;
        synth_generate(synth_config_from(c), work / "data");
        train = load_dataset(work / "data", "train");
        test = load_dataset(work / "data", "test");
    }

    static std::string key(const std::vector<std::string>& sets) {
        std::string k;
        for (const auto& s : sets) k += (k.empty() ? "" : ",") + s;
        return k;
    }

    const TrainResult& get(const std::vector<std::string>& sets) {
        const std::string k = key(sets);
        if (auto it = done.find(k); it != done.end()) return it->second;
        Config c;
        for (const auto& s : sets) c.set_override(s);
        std::string dir = k;
        for (char& ch : dir)
            if (ch == '=' || ch == ',' || ch == '.') ch = '_';
        std::cerr << "[acceptance] training " << k << std::endl;
        const auto t0 = Clock::now();
        auto r = san::train(c, train, test, work / "runs" / dir);
        seconds[k] = seconds_since(t0);
        std::cerr << "[acceptance]   " << fmt(seconds[k]) << " s, masked_l1 " << fmt(r.eval.front().masked_l1) << " -> "
                  << fmt(r.eval.back().masked_l1) << ", fid " << fmt(r.eval.front().fid) << " -> " << fmt(r.eval.back().fid)
                  << std::endl;
        return done.emplace(k, std::move(r)).first->second;
    }

    double final_l1(const std::vector<std::string>& sets) { return get(sets).eval.back().masked_l1; }
};

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

std::string seed_set(std::uint64_t s) { return "seed=" + std::to_string(s); }

Outcome criterion5(Runs& runs) {
    const Config c;
    const bool preset = c.integer("synth.identities") == 20 && c.integer("synth.poses") == 8 && c.integer("image.height") == 32 &&
                        c.integer("image.width") == 32 && c.integer("train.epochs") == 30 && c.integer("train.batch") == 8;
    const auto& r = runs.get({seed_set(1)});
    const double secs = runs.seconds[Runs::key({seed_set(1)})];
    const auto& first = r.eval.front();
    const auto& last = r.eval.back();
    const double l1_ratio = last.masked_l1 / first.masked_l1, fid_ratio = last.fid / first.fid;
    const bool ok = preset && r.eval.size() == 30 && secs <= 1800 && l1_ratio < 0.5 && fid_ratio < 0.5;
    return {ok, fmt(secs) + " s; masked l1 " + fmt(first.masked_l1) + " -> " + fmt(last.masked_l1) + " (ratio " + fmt(l1_ratio) +
                    "); fid " + fmt(first.fid) + " -> " + fmt(last.fid) + " (ratio " + fmt(fid_ratio) + ")"};
}

Outcome criterion6(Runs& runs) {
    double full = 0, nomask = 0;
    std::string per;
    for (auto s : kSeeds) {
        const double a = runs.final_l1({seed_set(s)}), b = runs.final_l1({seed_set(s), "train.disable_mask=true"});
        full += a / 3, nomask += b / 3;
        per += " [" + std::to_string(s) + ": " + fmt(a) + " vs " + fmt(b) + "]";
    }
    return {full <= nomask, "mean masked l1 full " + fmt(full) + ", disable_mask " + fmt(nomask) + ";" + per};
}

Outcome criterion7(Runs& runs) {
    std::map<int, double> mean;
    std::ofstream csv(runs.work / "sab_sweep.csv");
    csv << "T,seed,final_masked_l1,final_fid\n";
    for (int t : {1, 3, 5})
        for (auto s : kSeeds) {
            std::vector<std::string> sets{seed_set(s)};
            if (t != 5) sets.push_back("model.sab_blocks=" + std::to_string(t));
            const auto& r = runs.get(sets);
            csv << t << ',' << s << ',' << format_real(r.eval.back().masked_l1) << ',' << format_real(r.eval.back().fid) << '\n';
            mean[t] += r.eval.back().masked_l1 / 3;
        }
    csv.close();
    std::ofstream md(runs.work / "sab_sweep.md");
    md << "| T | mean final masked L1 |\n|---|---|\n";
    for (const auto& [t, v] : mean) md << "| " << t << " | " << format_real(v) << " |\n";
    md.close();
    const bool report = fs::exists(runs.work / "sab_sweep.csv") && fs::exists(runs.work / "sab_sweep.md");
    return {report && mean[5] <= mean[1], "mean final masked l1 T=1 " + fmt(mean[1]) + ", T=3 " + fmt(mean[3]) + ", T=5 " +
                                              fmt(mean[5]) + "; report " + (runs.work / "sab_sweep.md").string()};
}

Outcome criterion8(Runs& runs) {
    const auto& g = runs.get({seed_set(1)});
    Config c;
    c.set("reid.seeds", "1,2,3");
    const auto base = run_reid(c, runs.train, runs.test, runs.work / "reid_base");
    c.set("reid.alpha", "2");
    c.set("reid.generator", g.checkpoint.string());
    const auto aug = run_reid(c, runs.train, runs.test, runs.work / "reid_aug");

    // Identity-matrix KISSME against Euclidean on real embeddings.
    const auto test = read_samples(runs.test);
    const auto ide = train_ide(read_samples(runs.train), ide_config_from(Config{}));
    const Eigen::MatrixXd e = embed_samples(*ide.embedder, test);
    const MetricModel euclid, identity{MetricKind::kissme, Eigen::MatrixXd::Identity(e.cols(), e.cols())};
    bool same_rank = true;
    for (Eigen::Index q = 0; q < e.rows(); ++q) {
        auto order = [&](const MetricModel& m) {
            std::vector<std::pair<double, Eigen::Index>> v;
            for (Eigen::Index j = 0; j < e.rows(); ++j) v.emplace_back(distance(m, e.row(q).transpose(), e.row(j).transpose()), j);
            std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
            std::vector<Eigen::Index> idx;
            for (const auto& p : v) idx.push_back(p.second);
            return idx;
        };
        same_rank = same_rank && order(euclid) == order(identity);
    }
    std::string per;
    for (std::size_t i = 0; i < base.per_seed.size(); ++i)
        per += " [" + std::to_string(base.per_seed[i].seed) + ": " + fmt(base.per_seed[i].report.rank1) + " vs " +
               fmt(aug.per_seed[i].report.rank1) + "]";
    return {aug.mean.rank1 >= base.mean.rank1 && same_rank,
            "mean rank-1 baseline " + fmt(base.mean.rank1) + ", alpha=2 " + fmt(aug.mean.rank1) + ";" + per +
                "; identity KISSME ranking equals Euclidean: " + (same_rank ? "yes" : "no")};
}

// ------------------------------------------------------------ criterion 9

int run_cli(const std::string& name, const fs::path& out, std::vector<std::string> sets, std::optional<fs::path> config = {}) {
    Command c;
    c.name = name;
    c.out = out;
    c.overrides = std::move(sets);
    c.config = std::move(config);
    std::ostringstream os;
    return run_command(c, os, std::cerr);
}

Outcome criterion9(const fs::path& work) {
    const fs::path w = work / "repro";
    fs::remove_all(w);
    const std::vector<std::string> small{"model.base_channels=8", "model.disc_channels=8", "model.sab_blocks=2",
                                         "train.epochs=3",        "train.decay_start=1",   "train.pairs_per_epoch=16",
                                         "train.eval_pairs=8",    "synth.identities=5",    "synth.test_identities=3",
                                         "synth.poses=4",         "reid.epochs=2",         "reid.seeds=1,2",
                                         "data.root=" + (w / "data").string()};
    std::vector<std::string> failed;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) failed.push_back(what);
    };
    auto same = [](const fs::path& a, const fs::path& b) {
        return fs::exists(a) && san::testing::read_bytes(a) == san::testing::read_bytes(b);
    };
    check(run_cli("synth", w / "data", small) == 0, "synth");
    check(run_cli("train", w / "t1", small) == 0, "train");
    check(run_cli("train", w / "t2", {}, w / "t1" / "resolved.cfg") == 0, "train rerun");
    check(same(w / "t1" / "metrics.csv", w / "t2" / "metrics.csv"), "metrics.csv");
    check(same(w / "t1" / "eval.csv", w / "t2" / "eval.csv"), "eval.csv");

    auto eval_sets = small;
    eval_sets.push_back("evaluate.checkpoint=" + (w / "t1" / "model.ckpt").string());
    check(run_cli("evaluate", w / "e1", eval_sets) == 0, "evaluate");
    check(run_cli("evaluate", w / "e2", {}, w / "e1" / "resolved.cfg") == 0, "evaluate rerun");
    check(same(w / "e1" / "evaluate.json", w / "e2" / "evaluate.json"), "evaluate.json");

    auto reid_sets = small;
    reid_sets.push_back("reid.alpha=2");
    reid_sets.push_back("reid.generator=" + (w / "t1" / "model.ckpt").string());
    check(run_cli("reid-eval", w / "r1", reid_sets) == 0, "reid-eval");
    check(run_cli("reid-eval", w / "r2", {}, w / "r1" / "resolved.cfg") == 0, "reid-eval rerun");
    check(same(w / "r1" / "reid.json", w / "r2" / "reid.json"), "reid.json");

    // Checkpoint save/load round trip.
    auto first = load_generator(w / "t1" / "model.ckpt");
    const auto m = load_dataset(w / "data", "test");
    const auto samples = read_samples(m);
    const auto pairs = make_pairs(m, 5, 8);
    const auto metric = metric_extractor<float>(first.train.metric_seed);
    std::vector<Tensor<float>> o1, o2;
    const auto r1 = evaluate_generator(*first.generator, samples, pairs, metric, false, 16, &o1);
    Checkpoint ck;
    ck.config_text = first.config.to_text();
    store(ck, first.generator->parameters());
    save_checkpoint(w / "again.ckpt", ck);
    auto second = load_generator(w / "again.ckpt");
    const auto r2 = evaluate_generator(*second.generator, samples, pairs, metric, false, 16, &o2);
    check(std::memcmp(&r1.masked_l1, &r2.masked_l1, sizeof(double)) == 0 && std::memcmp(&r1.fid, &r2.fid, sizeof(double)) == 0 &&
              std::memcmp(&r1.lpips_mean, &r2.lpips_mean, sizeof(double)) == 0,
          "round-trip metrics");
    bool outputs = o1.size() == o2.size();
    for (std::size_t i = 0; outputs && i < o1.size(); ++i) outputs = o1[i] == o2[i];
    check(outputs, "round-trip outputs");

    std::string detail = failed.empty() ? "CSV, JSON and round-trip outputs bit-identical" : "mismatch:";
    for (const auto& f : failed) detail += " " + f;
    return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
    std::set<int> only;
    for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));
    fs::create_directories(work);

    std::unique_ptr<Runs> runs;
    auto shared = [&]() -> Runs& {
        if (!runs) runs = std::make_unique<Runs>(work);
        return *runs;
    };
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"loss oracles", criterion1},
        {"gradient checks", criterion2},
        {"attention pass-through", criterion3},
        {"FID analytic cases", criterion4},
        {"end-to-end synthetic training", [&] { return criterion5(shared()); }},
        {"mask ablation direction", [&] { return criterion6(shared()); }},
        {"attention block count sweep", [&] { return criterion7(shared()); }},
        {"re-identification augmentation", [&] { return criterion8(shared()); }},
        {"reproducibility", [&] { return criterion9(work); }},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << "CRITERION " << n << ' ' << (o.pass ? "PASS" : "FAIL") << ' ' << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
