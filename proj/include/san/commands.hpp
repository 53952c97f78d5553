#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "san/reid.hpp"
#include "san/synth.hpp"
#include "san/trainer.hpp"

namespace san {

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> names{"synth", "train", "generate", "evaluate", "reid-train", "reid-eval", "augment"};
    return names;
}

struct Command {
    std::string name;
    std::optional<fs::path> config;
    std::vector<std::string> overrides;
    fs::path out = "out";
    std::optional<std::uint64_t> seed;
};

inline Config resolve_command_config(const Command& cmd) {
    std::string text;
    std::string origin = "<none>";
    if (cmd.config) {
        std::ifstream is(*cmd.config);
        if (!is) throw ConfigError("cannot read config file " + cmd.config->string());
        std::stringstream ss;
        ss << is.rdbuf();
        text = ss.str();
        origin = cmd.config->string();
    }
    return Config::resolve(text, origin, cmd.overrides, cmd.seed);
}

inline SynthConfig synth_config_from(const Config& c) {
    SynthConfig s;
    s.image_height = static_cast<int>(c.integer("image.height"));
    s.image_width = static_cast<int>(c.integer("image.width"));
    s.label_count = static_cast<int>(c.integer("image.labels"));
    s.identities = static_cast<int>(c.integer("synth.identities"));
    s.test_identities = static_cast<int>(c.integer("synth.test_identities"));
    s.poses = static_cast<int>(c.integer("synth.poses"));
    s.background_variation = c.real("synth.background_variation");
    s.seed = c.u64("seed");
    return s;
}

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw DataError("cannot write " + p.string());
    os << text;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

inline const std::string& required_path(const Config& c, const std::string& key) {
    const std::string& v = c.str(key);
    if (v.empty()) throw ConfigError(key + " must name a file");
    return v;
}

/// Source, target and generated images side by side, one row per pair.
inline Raster image_sheet(const std::vector<std::array<Tensor<float>, 3>>& rows) {
    const int h = rows.front()[0].shape().h(), w = rows.front()[0].shape().w();
    Raster sheet{3 * w, h * static_cast<int>(rows.size()), 3, {}};
    sheet.pixels.resize(static_cast<std::size_t>(sheet.width) * sheet.height * 3);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (int col = 0; col < 3; ++col) {
            const Raster img = Image(rows[r][static_cast<std::size_t>(col)]).to_raster();
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        sheet.pixels[((static_cast<std::size_t>(r) * h + y) * sheet.width + col * w + x) * 3 + ch] = img.at(y, x, ch);
        }
    return sheet;
}

inline nlohmann::json report_json(const ReidReport& r) {
    return {{"rank1", r.rank1}, {"rank5", r.rank5}, {"rank10", r.rank10}, {"mAP", r.mAP}};
}

inline int cmd_synth(const Config& c, const fs::path& out, std::ostream& os) {
    synth_generate(synth_config_from(c), out);
    os << "wrote synthetic dataset to " << out.string() << '\n';
    return 0;
}

inline int cmd_train(const Config& c, const fs::path& out, std::ostream& os) {
    const fs::path root = c.str("data.root");
    const auto tr = load_dataset(root, "train");
    const auto te = load_dataset(root, "test");
    TrainOptions opts;
    Config run = c;
    if (!c.str("train.resume").empty()) {
        opts.resume = c.str("train.resume");
        run.set("train.resume", "");
    }
    const auto r = train(run, tr, te, out, opts);
    const auto& last = r.eval.back();
    os << "epoch " << last.epoch << " masked_l1 " << format_real(last.masked_l1) << " fid " << format_real(last.fid) << '\n';
    os << "checkpoint " << r.checkpoint.string() << '\n';
    return 0;
}

inline int cmd_generate(const Config& c, const fs::path& out, std::ostream& os) {
    auto g = load_generator(required_path(c, "generate.checkpoint"));
    NoGradGuard ng;
    std::vector<std::array<Tensor<float>, 3>> rows;
    if (!c.str("generate.source_image").empty()) {
        const int labels = g.train.generator.label_count;
        Sample src;
        src.image = Image::from_raster(read_png(c.str("generate.source_image")));
        src.map = encode_semantic_onehot(decode_parsing(read_png(required_path(c, "generate.source_parsing"))), labels);
        src.mask = mask_from_semantic(src.map);
        Sample tgt;
        tgt.map = encode_semantic_onehot(decode_parsing(read_png(required_path(c, "generate.target_parsing"))), labels);
        tgt.mask = c.str("generate.target_mask").empty() ? mask_from_semantic(tgt.map)
                                                          : decode_mask(read_png(c.str("generate.target_mask")), c.str("generate.target_mask"));
        tgt.image = Image(Tensor<float>(Shape{1, 3, tgt.map.height(), tgt.map.width()}));
        const std::vector<Sample> samples{src, tgt};
        const std::vector<PairRef> pair{{0, 1}};
        auto b = make_batch<float>(samples, pair, g.train.disable_mask);
        const Tensor<float> fake =
            g.generator->generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, Mode::eval).value();
        write_png(out / "generated.png", Image(fake).to_raster());
        // The middle column shows the target mask in place of a target image.
        Tensor<float> shown(fake.shape(), -1.0f);
        const Tensor<float> tm = tgt.mask.to_tensor<float>();
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < tm.shape().h(); ++y)
                for (int x = 0; x < tm.shape().w(); ++x) shown.at(0, ch, y, x) = tm.at(0, 0, y, x) > 0 ? 1.0f : -1.0f;
        rows.push_back({src.image.tensor(), shown, fake});
    } else {
        const auto m = load_dataset(c.str("data.root"), c.str("generate.split"));
        const auto samples = read_samples(m);
        const auto pairs = make_pairs(m, derive_seed(c.u64("seed"), 12), static_cast<std::size_t>(c.integer("generate.count")));
        fs::create_directories(out / "generated");
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const std::vector<PairRef> one{pairs[i]};
            auto b = make_batch<float>(samples, one, g.train.disable_mask);
            const Tensor<float> fake =
                g.generator->generate(b.source_image, b.source_mask, b.source_map, b.target_mask, b.target_map, Mode::eval).value();
            char name[32];
            std::snprintf(name, sizeof name, "%04zu.png", i);
            write_png(out / "generated" / name, Image(fake).to_raster());
            rows.push_back({samples[pairs[i].source].image.tensor(), samples[pairs[i].target].image.tensor(), fake});
        }
    }
    write_png(out / "sheet.png", image_sheet(rows));
    os << "wrote " << rows.size() << " generated image(s) to " << out.string() << '\n';
    return 0;
}

inline int cmd_evaluate(const Config& c, const fs::path& out, std::ostream& os) {
    auto g = load_generator(required_path(c, "evaluate.checkpoint"));
    const auto m = load_dataset(c.str("data.root"), c.str("evaluate.split"));
    check_manifest(g.train, m);
    const auto samples = read_samples(m);
    const auto pairs = make_pairs(m, derive_seed(c.u64("seed"), 13), static_cast<std::size_t>(c.integer("evaluate.pairs")));
    const std::uint64_t seed = c.u64("metrics.extractor_seed");
    const auto metric = metric_extractor<float>(seed);
    const EvalReport r = evaluate_generator(*g.generator, samples, pairs, metric, g.train.disable_mask);
    const nlohmann::json j{{"fid", r.fid},
                           {"lpips_mean", r.lpips_mean},
                           {"mask_lpips_mean", r.mask_lpips_mean},
                           {"masked_l1", r.masked_l1},
                           {"n_pairs", r.n_pairs},
                           {"extractor_seed", seed}};
    write_json(out / "evaluate.json", j);
    os << j.dump(2) << '\n';
    return 0;
}

inline int cmd_augment(const Config& c, const fs::path& out, std::ostream& os) {
    const auto tr = load_dataset(c.str("data.root"), "train");
    const int alpha = static_cast<int>(c.integer("augment.alpha"));
    if (alpha < 1) throw ConfigError("augment.alpha must be >= 1");
    DatasetManifest m = tr;
    if (alpha > 1) {
        auto g = load_generator(required_path(c, "augment.checkpoint"));
        m = augment(tr, *g.generator, g.train.disable_mask, alpha, c.u64("seed"), out / "data");
    }
    std::size_t synthetic = 0;
    for (const auto& r : m.records) synthetic += r.synthetic;
    const nlohmann::json j{{"alpha", alpha},
                           {"root", m.root.string()},
                           {"records", m.records.size()},
                           {"synthetic", synthetic}};
    write_json(out / "augment.json", j);
    os << j.dump(2) << '\n';
    return 0;
}

inline int cmd_reid_train(const Config& c, const fs::path& out, std::ostream& os) {
    const auto samples = read_samples(load_dataset(c.str("data.root"), "train"));
    IdeResult r = train_ide(samples, ide_config_from(c));
    Checkpoint ck;
    ck.config_text = c.to_text();
    store(ck, r.embedder->parameters());
    save_checkpoint(out / "embedder.ckpt", ck);
    const nlohmann::json j{{"train_accuracy", r.train_accuracy},
                           {"identities", r.identities.names.size()},
                           {"embedding_dim", r.embedder->config().embedding_dim},
                           {"epoch_loss", r.epoch_loss}};
    write_json(out / "reid_train.json", j);
    os << j.dump(2) << '\n';
    return 0;
}

inline int cmd_reid_eval(const Config& c, const fs::path& out, std::ostream& os) {
    const fs::path root = c.str("data.root");
    const auto ex = run_reid(c, load_dataset(root, "train"), load_dataset(root, "test"), out / "work");
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : ex.per_seed) {
        auto j = report_json(s.report);
        j["seed"] = s.seed;
        j["train_accuracy"] = s.train_accuracy;
        j["train_records"] = s.train_records;
        per.push_back(j);
    }
    nlohmann::json j = report_json(ex.mean);
    j["metric_kind"] = to_string(ex.kind);
    j["alpha"] = ex.alpha;
    j["seeds"] = c.u64_list("reid.seeds");
    j["per_seed"] = per;
    write_json(out / "reid.json", j);
    os << j.dump(2) << '\n';
    return 0;
}

}  // namespace detail

/// Resolves the configuration, echoes it to `<out>/resolved.cfg` and runs the
/// command. Returns the process exit status: 0 on success, 2 for config
/// errors, 3 for data errors, 4 for numeric failures, 1 otherwise.
inline int run_command(const Command& cmd, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
    try {
        const Config c = resolve_command_config(cmd);
        fs::create_directories(cmd.out);
        detail::write_text(cmd.out / "resolved.cfg", c.to_text());
        if (cmd.name == "synth") return detail::cmd_synth(c, cmd.out, os);
        if (cmd.name == "train") return detail::cmd_train(c, cmd.out, os);
        if (cmd.name == "generate") return detail::cmd_generate(c, cmd.out, os);
        if (cmd.name == "evaluate") return detail::cmd_evaluate(c, cmd.out, os);
        if (cmd.name == "augment") return detail::cmd_augment(c, cmd.out, os);
        if (cmd.name == "reid-train") return detail::cmd_reid_train(c, cmd.out, os);
        if (cmd.name == "reid-eval") return detail::cmd_reid_eval(c, cmd.out, os);
        throw ConfigError("unknown command '" + cmd.name + "'");
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace san
