#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "san/error.hpp"

namespace san {

namespace fs = std::filesystem;

/// Flat key = value run configuration. Only registered keys are accepted.
/// Resolution order: defaults, preset, file, overrides.
class Config {
public:
    Config() : values_(defaults()) {}

    /// Built-in defaults for every recognised key.
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d{
            {"preset", "synthetic"},
            {"seed", "7"},
            {"data.root", "data"},
            {"image.height", "32"},
            {"image.width", "32"},
            {"image.labels", "20"},
            {"synth.identities", "20"},
            {"synth.test_identities", "10"},
            {"synth.poses", "8"},
            {"synth.background_variation", "0.5"},
            {"model.sab_blocks", "5"},
            {"model.base_channels", "64"},
            {"model.disc_channels", "16"},
            {"model.down_stages", "2"},
            {"model.norm", "batch"},
            {"train.epochs", "30"},
            {"train.decay_start", "15"},
            {"train.batch", "8"},
            {"train.lr", "0.0003"},
            {"train.beta1", "0.5"},
            {"train.beta2", "0.999"},
            {"train.pairs_per_epoch", "160"},
            {"train.checkpoint_every", "10"},
            {"train.label_smoothing", "true"},
            {"train.disable_perceptual", "false"},
            {"train.disable_mask", "false"},
            {"train.eval_pairs", "64"},
            {"train.resume", ""},
            {"loss.alpha", "1"},
            {"loss.beta", "15"},
            {"loss.gamma", "5"},
            {"loss.extractor_seed", "1234"},
            {"metrics.extractor_seed", "4321"},
            {"generate.checkpoint", ""},
            {"generate.split", "test"},
            {"generate.count", "8"},
            {"generate.source_image", ""},
            {"generate.source_parsing", ""},
            {"generate.target_parsing", ""},
            {"generate.target_mask", ""},
            {"evaluate.checkpoint", ""},
            {"evaluate.split", "test"},
            {"evaluate.pairs", "64"},
            {"augment.checkpoint", ""},
            {"augment.alpha", "2"},
            {"reid.embedding_dim", "32"},
            {"reid.channels", "16"},
            {"reid.epochs", "12"},
            {"reid.batch", "16"},
            {"reid.lr", "0.001"},
            {"reid.metric", "euclidean"},
            {"reid.alpha", "1"},
            {"reid.seeds", "1,2,3"},
            {"reid.generator", ""},
        };
        return d;
    }

    /// Preset rows applied on top of the defaults.
    static std::map<std::string, std::string> preset(const std::string& name) {
        if (name == "synthetic") return {};
        if (name == "market")
            return {{"image.height", "128"}, {"image.width", "64"}, {"model.base_channels", "64"},
                    {"model.disc_channels", "64"}, {"train.epochs", "600"}, {"train.decay_start", "300"},
                    {"train.batch", "32"}, {"train.lr", "0.0002"}, {"loss.alpha", "10"}, {"loss.beta", "15"},
                    {"loss.gamma", "5"}};
        if (name == "fashion")
            return {{"image.height", "256"}, {"image.width", "256"}, {"model.base_channels", "64"},
                    {"model.disc_channels", "64"}, {"train.epochs", "1000"}, {"train.decay_start", "500"},
                    {"train.batch", "8"}, {"train.lr", "0.0002"}, {"loss.alpha", "15"}, {"loss.beta", "1"},
                    {"loss.gamma", "5"}};
        throw ConfigError("unknown preset '" + name + "' (expected synthetic, market or fashion)");
    }

    /// Applies the preset named by the text's `preset` key (if any), then the
    /// text itself.
    static Config from_text(const std::string& text, const std::string& origin = "<text>") {
        return resolve(text, origin, {}, std::nullopt);
    }

    static Config from_file(const fs::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot read config file " + path.string());
        std::stringstream ss;
        ss << is.rdbuf();
        return from_text(ss.str(), path.string());
    }

    /// Command-line resolution. A preset named in the overrides wins over one
    /// named in the file; preset rows never override explicit keys.
    static Config resolve(const std::string& file_text, const std::string& origin,
                          const std::vector<std::string>& overrides, const std::optional<std::uint64_t>& seed) {
        auto rows = parse(file_text, origin);
        std::vector<std::pair<std::string, std::string>> sets;
        for (const auto& o : overrides) {
            auto eq = o.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + o + "'");
            std::string key = trim(o.substr(0, eq));
            if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
            sets.emplace_back(key, trim(o.substr(eq + 1)));
        }
        std::string preset_name = rows.count("preset") ? rows["preset"] : "synthetic";
        for (const auto& [k, v] : sets)
            if (k == "preset") preset_name = v;
        Config c;
        c.apply_preset(preset_name);
        for (const auto& [k, v] : rows)
            if (k != "preset") c.set(k, v);
        for (const auto& [k, v] : sets)
            if (k != "preset") c.set(k, v);
        if (seed) c.set("seed", std::to_string(*seed));
        return c;
    }

    void apply_preset(const std::string& name) {
        for (const auto& [k, v] : preset(name)) values_[k] = v;
        values_["preset"] = name;
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    /// Parses "key=value" as given on the command line.
    void set_override(const std::string& assignment) {
        auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    long long integer(const std::string& key) const {
        const std::string& s = str(key);
        long long v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) bad(key, "an integer");
        return v;
    }

    std::uint64_t u64(const std::string& key) const {
        const std::string& s = str(key);
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) bad(key, "a nonnegative integer");
        return v;
    }

    double real(const std::string& key) const {
        const std::string& s = str(key);
        double v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) bad(key, "a number");
        return v;
    }

    bool boolean(const std::string& key) const {
        const std::string& s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        bad(key, "true or false");
    }

    std::vector<std::uint64_t> u64_list(const std::string& key) const {
        std::vector<std::uint64_t> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            std::uint64_t v = 0;
            auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
            if (item.empty() || ec != std::errc{} || p != item.data() + item.size()) bad(key, "a comma-separated list of integers");
            out.push_back(v);
        }
        if (out.empty()) bad(key, "a non-empty list");
        return out;
    }

    /// Sorted "key = value" lines; feeding this back through from_text
    /// reproduces the same configuration.
    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }
    bool operator==(const Config&) const = default;

private:
    std::map<std::string, std::string> values_;

    [[noreturn]] void bad(const std::string& key, const char* expected) const {
        throw ConfigError("config key '" + key + "' must be " + expected + ", got '" + str(key) + "'");
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    static std::map<std::string, std::string> parse(const std::string& text, const std::string& origin) {
        std::map<std::string, std::string> rows;
        std::stringstream ss(text);
        std::string line;
        int lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            if (!defaults().count(key))
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
            rows[key] = trim(line.substr(eq + 1));
        }
        return rows;
    }
};

}  // namespace san
