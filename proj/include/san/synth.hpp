#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "san/data.hpp"
#include "san/nn.hpp"

// Procedural stand-in for a person dataset: each identity is a stick-like
// figure with its own clothing palette and proportions, each pose moves the
// limbs and shifts the figure. Semantic maps and masks are exact by
// construction.

namespace san {

struct SynthConfig {
    int image_height = 32;
    int image_width = 32;
    int identities = 20;        // train split
    int test_identities = 10;   // held-out split, disjoint identities
    int poses = 8;
    int label_count = labels::count;
    std::uint64_t seed = 7;
    double background_variation = 0.5;  // 0 = flat backgrounds
};

using Rgb = std::array<double, 3>;

inline double color_distance(const Rgb& a, const Rgb& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

struct IdentityStyle {
    Rgb torso{};
    Rgb torso_secondary{};
    int pattern = 0;  // 0 solid, 1 horizontal stripes, 2 vertical stripes
    Rgb pants{};
    Rgb skin{};
    bool bag = false;
    Rgb bag_color{};
    double scale = 1.0;
    double torso_width = 1.0;
};

struct PoseParams {
    double left_arm = 0, right_arm = 0;  // radians from straight down
    double left_leg = 0, right_leg = 0;
    double dx = 0, dy = 0;               // pixels
};

/// Torso colors chosen by farthest-point selection from a seeded candidate
/// pool, so any two identities are well separated in RGB.
inline std::vector<Rgb> torso_palette(int count, std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, 101));
    std::uniform_real_distribution<double> u(0.05, 0.95);
    std::vector<Rgb> pool(2048);
    for (auto& c : pool) c = {u(rng), u(rng), u(rng)};
    std::vector<Rgb> out{pool[0]};
    std::vector<double> nearest(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) nearest[i] = color_distance(pool[i], out[0]);
    while (static_cast<int>(out.size()) < count) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < pool.size(); ++i)
            if (nearest[i] > nearest[best]) best = i;
        out.push_back(pool[best]);
        for (std::size_t i = 0; i < pool.size(); ++i)
            nearest[i] = std::min(nearest[i], color_distance(pool[i], pool[best]));
    }
    return out;
}

inline std::vector<IdentityStyle> identity_styles(const SynthConfig& cfg) {
    const int total = cfg.identities + cfg.test_identities;
    const auto palette = torso_palette(total, cfg.seed);
    std::mt19937_64 rng(derive_seed(cfg.seed, 102));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::array<Rgb, 4> skins{{{0.95, 0.80, 0.69}, {0.85, 0.64, 0.50}, {0.62, 0.44, 0.32}, {0.40, 0.28, 0.20}}};
    std::vector<IdentityStyle> styles(static_cast<std::size_t>(total));
    for (int i = 0; i < total; ++i) {
        auto& s = styles[static_cast<std::size_t>(i)];
        s.torso = palette[static_cast<std::size_t>(i)];
        for (int c = 0; c < 3; ++c) s.torso_secondary[c] = 0.5 * s.torso[c] + 0.5 * (u(rng) < 0.5 ? 0.05 : 0.95);
        s.pattern = static_cast<int>(u(rng) * 3.0) % 3;
        s.pants = {0.1 + 0.6 * u(rng), 0.1 + 0.6 * u(rng), 0.1 + 0.6 * u(rng)};
        s.skin = skins[static_cast<std::size_t>(u(rng) * skins.size()) % skins.size()];
        s.bag = u(rng) < 0.4;
        s.bag_color = {u(rng), u(rng), u(rng)};
        s.scale = 0.9 + 0.15 * u(rng);
        s.torso_width = 0.85 + 0.3 * u(rng);
    }
    return styles;
}

inline PoseParams pose_params(const SynthConfig& cfg, int identity, int pose) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 103, static_cast<std::uint64_t>(identity) * 1000 + pose));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double deg = 3.14159265358979323846 / 180.0;
    PoseParams p;
    // Positive angles swing a limb toward +x, so the left side uses negatives.
    p.left_arm = -(30.0 + 50.0 * u(rng)) * deg;
    p.right_arm = (30.0 + 50.0 * u(rng)) * deg;
    p.left_leg = -(10.0 + 15.0 * u(rng)) * deg;
    p.right_leg = (10.0 + 15.0 * u(rng)) * deg;
    p.dx = 0.12 * cfg.image_width * u(rng);
    p.dy = 0.05 * cfg.image_height * u(rng);
    return p;
}

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy + 1e-12), 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

struct RenderedRecord {
    Raster image;
    IndexedMap parsing;
};

/// Rasterizes one (identity, pose). Labels are decided per pixel centre;
/// later parts are painted over earlier ones.
inline RenderedRecord render_figure(const SynthConfig& cfg, const IdentityStyle& st, const PoseParams& p,
                                    std::uint64_t noise_seed) {
    const int H = cfg.image_height, W = cfg.image_width;
    const double u = H * st.scale;  // figure unit
    const double cx = W / 2.0 + p.dx;
    const double top = (H - 0.92 * u) / 2.0 + p.dy;
    const double head_r = 0.085 * u;
    const double head_cy = top + head_r;
    const double torso_top = head_cy + head_r + 0.01 * u;
    const double torso_len = 0.33 * u;
    const double torso_half = 0.11 * u * st.torso_width * (double(W) / H < 0.75 ? 1.0 : 0.8);
    const double hip_y = torso_top + torso_len;
    const double arm_len = 0.3 * u, arm_thick = 0.035 * u + 0.5;
    const double leg_len = 0.4 * u, leg_thick = 0.045 * u + 0.5;

    const double sh_y = torso_top + 0.04 * u;
    const double lax = cx - torso_half - arm_thick * 0.5, rax = cx + torso_half + arm_thick * 0.5;
    const double llx = cx - torso_half * 0.5, rlx = cx + torso_half * 0.5;
    auto limb_end = [](double x, double y, double len, double angle) {
        return std::array<double, 2>{x + len * std::sin(angle), y + len * std::cos(angle)};
    };
    const auto la = limb_end(lax, sh_y, arm_len, p.left_arm);
    const auto ra = limb_end(rax, sh_y, arm_len, p.right_arm);
    const auto ll = limb_end(llx, hip_y, leg_len, p.left_leg);
    const auto rl = limb_end(rlx, hip_y, leg_len, p.right_leg);

    std::mt19937_64 rng(noise_seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double bg_level = 0.3 + 0.4 * uni(rng);
    const Rgb bg_tint{bg_level + 0.1 * (uni(rng) - 0.5), bg_level + 0.1 * (uni(rng) - 0.5),
                      bg_level + 0.1 * (uni(rng) - 0.5)};
    const double grad_x = cfg.background_variation * 0.3 * (uni(rng) - 0.5);
    const double noise_amp = cfg.background_variation * 0.25;

    RenderedRecord out{Raster{W, H, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * 3)},
                       IndexedMap{H, W, std::vector<int>(static_cast<std::size_t>(W) * H, labels::background)}};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            int label = labels::background;
            Rgb color{};
            if (detail::segment_distance(px, py, llx, hip_y, ll[0], ll[1]) <= leg_thick) {
                label = labels::left_leg;
                color = st.pants;
            }
            if (detail::segment_distance(px, py, rlx, hip_y, rl[0], rl[1]) <= leg_thick) {
                label = labels::right_leg;
                color = st.pants;
            }
            if (std::abs(px - cx) <= torso_half && py >= torso_top && py <= hip_y) {
                label = labels::upper_clothes;
                const bool alt = (st.pattern == 1 && static_cast<int>((py - torso_top) / 2.0) % 2 == 1) ||
                                 (st.pattern == 2 && static_cast<int>((px - cx + torso_half) / 2.0) % 2 == 1);
                color = alt ? st.torso_secondary : st.torso;
            }
            if (detail::segment_distance(px, py, lax, sh_y, la[0], la[1]) <= arm_thick) {
                label = labels::left_arm;
                color = st.skin;
            }
            if (detail::segment_distance(px, py, rax, sh_y, ra[0], ra[1]) <= arm_thick) {
                label = labels::right_arm;
                color = st.skin;
            }
            if (std::hypot(px - cx, py - head_cy) <= head_r) {
                label = labels::face;
                color = st.skin;
            }
            if (st.bag && px >= cx + torso_half && px <= cx + torso_half + 0.09 * u && py >= hip_y - 0.12 * u &&
                py <= hip_y + 0.02 * u) {
                label = labels::accessory;
                color = st.bag_color;
            }
            if (label == labels::background) {
                const double shade = grad_x * (px / W - 0.5) * 2.0;
                for (int c = 0; c < 3; ++c) color[c] = bg_tint[c] + shade + noise_amp * (uni(rng) - 0.5);
            } else {
                const double jitter = 0.03 * (uni(rng) - 0.5);
                for (int c = 0; c < 3; ++c) color[c] += jitter;
            }
            out.parsing.labels[static_cast<std::size_t>(y) * W + x] = label;
            for (int c = 0; c < 3; ++c)
                out.image.pixels[(static_cast<std::size_t>(y) * W + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(std::clamp(color[c], 0.0, 1.0) * 255.0));
        }
    return out;
}

inline std::string identity_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d", index);
    return buf;
}

/// Writes the train and test splits under `out_root` and returns the train
/// manifest. Output is a pure function of `cfg`.
inline DatasetManifest synth_generate(const SynthConfig& cfg, const fs::path& out_root) {
    if (cfg.identities <= 0) throw ConfigError("synthetic dataset needs at least one identity");
    if (cfg.poses <= 0 || cfg.test_identities < 0 || cfg.image_height <= 0 || cfg.image_width <= 0)
        throw ConfigError("synthetic dataset counts must be positive");
    if (cfg.label_count <= labels::right_leg) throw ConfigError("label count too small for the synthetic layout");

    const auto styles = identity_styles(cfg);
    DatasetManifest train_manifest;
    for (const std::string split : {"train", "test"}) {
        DatasetManifest m;
        m.root = out_root;
        m.split = split;
        m.label_count = cfg.label_count;
        m.seed = cfg.seed;
        m.image_height = cfg.image_height;
        m.image_width = cfg.image_width;
        const fs::path dir = m.split_dir();
        std::error_code ec;
        for (const char* sub : {"images", "parsing", "masks"}) {
            fs::create_directories(dir / sub, ec);
            if (ec) throw DataError("cannot create " + (dir / sub).string() + ": " + ec.message());
        }
        const int first = split == "train" ? 0 : cfg.identities;
        const int count = split == "train" ? cfg.identities : cfg.test_identities;
        for (int id = first; id < first + count; ++id)
            for (int pose = 0; pose < cfg.poses; ++pose) {
                Record rec;
                rec.identity = identity_name(id);
                rec.pose = pose;
                const std::string file = rec.key() + ".png";
                rec.image = "images/" + file;
                rec.parsing = "parsing/" + file;
                rec.mask = "masks/" + file;
                const auto rendered =
                    render_figure(cfg, styles[static_cast<std::size_t>(id)], pose_params(cfg, id, pose),
                                  derive_seed(cfg.seed, 104, static_cast<std::uint64_t>(id) * 1000 + pose));
                const SemanticMap map = encode_semantic_onehot(rendered.parsing, cfg.label_count);
                Raster parsing{cfg.image_width, cfg.image_height, 1,
                               std::vector<std::uint8_t>(rendered.parsing.labels.begin(), rendered.parsing.labels.end())};
                write_png(dir / rec.image, rendered.image);
                write_png(dir / rec.parsing, parsing);
                write_png(dir / rec.mask, mask_from_semantic(map).to_raster());
                m.records.push_back(rec);
            }
        write_manifest(m);
        if (split == "train") train_manifest = m;
    }
    return train_manifest;
}

}  // namespace san
