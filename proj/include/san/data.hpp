#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "san/image_io.hpp"
#include "san/tensor.hpp"

namespace san {

namespace fs = std::filesystem;

/// Label slots of the 20-class human parsing layout.
namespace labels {
inline constexpr int background = 0;
inline constexpr int upper_clothes = 5;
inline constexpr int accessory = 11;  // the synthetic "bag" reuses this slot
inline constexpr int face = 13;
inline constexpr int left_arm = 14;
inline constexpr int right_arm = 15;
inline constexpr int left_leg = 16;
inline constexpr int right_leg = 17;
inline constexpr int count = 20;
}  // namespace labels

/// 3×H×W picture with values in [-1, 1], stored as a 1×3×H×W tensor.
class Image {
public:
    Image() = default;
    explicit Image(Tensor<float> t) : t_(std::move(t)) {
        const Shape& s = t_.shape();
        if (s.rank() != 4 || s.n() != 1 || s.c() != 3) throw ShapeError("Image expects 1x3xHxW, got " + s.str());
        for (float& v : t_.vec()) {
            if (!std::isfinite(v)) throw NumericError("non-finite pixel value");
            v = std::clamp(v, -1.0f, 1.0f);
        }
    }

    static Image from_raster(const Raster& r) {
        if (r.channels != 3) throw DataError("expected an RGB image");
        Tensor<float> t(Shape{1, 3, r.height, r.width});
        for (int y = 0; y < r.height; ++y)
            for (int x = 0; x < r.width; ++x)
                for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<float>(r.at(y, x, c)) / 127.5f - 1.0f;
        return Image(std::move(t));
    }

    Raster to_raster() const {
        Raster r{width(), height(), 3, {}};
        r.pixels.resize(static_cast<std::size_t>(width()) * height() * 3);
        for (int y = 0; y < height(); ++y)
            for (int x = 0; x < width(); ++x)
                for (int c = 0; c < 3; ++c) {
                    const float v = std::lround((t_.at(0, c, y, x) + 1.0f) * 127.5f);
                    r.pixels[(static_cast<std::size_t>(y) * width() + x) * 3 + c] =
                        static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
                }
        return r;
    }

    int height() const { return t_.shape().h(); }
    int width() const { return t_.shape().w(); }
    const Tensor<float>& tensor() const { return t_; }

private:
    Tensor<float> t_;
};

/// Row-major H×W integer label field.
struct IndexedMap {
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
};

/// L×H×W one-hot label field.
class SemanticMap {
public:
    SemanticMap() = default;
    SemanticMap(int label_count, int height, int width, std::vector<std::uint8_t> onehot)
        : labels_(label_count), height_(height), width_(width), onehot_(std::move(onehot)) {
        if (onehot_.size() != static_cast<std::size_t>(label_count) * height * width)
            throw ShapeError("one-hot buffer size");
    }

    int label_count() const { return labels_; }
    int height() const { return height_; }
    int width() const { return width_; }

    std::uint8_t at(int label, int y, int x) const {
        return onehot_[(static_cast<std::size_t>(label) * height_ + y) * width_ + x];
    }
    const std::vector<std::uint8_t>& data() const { return onehot_; }

    /// Index of the hot channel at (y, x).
    int label_at(int y, int x) const {
        for (int l = 0; l < labels_; ++l)
            if (at(l, y, x)) return l;
        return -1;
    }

    IndexedMap indexed() const {
        IndexedMap m{height_, width_, std::vector<int>(static_cast<std::size_t>(height_) * width_)};
        for (int y = 0; y < height_; ++y)
            for (int x = 0; x < width_; ++x) m.labels[static_cast<std::size_t>(y) * width_ + x] = label_at(y, x);
        return m;
    }

    /// 1×L×H×W network input.
    template <class T>
    Tensor<T> to_tensor() const {
        return Tensor<T>(Shape{1, labels_, height_, width_}, std::vector<T>(onehot_.begin(), onehot_.end()));
    }

private:
    int labels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> onehot_;
};

/// H×W binary foreground field.
class PoseMask {
public:
    PoseMask() = default;
    PoseMask(int height, int width, std::vector<std::uint8_t> bits)
        : height_(height), width_(width), bits_(std::move(bits)) {
        if (bits_.size() != static_cast<std::size_t>(height) * width) throw ShapeError("mask buffer size");
        for (auto b : bits_)
            if (b > 1) throw DataError("pose mask must be binary");
    }
    static PoseMask ones(int height, int width) {
        return PoseMask(height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 1));
    }

    int height() const { return height_; }
    int width() const { return width_; }
    std::uint8_t at(int y, int x) const { return bits_[static_cast<std::size_t>(y) * width_ + x]; }
    const std::vector<std::uint8_t>& data() const { return bits_; }
    bool operator==(const PoseMask&) const = default;

    template <class T>
    Tensor<T> to_tensor() const {
        return Tensor<T>(Shape{1, 1, height_, width_}, std::vector<T>(bits_.begin(), bits_.end()));
    }

    Raster to_raster() const {
        Raster r{width_, height_, 1, std::vector<std::uint8_t>(bits_.size())};
        for (std::size_t i = 0; i < bits_.size(); ++i) r.pixels[i] = bits_[i] ? 255 : 0;
        return r;
    }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> bits_;
};

inline SemanticMap encode_semantic_onehot(const IndexedMap& m, int label_count) {
    if (label_count <= 0) throw ConfigError("label count must be positive");
    std::vector<std::uint8_t> onehot(static_cast<std::size_t>(label_count) * m.height * m.width, 0);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            const int l = m.at(y, x);
            if (l < 0 || l >= label_count)
                throw LabelRangeError("label " + std::to_string(l) + " at pixel (y=" + std::to_string(y) +
                                      ", x=" + std::to_string(x) + ") with L=" + std::to_string(label_count));
            onehot[(static_cast<std::size_t>(l) * m.height + y) * m.width + x] = 1;
        }
    return SemanticMap(label_count, m.height, m.width, std::move(onehot));
}

inline PoseMask mask_from_semantic(const SemanticMap& s, int background_label = labels::background) {
    if (background_label < 0 || background_label >= s.label_count())
        throw LabelRangeError("background label " + std::to_string(background_label));
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(s.height()) * s.width());
    for (int y = 0; y < s.height(); ++y)
        for (int x = 0; x < s.width(); ++x)
            bits[static_cast<std::size_t>(y) * s.width() + x] = s.at(background_label, y, x) ? 0 : 1;
    return PoseMask(s.height(), s.width(), std::move(bits));
}

struct Record {
    std::string image;    // paths relative to the split directory
    std::string parsing;
    std::string mask;
    std::string identity;
    int pose = 0;
    bool synthetic = false;  // produced by augmentation

    std::string key() const { return identity + "_" + (pose < 10 ? "0" : "") + std::to_string(pose); }
};

struct DatasetManifest {
    fs::path root;
    std::string split;
    int label_count = labels::count;
    std::uint64_t seed = 0;
    int image_height = 0;
    int image_width = 0;
    std::vector<Record> records;

    fs::path split_dir() const { return root / split; }

    std::set<std::string> identities() const {
        std::set<std::string> ids;
        for (const auto& r : records) ids.insert(r.identity);
        return ids;
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["split"] = m.split;
    j["label_count"] = m.label_count;
    j["seed"] = m.seed;
    j["image_height"] = m.image_height;
    j["image_width"] = m.image_width;
    j["records"] = nlohmann::json::array();
    for (const auto& r : m.records)
        j["records"].push_back({{"image", r.image},
                                {"parsing", r.parsing},
                                {"mask", r.mask},
                                {"identity", r.identity},
                                {"pose", r.pose},
                                {"synthetic", r.synthetic}});
    return j;
}

inline void write_manifest(const DatasetManifest& m) {
    fs::create_directories(m.split_dir());
    std::ofstream out(m.split_dir() / "manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write manifest under " + m.split_dir().string());
    out << to_json(m).dump(2) << '\n';
}

inline DatasetManifest read_manifest(const fs::path& root, const std::string& split) {
    const fs::path path = root / split / "manifest.json";
    std::ifstream in(path);
    if (!in) throw MissingFileError(path.string());
    nlohmann::json j;
    try {
        in >> j;
        DatasetManifest m;
        m.root = root;
        m.split = split;
        m.label_count = j.at("label_count").get<int>();
        m.seed = j.value("seed", std::uint64_t{0});
        m.image_height = j.at("image_height").get<int>();
        m.image_width = j.at("image_width").get<int>();
        for (const auto& r : j.at("records"))
            m.records.push_back(Record{r.at("image").get<std::string>(), r.at("parsing").get<std::string>(),
                                       r.at("mask").get<std::string>(), r.at("identity").get<std::string>(),
                                       r.at("pose").get<int>(), r.value("synthetic", false)});
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
}

/// Fully decoded record.
struct Sample {
    Image image;
    SemanticMap map;
    PoseMask mask;
    std::string identity;
    int pose = 0;
    bool synthetic = false;
};

inline IndexedMap decode_parsing(const Raster& r) {
    if (r.channels != 1) throw DataError("parsing map must be single-channel");
    IndexedMap m{r.height, r.width, std::vector<int>(r.pixels.begin(), r.pixels.end())};
    return m;
}

inline PoseMask decode_mask(const Raster& r, const std::string& path) {
    if (r.channels != 1) throw DataError("mask must be single-channel: " + path);
    std::vector<std::uint8_t> bits(r.pixels.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (r.pixels[i] != 0 && r.pixels[i] != 255) throw DataError("mask values must be 0 or 255: " + path);
        bits[i] = r.pixels[i] ? 1 : 0;
    }
    return PoseMask(r.height, r.width, std::move(bits));
}

inline Sample read_sample(const DatasetManifest& m, const Record& rec) {
    const fs::path dir = m.split_dir();
    auto checked = [&](const std::string& rel, int channels) {
        const fs::path p = dir / rel;
        Raster r = read_png(p);
        if (r.width != m.image_width || r.height != m.image_height)
            throw SizeMismatchError(p.string() + " is " + std::to_string(r.height) + "x" + std::to_string(r.width) +
                                    ", manifest declares " + std::to_string(m.image_height) + "x" +
                                    std::to_string(m.image_width));
        if (r.channels != channels) throw SizeMismatchError(p.string() + " has " + std::to_string(r.channels) + " channels");
        return r;
    };
    Sample s;
    s.image = Image::from_raster(checked(rec.image, 3));
    try {
        s.map = encode_semantic_onehot(decode_parsing(checked(rec.parsing, 1)), m.label_count);
    } catch (const LabelRangeError& e) {
        throw LabelRangeError((dir / rec.parsing).string() + ": " + e.what());
    }
    s.mask = decode_mask(checked(rec.mask, 1), (dir / rec.mask).string());
    s.identity = rec.identity;
    s.pose = rec.pose;
    s.synthetic = rec.synthetic;
    return s;
}

inline std::vector<Sample> read_samples(const DatasetManifest& m) {
    std::vector<Sample> out;
    out.reserve(m.records.size());
    for (const auto& r : m.records) out.push_back(read_sample(m, r));
    return out;
}

inline std::string other_split(const std::string& split) {
    if (split == "train") return "test";
    if (split == "test") return "train";
    return {};
}

/// Reads and validates `<root>/<split>`: every file present and decodable at
/// the declared size, labels below L, and no identity shared with the
/// complementary split when it exists.
inline DatasetManifest load_dataset(const fs::path& root, const std::string& split) {
    DatasetManifest m = read_manifest(root, split);
    if (m.image_height <= 0 || m.image_width <= 0) throw SizeMismatchError("non-positive image size in manifest");
    for (const auto& rec : m.records) (void)read_sample(m, rec);

    const std::string other = other_split(split);
    if (!other.empty() && fs::exists(root / other / "manifest.json")) {
        const auto mine = m.identities();
        const auto theirs = read_manifest(root, other).identities();
        std::vector<std::string> common;
        std::set_intersection(mine.begin(), mine.end(), theirs.begin(), theirs.end(), std::back_inserter(common));
        if (!common.empty()) throw SplitOverlapError("identity '" + common.front() + "' in both splits");
    }
    return m;
}

/// Ordered (source, target) record indices.
struct PairRef {
    std::size_t source = 0;
    std::size_t target = 0;
    bool operator==(const PairRef&) const = default;
};

/// Every ordered same-identity, distinct-pose pair, in record order.
inline std::vector<PairRef> enumerate_pairs(const std::vector<Record>& records) {
    std::map<std::string, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < records.size(); ++i) by_id[records[i].identity].push_back(i);
    std::vector<PairRef> pairs;
    for (const auto& [id, idx] : by_id)
        for (std::size_t a : idx)
            for (std::size_t b : idx)
                if (a != b && records[a].pose != records[b].pose) pairs.push_back({a, b});
    return pairs;
}

/// Seeded selection of min(max_pairs, available) ordered pairs, sampled
/// uniformly without replacement and returned in shuffled order.
inline std::vector<PairRef> make_pairs(const DatasetManifest& m, std::uint64_t seed, std::size_t max_pairs) {
    std::vector<PairRef> all = enumerate_pairs(m.records);
    if (all.empty()) throw EmptyResultError("no identity has two or more poses in split '" + m.split + "'");
    std::mt19937_64 rng(seed);
    const std::size_t k = std::min(max_pairs, all.size());
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, all.size() - 1);
        std::swap(all[i], all[pick(rng)]);
    }
    all.resize(k);
    return all;
}

}  // namespace san
