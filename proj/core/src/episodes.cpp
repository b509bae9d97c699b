#include "protoseg/episodes.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "protoseg/pnm.hpp"
#include "protoseg/rng.hpp"

namespace protoseg {

namespace {

bool inside_shape(int cls, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (cls) {
        case 1:  // circle
            return dx * dx + dy * dy <= r * r;
        case 2:  // square
            return ax <= 0.8 * r && ay <= 0.8 * r;
        case 3:  // triangle (apex up)
            return dy >= -r && dy <= r && ax <= 0.55 * (dy + r);
        case 4: {  // ring
            const double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.55 * r * r;
        }
        case 5:  // cross
            return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
        case 6:  // bar
            return ax <= r && ay <= 0.3 * r;
        case 7:  // diamond
            return ax + ay <= r;
        case 8:  // L-shape
            return (dx >= -r && dx <= -0.3 * r && ay <= r) ||
                   (ax <= r && dy >= 0.4 * r && dy <= r);
        default:
            throw std::invalid_argument("unknown shape class " + std::to_string(cls));
    }
}

Scene try_scene(const SynthConfig& config, const std::vector<int>& class_ids, Rng& rng) {
    const std::size_t s = config.image_size;
    Scene scene;
    scene.image = DenseArray<float>({3, s, s});
    scene.mask = LabelMask(s, s, 0);

    // textured background
    float bg[3];
    for (float& c : bg) c = static_cast<float>(rng.uniform(0.05, 0.35));
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                scene.image.at(c, y, x) =
                    bg[c] + static_cast<float>(rng.uniform(-1, 1) * config.noise_amplitude);

    int instances = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_instances)));
    instances = std::max(instances, static_cast<int>(class_ids.size()));
    for (int inst = 0; inst < instances; ++inst) {
        const int cls = inst < static_cast<int>(class_ids.size())
                            ? class_ids[static_cast<std::size_t>(inst)]
                            : class_ids[rng.below(class_ids.size())];
        const double rmax = static_cast<double>(s) / 4.0;
        const double r = rng.uniform(config.min_radius, std::max(config.min_radius + 1.0, rmax));
        const double cx = rng.uniform(r, static_cast<double>(s) - 1.0 - r);
        const double cy = rng.uniform(r, static_cast<double>(s) - 1.0 - r);
        float color[3];
        for (float& c : color) c = static_cast<float>(rng.uniform(0.3, 1.0));
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                if (!inside_shape(cls, static_cast<double>(x) - cx, static_cast<double>(y) - cy, r))
                    continue;
                scene.mask.at(y, x) = cls;
                for (std::size_t c = 0; c < 3; ++c)
                    scene.image.at(c, y, x) =
                        color[c] + static_cast<float>(rng.uniform(-1, 1) * config.noise_amplitude);
            }
    }
    for (float& v : scene.image.data) v = std::clamp(v, 0.0f, 1.0f);
    return scene;
}

}  // namespace

Scene generate_scene(const SynthConfig& config, const std::vector<int>& class_ids,
                     std::uint64_t seed) {
    config.validate();
    if (class_ids.empty()) throw std::invalid_argument("generate_scene: no classes requested");
    Rng rng(hash_combine(config.texture_seed, seed));
    for (int attempt = 0; attempt < 20; ++attempt) {
        Scene scene = try_scene(config, class_ids, rng);
        bool ok = true;
        for (int cls : class_ids) {
            std::size_t n = 0;
            for (int v : scene.mask.v)
                if (v == cls) ++n;
            if (n == 0) ok = false;  // fully occluded by a later instance
        }
        if (ok) return scene;
    }
    throw std::runtime_error("generate_scene: could not place all requested shapes");
}

SynthDataset::SynthDataset(SynthConfig config, std::size_t per_class, std::uint64_t seed)
    : config_(std::move(config)), per_class_(per_class), seed_(seed) {
    config_.validate();
}

std::vector<int> SynthDataset::class_ids() const {
    std::vector<int> out;
    for (std::size_t c = 1; c <= config_.n_shape_classes; ++c) out.push_back(static_cast<int>(c));
    return out;
}

Scene SynthDataset::scene(int class_id, std::size_t index) const {
    if (class_id < 1 || class_id > static_cast<int>(config_.n_shape_classes))
        throw std::invalid_argument("SynthDataset: unknown class " + std::to_string(class_id));
    if (index >= per_class_) throw std::out_of_range("SynthDataset: scene index out of range");
    const std::uint64_t scene_seed =
        hash_combine(seed_, hash_combine(static_cast<std::uint64_t>(class_id), index));
    // distractor shapes from other classes end up labeled as background
    // whenever they are outside the episode's alphabet
    Rng rng(hash_combine(scene_seed, 0xd15c0ULL));
    std::vector<int> classes{class_id};
    const std::size_t n = config_.n_shape_classes;
    if (n > 1 && rng.coin(0.45)) {
        int other = static_cast<int>(1 + rng.below(n));
        if (other != class_id) classes.push_back(other);
        if (rng.coin(0.3)) {
            int third = static_cast<int>(1 + rng.below(n));
            if (third != class_id && third != other) classes.push_back(third);
        }
    }
    return generate_scene(config_, classes, scene_seed);
}

std::map<int, int> make_folds(const std::vector<int>& class_ids, int n_folds) {
    if (static_cast<int>(class_ids.size()) < n_folds)
        throw std::invalid_argument("make_folds: need at least " + std::to_string(n_folds) +
                                    " classes for " + std::to_string(n_folds) + " folds");
    std::map<int, int> folds;
    std::vector<int> sorted = class_ids;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
        folds[sorted[i]] = static_cast<int>(i) % n_folds;
    return folds;
}

void write_folds_file(const std::filesystem::path& path, const std::map<int, int>& folds) {
    std::ofstream out(path);
    if (!out) throw IngestError(path.string() + ": cannot open for writing");
    for (const auto& [cls, fold] : folds) out << cls << '\t' << fold << '\n';
}

std::map<int, int> read_folds_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("fold file not found: " + path.string());
    std::map<int, int> folds;
    int cls, fold;
    while (in >> cls >> fold) folds[cls] = fold;
    if (folds.empty()) throw IngestError("fold file is empty: " + path.string());
    return folds;
}

Episode sample_episode(const Dataset& source, const DatasetSplit& split, int n_way, int k_shot,
                       int n_query, std::uint64_t seed) {
    if (n_way < 1 || k_shot < 1 || n_query < 1)
        throw std::invalid_argument("sample_episode: N, K, T must be >= 1");
    std::vector<int> pool = split.classes();
    if (static_cast<int>(pool.size()) < n_way)
        throw EpisodeSamplingError("split has " + std::to_string(pool.size()) +
                                   " classes, episode needs " + std::to_string(n_way));
    Rng rng(hash_combine(seed, 0xe915a0deULL));

    // N distinct classes, uniform over the split
    std::vector<int> chosen;
    while (static_cast<int>(chosen.size()) < n_way) {
        const int c = pool[rng.below(pool.size())];
        if (std::find(chosen.begin(), chosen.end(), c) == chosen.end()) chosen.push_back(c);
    }

    std::map<int, int> slot_of;  // global -> 1..N
    for (int i = 0; i < n_way; ++i) slot_of[chosen[static_cast<std::size_t>(i)]] = i + 1;

    auto remap = [&](const LabelMask& m) {
        LabelMask out(m.h, m.w);
        for (std::size_t i = 0; i < m.numel(); ++i) {
            const int v = m.v[i];
            if (v == kIgnoreLabel) {
                out.v[i] = -1;
            } else if (v > 0) {
                auto it = slot_of.find(v);
                out.v[i] = it == slot_of.end() ? 0 : it->second;
            } else {
                out.v[i] = 0;
            }
        }
        return out;
    };

    Episode ep;
    ep.seed = seed;
    ep.class_map = chosen;
    ep.data.support_images.resize(static_cast<std::size_t>(n_way));
    ep.data.support_masks.resize(static_cast<std::size_t>(n_way));

    std::map<int, std::set<std::size_t>> used;
    auto draw_index = [&](int cls) {
        const std::size_t count = source.scene_count(cls);
        if (used[cls].size() >= count)
            throw EpisodeSamplingError("class " + std::to_string(cls) + " cannot furnish " +
                                       "enough distinct scenes");
        std::size_t idx;
        do {
            idx = rng.below(count);
        } while (used[cls].count(idx));
        used[cls].insert(idx);
        return idx;
    };

    for (int c = 0; c < n_way; ++c) {
        const int cls = chosen[static_cast<std::size_t>(c)];
        for (int k = 0; k < k_shot; ++k) {
            // resample (bounded) until the shot actually shows its class
            for (int attempt = 0;; ++attempt) {
                Scene s = source.scene(cls, draw_index(cls));
                LabelMask m = remap(s.mask);
                std::size_t fg = 0;
                for (int v : m.v)
                    if (v == c + 1) ++fg;
                if (fg > 0) {
                    ep.data.support_images[static_cast<std::size_t>(c)].push_back(std::move(s.image));
                    ep.data.support_masks[static_cast<std::size_t>(c)].push_back(std::move(m));
                    break;
                }
                if (attempt >= 20)
                    throw EpisodeSamplingError("class " + std::to_string(cls) +
                                               " has no labeled pixels in sampled scenes");
            }
        }
    }

    for (int t = 0; t < n_query; ++t) {
        for (int attempt = 0;; ++attempt) {
            const int cls = chosen[rng.below(static_cast<std::uint64_t>(n_way))];
            Scene s = source.scene(cls, draw_index(cls));
            LabelMask m = remap(s.mask);
            bool any_fg = false;
            for (int v : m.v)
                if (v > 0) any_fg = true;
            if (any_fg) {
                ep.data.query_images.push_back(std::move(s.image));
                ep.data.query_masks.push_back(std::move(m));
                break;
            }
            if (attempt >= 20)
                throw EpisodeSamplingError("could not sample a query with foreground");
        }
    }
    return ep;
}

// ---------------------------------------------------------------------------
// directory ingest
// ---------------------------------------------------------------------------

namespace {

struct PairEntry {
    std::filesystem::path image;
    std::filesystem::path mask;
};

class DirectoryDataset final : public Dataset {
public:
    DirectoryDataset(std::filesystem::path root, IngestConfig config)
        : root_(std::move(root)), config_(config) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(root_)) throw IngestError("not a directory: " + root_.string());
        for (const auto& entry : fs::directory_iterator(root_)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("class_", 0) != 0 || entry.path().extension() != ".index") continue;
            const int cls = std::stoi(name.substr(6));
            load_index(cls, entry.path());
        }
        if (entries_.empty()) throw IngestError("no classes found in " + root_.string());
        for (const auto& [cls, v] : entries_) known_classes_.insert(cls);
    }

    std::vector<int> class_ids() const override {
        std::vector<int> out;
        for (const auto& [cls, v] : entries_) out.push_back(cls);
        return out;
    }

    std::size_t scene_count(int class_id) const override {
        auto it = entries_.find(class_id);
        if (it == entries_.end())
            throw std::invalid_argument("unknown class " + std::to_string(class_id));
        return it->second.size();
    }

    Scene scene(int class_id, std::size_t index) const override {
        const PairEntry& pe = entries_.at(class_id).at(index);
        Scene s;
        s.image = read_ppm(pe.image);
        if (!std::filesystem::exists(pe.mask))
            throw IngestError("missing mask file: " + pe.mask.string());
        s.mask = read_pgm(pe.mask);
        if (s.mask.h != s.image.shape[1] || s.mask.w != s.image.shape[2])
            throw IngestError("size mismatch between " + pe.image.string() + " and " +
                              pe.mask.string());
        for (int v : s.mask.v)
            if (v != 0 && v != kIgnoreLabel && !known_classes_.count(v))
                throw IngestError("unknown class id " + std::to_string(v) + " in " +
                                  pe.mask.string());
        if (config_.target_size > 0 &&
            (s.image.shape[1] != config_.target_size || s.image.shape[2] != config_.target_size)) {
            s.image = bilinear_resize(s.image, config_.target_size, config_.target_size);
            s.mask = nearest_resize(s.mask, config_.target_size, config_.target_size);
        }
        return s;
    }

private:
    void load_index(int cls, const std::filesystem::path& index_path) {
        std::ifstream in(index_path);
        if (!in) throw IngestError("cannot open index: " + index_path.string());
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string img, msk;
            if (!std::getline(ls, img, '\t') || !std::getline(ls, msk, '\t'))
                throw IngestError("malformed index line in " + index_path.string() + ": " + line);
            entries_[cls].push_back({root_ / img, root_ / msk});
        }
    }

    std::filesystem::path root_;
    IngestConfig config_;
    std::map<int, std::vector<PairEntry>> entries_;
    std::set<int> known_classes_;
};

}  // namespace

std::unique_ptr<Dataset> ingest_directory(const std::filesystem::path& root,
                                          const IngestConfig& config) {
    return std::make_unique<DirectoryDataset>(root, config);
}

void write_synth_dataset(const std::filesystem::path& root, const SynthConfig& config,
                         std::size_t per_class, std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(root);
    SynthDataset ds(config, per_class, seed);
    for (int cls : ds.class_ids()) {
        std::ofstream index(root / ("class_" + std::to_string(cls) + ".index"));
        for (std::size_t i = 0; i < per_class; ++i) {
            Scene s = ds.scene(cls, i);
            const std::string stem = "scene_" + std::to_string(cls) + "_" + std::to_string(i);
            write_ppm(root / (stem + ".ppm"), s.image);
            write_pgm(root / (stem + ".pgm"), s.mask);
            std::set<int> present;
            for (int v : s.mask.v)
                if (v > 0 && v != kIgnoreLabel) present.insert(v);
            index << stem << ".ppm\t" << stem << ".pgm\t";
            bool first = true;
            for (int p : present) {
                index << (first ? "" : ",") << p;
                first = false;
            }
            index << '\n';
        }
    }
    write_folds_file(root / "folds.txt", make_folds(ds.class_ids()));
}

}  // namespace protoseg
