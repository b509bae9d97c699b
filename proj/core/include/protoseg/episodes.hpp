#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "protoseg/array.hpp"
#include "protoseg/protocore.hpp"

namespace protoseg {

/// Desk-scale synthetic scene generator: 8 silhouette classes sharing color
/// and texture statistics, so held-out classes are novel in shape only.
struct SynthConfig {
    std::size_t image_size = 64;
    std::size_t n_shape_classes = 8;  // circle, square, triangle, ring, cross, bar, diamond, L
    int max_instances = 3;
    double noise_amplitude = 0.05;
    std::uint64_t texture_seed = 0;
    double min_radius = 4.0;

    void validate() const {
        if (n_shape_classes < 4 || n_shape_classes > 8)
            throw std::invalid_argument("SynthConfig: need 4..8 classes (4 folds must be nonempty)");
        if (image_size < 16) throw std::invalid_argument("SynthConfig: image size < 16");
    }
};

struct Scene {
    DenseArray<float> image;  // [3,H,W] in [0,1]
    LabelMask mask;           // global class ids, 0 = background
};

/// Renders 1..max_instances shapes of the requested classes at random
/// positions/scales/colors with additive noise. Every requested class is
/// guaranteed at least one visible pixel; deterministic given seed.
Scene generate_scene(const SynthConfig& config, const std::vector<int>& class_ids,
                     std::uint64_t seed);

/// Read-only source of (image, mask) scenes grouped by primary class.
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual std::vector<int> class_ids() const = 0;
    virtual std::size_t scene_count(int class_id) const = 0;
    virtual Scene scene(int class_id, std::size_t index) const = 0;
};

class SynthDataset : public Dataset {
public:
    SynthDataset(SynthConfig config, std::size_t per_class, std::uint64_t seed);
    std::vector<int> class_ids() const override;
    std::size_t scene_count(int) const override { return per_class_; }
    Scene scene(int class_id, std::size_t index) const override;

    const SynthConfig& config() const { return config_; }

private:
    SynthConfig config_;
    std::size_t per_class_;
    std::uint64_t seed_;
};

/// Disjoint 4-fold class partition; train role = the 3 complement folds.
struct DatasetSplit {
    std::map<int, int> fold_of;  // global class id -> fold index 0..3
    int eval_fold = 0;
    bool train_role = true;

    std::vector<int> classes() const {
        std::vector<int> out;
        for (const auto& [cls, fold] : fold_of)
            if ((fold == eval_fold) != train_role) out.push_back(cls);
        return out;
    }
};

std::map<int, int> make_folds(const std::vector<int>& class_ids, int n_folds = 4);
void write_folds_file(const std::filesystem::path& path, const std::map<int, int>& folds);
std::map<int, int> read_folds_file(const std::filesystem::path& path);

struct Episode {
    EpisodeData<float> data;
    std::vector<int> class_map;  // episode-local slot n (1..N) -> global class id, index n-1
    std::uint64_t seed = 0;
};

struct EpisodeSamplingError : std::runtime_error {
    explicit EpisodeSamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

/// N-way K-shot sampler: N split classes, K support + T query scenes, labels
/// remapped to 1..N; foreground of non-episode classes becomes background.
Episode sample_episode(const Dataset& source, const DatasetSplit& split, int n_way, int k_shot,
                       int n_query, std::uint64_t seed);

struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IngestConfig {
    std::size_t target_size = 0;  // 0 = keep native resolution
};

/// Directory layout: per-class index files "class_<id>.index" with lines
/// "relative/image.ppm<TAB>relative/mask.pgm<TAB>class_ids,comma,separated",
/// plus "folds.txt" with "class_id<TAB>fold" lines.
std::unique_ptr<Dataset> ingest_directory(const std::filesystem::path& root,
                                          const IngestConfig& config = {});

/// Materializes a synthetic dataset in the ingest layout (cmd_synth backend).
void write_synth_dataset(const std::filesystem::path& root, const SynthConfig& config,
                         std::size_t per_class, std::uint64_t seed);

}  // namespace protoseg
