#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uccl/tensor.hpp"

namespace uccl {

using Rng = std::mt19937_64;

/// Derives an independent 64-bit seed from a base seed and a stream index (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

struct DatasetConfig {
    int height = 64;
    int width = 64;
    int num_classes = 4;  ///< includes background (class 0)
    int min_shapes = 1;
    int max_shapes = 3;
    double noise = 0.04;  ///< per-pixel Gaussian noise std
    int total = 200;      ///< scenes in the train corpus (labeled + unlabeled)
    int val_count = 40;   ///< held-out scenes, ids total..total+val_count-1
    std::uint64_t seed = 0;

    void validate() const;
};

/// One synthetic image with its ground-truth mask.
struct Scene {
    int id = -1;
    Tensor image;   ///< (3, H, W), values in [0, 1], multiples of 1/255
    LabelMap mask;  ///< (H, W), values in 0..C-1
};

Scene generate_scene(std::uint64_t seed, const DatasetConfig& cfg);

/// Scene `id` of the corpus described by `cfg`; the seed is derived from (cfg.seed, id).
Scene generate_corpus_scene(int id, const DatasetConfig& cfg);
std::vector<Scene> generate_corpus(const DatasetConfig& cfg);
std::vector<Scene> generate_validation(const DatasetConfig& cfg);

/// Labeled fraction as an exact rational.
struct Ratio {
    std::int64_t num = 1;
    std::int64_t den = 1;

    /// Accepts "n/d" or an integer; "full" means 1/1.
    static Ratio parse(const std::string& text);
    std::string str() const;
    bool operator==(const Ratio&) const = default;
};

struct SplitManifest {
    std::vector<int> labeled_ids;
    std::vector<int> unlabeled_ids;
    Ratio ratio;

    bool operator==(const SplitManifest&) const = default;
};

/// round(ratio * total), half away from zero.
int labeled_count(int total, const Ratio& ratio);
SplitManifest make_splits(int total, const Ratio& ratio, std::uint64_t seed);

struct SpatialRecord {
    bool hflip = false;
    bool vflip = false;
    bool operator==(const SpatialRecord&) const = default;
};

struct AugmentConfig {
    double hflip_prob = 0.5;
    double vflip_prob = 0.5;
    bool photometric = true;
    double jitter_prob = 1.0;
    double jitter_min = 0.6;
    double jitter_max = 1.4;
    double gray_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
};

/// Concrete photometric draw; `apply_photometric` is deterministic given these.
struct PhotometricParams {
    double brightness = 1.0;
    double contrast = 1.0;
    double saturation = 1.0;
    bool grayscale = false;
    std::optional<double> blur_sigma;
};

struct AugmentedPair {
    Tensor weak_view;
    Tensor strong_view;
    SpatialRecord spatial;
    LabelMap mask_view;  ///< empty for unlabeled scenes
};

Tensor apply_spatial(const Tensor& image, SpatialRecord record);
LabelMap apply_spatial(const LabelMap& mask, SpatialRecord record);

/// Flips sampled independently; fills weak_view, spatial and mask_view.
AugmentedPair weak_augment(const Scene& scene, const AugmentConfig& cfg, Rng& rng);

PhotometricParams sample_photometric(const AugmentConfig& cfg, Rng& rng);
Tensor apply_photometric(const Tensor& image, const PhotometricParams& params);
/// Photometric ops only, so pixel (i,j) of the result corresponds to pixel (i,j) of the input.
Tensor strong_augment(const Tensor& weak_view, const AugmentConfig& cfg, Rng& rng);

AugmentedPair augment_pair(const Scene& scene, const AugmentConfig& cfg, Rng& rng, bool keep_mask);

struct LabeledBatch {
    Tensor images;  ///< (B, 3, H, W) weak views
    LabelMap masks; ///< (B, H, W)
    std::vector<int> ids;
};

struct UnlabeledBatch {
    Tensor weak;    ///< x^w (B, 3, H, W)
    Tensor strong;  ///< x^s (B, 3, H, W)
    std::vector<int> ids;
};

struct BatchPair {
    LabeledBatch labeled;
    std::optional<UnlabeledBatch> unlabeled;
};

/// Endless synchronized labeled/unlabeled batch stream. The smaller split cycles; each split
/// is reshuffled whenever it is exhausted.
class BatchIterator {
public:
    BatchIterator(std::span<const Scene> scenes, const SplitManifest& manifest, const AugmentConfig& augment,
                  int batch_size, std::uint64_t seed);

    /// ceil(max(|labeled|, |unlabeled|) / batch_size)
    int batches_per_epoch() const;
    BatchPair next();

private:
    struct Cursor {
        std::vector<int> ids;
        std::size_t pos = 0;
        int take(Rng& rng);
    };

    std::span<const Scene> scenes_;
    AugmentConfig augment_;
    int batch_size_;
    Cursor labeled_;
    Cursor unlabeled_;
    Rng order_rng_;
    Rng augment_rng_;
};

/// data/images/<id>.png, data/masks/<id>.png, splits/{labeled,unlabeled}.txt under `root`.
void write_dataset(const std::filesystem::path& root, std::span<const Scene> scenes, const SplitManifest& manifest);

struct Dataset {
    std::vector<Scene> scenes;  ///< indexed by id
    SplitManifest manifest;
};

Dataset load_dataset(const std::filesystem::path& root, int num_classes);

void write_ids(const std::filesystem::path& file, std::span<const int> ids);
std::vector<int> read_ids(const std::filesystem::path& file);

}  // namespace uccl
