#include "uccl/data.hpp"

#include <algorithm>
#include <charconv>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace uccl {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void DatasetConfig::validate() const {
    if (num_classes < 2) throw std::invalid_argument("dataset: num_classes must be >= 2");
    if (height < 32 || width < 32) throw std::invalid_argument("dataset: H and W must be >= 32");
    if (min_shapes < 1 || max_shapes < min_shapes) throw std::invalid_argument("dataset: bad shape-count range");
    if (noise < 0.0) throw std::invalid_argument("dataset: noise must be >= 0");
    if (total < 1 || val_count < 0) throw std::invalid_argument("dataset: bad scene counts");
}

namespace {

// Base colors for shape classes 1..; cycled for larger C.
constexpr std::array<std::array<double, 3>, 6> kClassColors{{
    {0.85, 0.25, 0.20},
    {0.20, 0.75, 0.30},
    {0.25, 0.35, 0.90},
    {0.90, 0.80, 0.20},
    {0.75, 0.30, 0.80},
    {0.20, 0.80, 0.85},
}};

enum class Primitive { Disk, Rectangle, Triangle };

struct Shape {
    Primitive kind;
    double cx, cy, r;
    double half_w, half_h;
    std::array<double, 6> tri;  // x0,y0,x1,y1,x2,y2
};

bool inside(const Shape& s, double x, double y) {
    switch (s.kind) {
    case Primitive::Disk:
        return (x - s.cx) * (x - s.cx) + (y - s.cy) * (y - s.cy) <= s.r * s.r;
    case Primitive::Rectangle:
        return std::abs(x - s.cx) <= s.half_w && std::abs(y - s.cy) <= s.half_h;
    case Primitive::Triangle: {
        const auto& t = s.tri;
        auto edge = [&](int a, int b) {
            return (t[2 * b] - t[2 * a]) * (y - t[2 * a + 1]) - (t[2 * b + 1] - t[2 * a + 1]) * (x - t[2 * a]);
        };
        const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
    }
    return false;
}

float quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

Scene draw_scene(const DatasetConfig& cfg, Rng& rng) {
    const int H = cfg.height, W = cfg.width;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    Scene scene;
    scene.image = Tensor({3, H, W});
    scene.mask = LabelMap({H, W}, 0);

    // Textured background: muted base color plus a random plane wave.
    std::array<double, 3> base{};
    for (auto& b : base) b = 0.3 + 0.3 * unit(rng);
    const double freq_x = 0.05 + 0.25 * unit(rng);
    const double freq_y = 0.05 + 0.25 * unit(rng);
    const double phase = 6.283185307179586 * unit(rng);
    const double amplitude = 0.04 + 0.08 * unit(rng);
    std::vector<double> rgb(3 * static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double wave = amplitude * std::sin(freq_x * x + freq_y * y + phase);
            for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(c) * H + y) * W + x] = base[c] + wave;
        }
    }

    const int span = std::min(H, W);
    std::uniform_int_distribution<int> shape_count(cfg.min_shapes, cfg.max_shapes);
    std::uniform_int_distribution<int> class_pick(1, cfg.num_classes - 1);
    const int n = shape_count(rng);
    for (int s = 0; s < n; ++s) {
        const int cls = class_pick(rng);
        Shape shape{};
        shape.kind = static_cast<Primitive>((cls - 1) % 3);
        shape.r = span * (0.12 + 0.12 * unit(rng));
        shape.cx = shape.r + unit(rng) * (W - 2 * shape.r);
        shape.cy = shape.r + unit(rng) * (H - 2 * shape.r);
        shape.half_w = shape.r * (0.6 + 0.4 * unit(rng));
        shape.half_h = shape.r * (0.6 + 0.4 * unit(rng));
        const double theta = 6.283185307179586 * unit(rng);
        for (int k = 0; k < 3; ++k) {
            const double a = theta + k * 2.0943951023931953;
            shape.tri[2 * k] = shape.cx + shape.r * std::cos(a);
            shape.tri[2 * k + 1] = shape.cy + shape.r * std::sin(a);
        }
        const auto& tone = kClassColors[static_cast<std::size_t>(cls - 1) % kClassColors.size()];
        std::array<double, 3> color{};
        for (int c = 0; c < 3; ++c) color[c] = tone[c] + 0.2 * (unit(rng) - 0.5);

        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                if (!inside(shape, x + 0.5, y + 0.5)) continue;
                scene.mask(y, x) = cls;
                for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(c) * H + y) * W + x] = color[c];
            }
        }
    }

    for (std::size_t i = 0; i < rgb.size(); ++i) scene.image[i] = quantize(rgb[i] + cfg.noise * noise(rng));
    return scene;
}

double background_fraction(const LabelMap& mask) {
    const auto zeros = std::count(mask.values().begin(), mask.values().end(), 0);
    return static_cast<double>(zeros) / static_cast<double>(mask.size());
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const DatasetConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    // Redraw until the scene has a usable foreground/background balance.
    for (;;) {
        Scene scene = draw_scene(cfg, rng);
        const double bg = background_fraction(scene.mask);
        if (bg >= 0.2 && bg <= 0.95) return scene;
    }
}

Scene generate_corpus_scene(int id, const DatasetConfig& cfg) {
    Scene scene = generate_scene(derive_seed(cfg.seed, static_cast<std::uint64_t>(id)), cfg);
    scene.id = id;
    return scene;
}

std::vector<Scene> generate_corpus(const DatasetConfig& cfg) {
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(cfg.total));
    for (int id = 0; id < cfg.total; ++id) scenes.push_back(generate_corpus_scene(id, cfg));
    return scenes;
}

std::vector<Scene> generate_validation(const DatasetConfig& cfg) {
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(cfg.val_count));
    for (int k = 0; k < cfg.val_count; ++k) scenes.push_back(generate_corpus_scene(cfg.total + k, cfg));
    return scenes;
}

// ---------------------------------------------------------------------------------------------

Ratio Ratio::parse(const std::string& text) {
    if (text == "full") return {1, 1};
    Ratio r;
    try {
        const auto slash = text.find('/');
        std::size_t used = 0;
        if (slash == std::string::npos) {
            r.num = std::stoll(text, &used);
            r.den = 1;
            if (used != text.size()) throw std::invalid_argument(text);
        } else {
            const std::string a = text.substr(0, slash), b = text.substr(slash + 1);
            r.num = std::stoll(a, &used);
            if (used != a.size()) throw std::invalid_argument(text);
            r.den = std::stoll(b, &used);
            if (used != b.size()) throw std::invalid_argument(text);
        }
    } catch (const std::logic_error&) {
        throw std::invalid_argument("ratio: cannot parse '" + text + "'");
    }
    if (r.den <= 0 || r.num <= 0 || r.num > r.den) throw std::invalid_argument("ratio must lie in (0, 1]: " + text);
    return r;
}

std::string Ratio::str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

int labeled_count(int total, const Ratio& ratio) {
    if (ratio.den <= 0 || ratio.num <= 0 || ratio.num > ratio.den) {
        throw std::invalid_argument("ratio must lie in (0, 1]");
    }
    const std::int64_t twice = 2 * ratio.num * total;
    return static_cast<int>((twice + ratio.den) / (2 * ratio.den));
}

SplitManifest make_splits(int total, const Ratio& ratio, std::uint64_t seed) {
    if (total < 1) throw std::invalid_argument("make_splits: total must be positive");
    const int n_labeled = labeled_count(total, ratio);
    if (n_labeled == 0) throw std::invalid_argument("make_splits: ratio " + ratio.str() + " yields no labeled scenes");

    std::vector<int> ids(static_cast<std::size_t>(total));
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);

    SplitManifest m;
    m.ratio = ratio;
    m.labeled_ids.assign(ids.begin(), ids.begin() + n_labeled);
    m.unlabeled_ids.assign(ids.begin() + n_labeled, ids.end());
    std::sort(m.labeled_ids.begin(), m.labeled_ids.end());
    std::sort(m.unlabeled_ids.begin(), m.unlabeled_ids.end());
    return m;
}

// ---------------------------------------------------------------------------------------------

Tensor apply_spatial(const Tensor& image, SpatialRecord record) {
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out(image.shape());
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out(c, y, x) = image(c, record.vflip ? H - 1 - y : y, record.hflip ? W - 1 - x : x);
    return out;
}

LabelMap apply_spatial(const LabelMap& mask, SpatialRecord record) {
    const int H = mask.dim(0), W = mask.dim(1);
    LabelMap out(mask.shape());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out(y, x) = mask(record.vflip ? H - 1 - y : y, record.hflip ? W - 1 - x : x);
    return out;
}

AugmentedPair weak_augment(const Scene& scene, const AugmentConfig& cfg, Rng& rng) {
    std::bernoulli_distribution hflip(cfg.hflip_prob), vflip(cfg.vflip_prob);
    AugmentedPair pair;
    pair.spatial.hflip = hflip(rng);
    pair.spatial.vflip = vflip(rng);
    pair.weak_view = apply_spatial(scene.image, pair.spatial);
    if (!scene.mask.empty()) pair.mask_view = apply_spatial(scene.mask, pair.spatial);
    return pair;
}

PhotometricParams sample_photometric(const AugmentConfig& cfg, Rng& rng) {
    std::uniform_real_distribution<double> factor(cfg.jitter_min, cfg.jitter_max);
    std::uniform_real_distribution<double> sigma(cfg.blur_sigma_min, cfg.blur_sigma_max);
    std::bernoulli_distribution jitter(cfg.jitter_prob), gray(cfg.gray_prob), blur(cfg.blur_prob);

    PhotometricParams p;
    if (jitter(rng)) {
        p.brightness = factor(rng);
        p.contrast = factor(rng);
        p.saturation = factor(rng);
    }
    p.grayscale = gray(rng);
    if (blur(rng)) p.blur_sigma = sigma(rng);
    return p;
}

namespace {

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace

Tensor apply_photometric(const Tensor& image, const PhotometricParams& p) {
    const int H = image.dim(1), W = image.dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    std::vector<double> px(image.values().begin(), image.values().end());
    auto blend = [](double a, double b, double f) { return std::clamp(f * a + (1.0 - f) * b, 0.0, 1.0); };

    for (auto& v : px) v = std::clamp(v * p.brightness, 0.0, 1.0);

    double mean_gray = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean_gray += luma(px[i], px[plane + i], px[2 * plane + i]);
    mean_gray /= static_cast<double>(plane);
    for (auto& v : px) v = blend(v, mean_gray, p.contrast);

    for (std::size_t i = 0; i < plane; ++i) {
        const double g = luma(px[i], px[plane + i], px[2 * plane + i]);
        for (int c = 0; c < 3; ++c) px[c * plane + i] = blend(px[c * plane + i], g, p.saturation);
    }

    if (p.grayscale) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double g = luma(px[i], px[plane + i], px[2 * plane + i]);
            px[i] = px[plane + i] = px[2 * plane + i] = g;
        }
    }

    if (p.blur_sigma) {
        for (int c = 0; c < 3; ++c) {
            cv::Mat channel(H, W, CV_64F, px.data() + c * plane);
            cv::GaussianBlur(channel, channel, cv::Size(0, 0), *p.blur_sigma, *p.blur_sigma, cv::BORDER_REFLECT_101);
        }
    }

    Tensor out(image.shape());
    for (std::size_t i = 0; i < px.size(); ++i) out[i] = static_cast<float>(std::clamp(px[i], 0.0, 1.0));
    return out;
}

Tensor strong_augment(const Tensor& weak_view, const AugmentConfig& cfg, Rng& rng) {
    if (!cfg.photometric) return weak_view;
    return apply_photometric(weak_view, sample_photometric(cfg, rng));
}

AugmentedPair augment_pair(const Scene& scene, const AugmentConfig& cfg, Rng& rng, bool keep_mask) {
    AugmentedPair pair = weak_augment(scene, cfg, rng);
    pair.strong_view = strong_augment(pair.weak_view, cfg, rng);
    if (!keep_mask) pair.mask_view = LabelMap();
    return pair;
}

// ---------------------------------------------------------------------------------------------

int BatchIterator::Cursor::take(Rng& rng) {
    if (pos == ids.size()) {
        std::shuffle(ids.begin(), ids.end(), rng);
        pos = 0;
    }
    return ids[pos++];
}

BatchIterator::BatchIterator(std::span<const Scene> scenes, const SplitManifest& manifest,
                             const AugmentConfig& augment, int batch_size, std::uint64_t seed)
    : scenes_(scenes),
      augment_(augment),
      batch_size_(batch_size),
      order_rng_(derive_seed(seed, 1)),
      augment_rng_(derive_seed(seed, 2)) {
    if (manifest.labeled_ids.empty()) throw std::invalid_argument("batch iterator: empty labeled split");
    if (batch_size < 1) throw std::invalid_argument("batch iterator: batch_size must be >= 1");
    for (const auto* list : {&manifest.labeled_ids, &manifest.unlabeled_ids}) {
        for (int id : *list) {
            if (id < 0 || static_cast<std::size_t>(id) >= scenes.size() || scenes[static_cast<std::size_t>(id)].id != id) {
                throw std::invalid_argument("batch iterator: manifest id " + std::to_string(id) + " has no scene");
            }
        }
    }
    labeled_.ids = manifest.labeled_ids;
    labeled_.pos = labeled_.ids.size();
    unlabeled_.ids = manifest.unlabeled_ids;
    unlabeled_.pos = unlabeled_.ids.size();
}

int BatchIterator::batches_per_epoch() const {
    const std::size_t larger = std::max(labeled_.ids.size(), unlabeled_.ids.size());
    return static_cast<int>((larger + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_));
}

BatchPair BatchIterator::next() {
    const Scene& first = scenes_[static_cast<std::size_t>(labeled_.ids.front())];
    const int H = first.image.dim(1), W = first.image.dim(2);
    const std::size_t image_size = 3 * static_cast<std::size_t>(H) * W;
    const std::size_t mask_size = static_cast<std::size_t>(H) * W;

    BatchPair out;
    out.labeled.images = Tensor({batch_size_, 3, H, W});
    out.labeled.masks = LabelMap({batch_size_, H, W});
    for (int b = 0; b < batch_size_; ++b) {
        const int id = labeled_.take(order_rng_);
        const AugmentedPair pair = weak_augment(scenes_[static_cast<std::size_t>(id)], augment_, augment_rng_);
        std::copy_n(pair.weak_view.data(), image_size, out.labeled.images.data() + b * image_size);
        std::copy_n(pair.mask_view.data(), mask_size, out.labeled.masks.data() + b * mask_size);
        out.labeled.ids.push_back(id);
    }

    if (!unlabeled_.ids.empty()) {
        UnlabeledBatch u;
        u.weak = Tensor({batch_size_, 3, H, W});
        u.strong = Tensor({batch_size_, 3, H, W});
        for (int b = 0; b < batch_size_; ++b) {
            const int id = unlabeled_.take(order_rng_);
            const AugmentedPair pair = augment_pair(scenes_[static_cast<std::size_t>(id)], augment_, augment_rng_, false);
            std::copy_n(pair.weak_view.data(), image_size, u.weak.data() + b * image_size);
            std::copy_n(pair.strong_view.data(), image_size, u.strong.data() + b * image_size);
            u.ids.push_back(id);
        }
        out.unlabeled = std::move(u);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------

void write_ids(const std::filesystem::path& file, std::span<const int> ids) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    for (int id : ids) out << id << '\n';
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::vector<int> read_ids(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    std::vector<int> ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        int id = 0;
        const auto [end, ec] = std::from_chars(line.data(), line.data() + line.size(), id);
        if (ec != std::errc() || end != line.data() + line.size() || id < 0) {
            throw std::runtime_error(file.string() + ":" + std::to_string(line_no) + ": bad scene id '" + line + "'");
        }
        ids.push_back(id);
    }
    return ids;
}

void write_dataset(const std::filesystem::path& root, std::span<const Scene> scenes, const SplitManifest& manifest) {
    namespace fs = std::filesystem;
    const fs::path images = root / "data" / "images", masks = root / "data" / "masks", splits = root / "splits";
    for (const auto& dir : {images, masks, splits}) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    }
    for (const Scene& scene : scenes) {
        const int H = scene.image.dim(1), W = scene.image.dim(2);
        cv::Mat bgr(H, W, CV_8UC3), mask(H, W, CV_8UC1);
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                auto& px = bgr.at<cv::Vec3b>(y, x);
                for (int c = 0; c < 3; ++c) {
                    px[2 - c] = static_cast<unsigned char>(std::lround(scene.image(c, y, x) * 255.0f));
                }
                mask.at<unsigned char>(y, x) = static_cast<unsigned char>(scene.mask(y, x));
            }
        }
        const std::string name = std::to_string(scene.id) + ".png";
        if (!cv::imwrite((images / name).string(), bgr) || !cv::imwrite((masks / name).string(), mask)) {
            throw std::runtime_error("cannot write scene " + name + " under " + root.string());
        }
    }
    write_ids(splits / "labeled.txt", manifest.labeled_ids);
    write_ids(splits / "unlabeled.txt", manifest.unlabeled_ids);
}

Dataset load_dataset(const std::filesystem::path& root, int num_classes) {
    namespace fs = std::filesystem;
    const fs::path splits = root / "splits";
    if (!fs::exists(splits / "labeled.txt")) {
        throw std::runtime_error("no dataset under " + root.string() + " (run gen-data first)");
    }
    Dataset ds;
    ds.manifest.labeled_ids = read_ids(splits / "labeled.txt");
    if (fs::exists(splits / "unlabeled.txt")) ds.manifest.unlabeled_ids = read_ids(splits / "unlabeled.txt");
    const std::size_t total = ds.manifest.labeled_ids.size() + ds.manifest.unlabeled_ids.size();
    ds.manifest.ratio = {static_cast<std::int64_t>(ds.manifest.labeled_ids.size()), static_cast<std::int64_t>(total)};

    int max_id = -1;
    for (const auto* list : {&ds.manifest.labeled_ids, &ds.manifest.unlabeled_ids})
        for (int id : *list) max_id = std::max(max_id, id);
    ds.scenes.resize(static_cast<std::size_t>(max_id + 1));

    for (const auto* list : {&ds.manifest.labeled_ids, &ds.manifest.unlabeled_ids}) {
        for (int id : *list) {
            const std::string name = std::to_string(id) + ".png";
            const cv::Mat bgr = cv::imread((root / "data" / "images" / name).string(), cv::IMREAD_COLOR);
            const cv::Mat mask = cv::imread((root / "data" / "masks" / name).string(), cv::IMREAD_UNCHANGED);
            if (bgr.empty() || mask.empty() || mask.type() != CV_8UC1 || bgr.size() != mask.size()) {
                throw std::runtime_error("missing or malformed scene " + name + " under " + root.string());
            }
            Scene& scene = ds.scenes[static_cast<std::size_t>(id)];
            scene.id = id;
            scene.image = Tensor({3, bgr.rows, bgr.cols});
            scene.mask = LabelMap({bgr.rows, bgr.cols});
            for (int y = 0; y < bgr.rows; ++y) {
                for (int x = 0; x < bgr.cols; ++x) {
                    const auto& px = bgr.at<cv::Vec3b>(y, x);
                    for (int c = 0; c < 3; ++c) scene.image(c, y, x) = static_cast<float>(px[2 - c]) / 255.0f;
                    const int cls = mask.at<unsigned char>(y, x);
                    if (cls >= num_classes) throw std::runtime_error("mask value out of range in " + name);
                    scene.mask(y, x) = cls;
                }
            }
        }
    }
    return ds;
}

}  // namespace uccl
