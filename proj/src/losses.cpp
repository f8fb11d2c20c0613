#include "uccl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace uccl {

void check_tau(double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1), got " + std::to_string(tau));
}

namespace {

void check_divisible(int H, int W, int h, int w) {
    if (h < 1 || w < 1 || H % h != 0 || W % w != 0) {
        throw std::invalid_argument("nearest resampling: " + std::to_string(H) + "x" + std::to_string(W) +
                                    " is not a multiple of " + std::to_string(h) + "x" + std::to_string(w));
    }
}

template <typename Map>
Map downsample_impl(const Map& map, int h, int w) {
    if (map.rank() != 3) throw std::invalid_argument("downsample_nearest: expected (B,H,W)");
    const int B = map.dim(0), H = map.dim(1), W = map.dim(2);
    check_divisible(H, W, h, w);
    const int sy = H / h, sx = W / w;
    Map out({B, h, w});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) out(b, i, j) = map(b, i * sy, j * sx);
    return out;
}

// Cosine similarity with clamped norms; optionally the gradient w.r.t. `a`.
double cosine(const double* a, const double* b, int n, double* grad_a = nullptr) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int k = 0; k < n; ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    const double denom = std::max(na, kCosineEps) * std::max(nb, kCosineEps);
    if (grad_a) {
        const double radial = na > kCosineEps ? dot / (denom * na * na) : 0.0;
        for (int k = 0; k < n; ++k) grad_a[k] = b[k] / denom - radial * a[k];
    }
    return dot / denom;
}

// Softmax probabilities and cross-entropy at one pixel.
template <typename T>
double pixel_softmax(const BasicTensor<T>& logits, int b, int y, int x, int target, double* probs) {
    const int C = logits.dim(1);
    double top = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) top = std::max(top, static_cast<double>(logits(b, c, y, x)));
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
        probs[c] = std::exp(static_cast<double>(logits(b, c, y, x)) - top);
        sum += probs[c];
    }
    for (int c = 0; c < C; ++c) probs[c] /= sum;
    return top + std::log(sum) - static_cast<double>(logits(b, target, y, x));
}

void check_targets(const std::vector<int>& logit_shape, const LabelMap& targets) {
    if (logit_shape.size() != 4 || targets.rank() != 3 || targets.dim(0) != logit_shape[0] ||
        targets.dim(1) != logit_shape[2] || targets.dim(2) != logit_shape[3]) {
        throw std::invalid_argument("cross entropy: logits " + shape_string(logit_shape) + " vs targets " +
                                    shape_string(targets.shape()));
    }
    const int C = logit_shape[1];
    for (auto t : targets.values()) {
        if (t < 0 || t >= C) throw std::invalid_argument("cross entropy: target " + std::to_string(t) + " outside 0..C-1");
    }
}

}  // namespace

LabelMap downsample_nearest(const LabelMap& map, int h, int w) { return downsample_impl(map, h, w); }

template <typename T>
BasicTensor<T> downsample_nearest(const BasicTensor<T>& map, int h, int w) {
    return downsample_impl(map, h, w);
}

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& map, int H, int W) {
    if (map.rank() != 3) throw std::invalid_argument("upsample_nearest: expected (B,h,w)");
    const int B = map.dim(0), h = map.dim(1), w = map.dim(2);
    check_divisible(H, W, h, w);
    const int sy = H / h, sx = W / w;
    BasicTensor<T> out({B, H, W});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out(b, y, x) = map(b, y / sy, x / sx);
    return out;
}

template <typename T>
BasicTensor<T> cross_entropy_map(const BasicTensor<T>& logits, const LabelMap& targets) {
    check_targets(logits.shape(), targets);
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    std::vector<double> probs(static_cast<std::size_t>(C));
    BasicTensor<T> out({B, H, W});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out(b, y, x) = static_cast<T>(pixel_softmax(logits, b, y, x, targets(b, y, x), probs.data()));
    return out;
}

template <typename T>
ScalarLoss<T> supervised_loss(const BasicTensor<T>& logits, const LabelMap& labels) {
    check_targets(logits.shape(), labels);
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    if (B == 0) throw std::invalid_argument("supervised_loss: empty batch");
    const double scale = 1.0 / (static_cast<double>(B) * H * W);
    std::vector<double> probs(static_cast<std::size_t>(C));
    ScalarLoss<T> out;
    out.grad = BasicTensor<T>(logits.shape());
    double total = 0.0;
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int t = labels(b, y, x);
                total += pixel_softmax(logits, b, y, x, t, probs.data());
                for (int c = 0; c < C; ++c) out.grad(b, c, y, x) = static_cast<T>(scale * (probs[c] - (c == t ? 1.0 : 0.0)));
            }
    out.value = total * scale;
    return out;
}

template <typename T>
ScalarLoss<T> certainty_consistency_loss(const BasicTensor<T>& strong_logits, const PredictionMap<T>& weak, double tau) {
    check_tau(tau);
    require_same_shape(strong_logits, weak.logits, "certainty_consistency_loss");
    const int B = strong_logits.dim(0), C = strong_logits.dim(1), H = strong_logits.dim(2), W = strong_logits.dim(3);
    const double scale = 1.0 / (static_cast<double>(B) * H * W);
    std::vector<double> probs(static_cast<std::size_t>(C));
    ScalarLoss<T> out;
    out.grad = BasicTensor<T>(strong_logits.shape());
    double total = 0.0;
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!(static_cast<double>(weak.confidence(b, y, x)) > tau)) continue;
                const int t = weak.pseudo_labels(b, y, x);
                total += pixel_softmax(strong_logits, b, y, x, t, probs.data());
                for (int c = 0; c < C; ++c) out.grad(b, c, y, x) = static_cast<T>(scale * (probs[c] - (c == t ? 1.0 : 0.0)));
            }
    out.value = total * scale;
    return out;
}

template <typename T>
SimilarityMap<T> per_location_similarity(const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features) {
    require_same_shape(strong_features, weak_features, "per_location_similarity");
    if (strong_features.rank() != 4) throw std::invalid_argument("per_location_similarity: expected (B,D,h,w)");
    const int B = strong_features.dim(0), D = strong_features.dim(1), h = strong_features.dim(2), w = strong_features.dim(3);
    std::vector<double> a(static_cast<std::size_t>(D)), v(static_cast<std::size_t>(D));
    SimilarityMap<T> out{BasicTensor<T>({B, h, w})};
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                for (int d = 0; d < D; ++d) {
                    a[d] = strong_features(b, d, i, j);
                    v[d] = weak_features(b, d, i, j);
                }
                out.values(b, i, j) = static_cast<T>(cosine(a.data(), v.data(), D));
            }
    return out;
}

template <typename T>
UncertainMask uncertain_mask(const PredictionMap<T>& weak, double tau, int h, int w) {
    const BasicTensor<T>& conf = weak.confidence;
    BasicTensor<std::uint8_t> full(conf.shape());
    for (std::size_t i = 0; i < conf.size(); ++i) full[i] = static_cast<double>(conf[i]) < tau ? 1 : 0;
    return {downsample_impl(full, h, w), tau};
}

template <typename T>
SbuWeightMap<T> sbu_weight_map(const SimilarityMap<T>& similarity, const UncertainMask& mask, const LabelMap& class_map) {
    require_same_shape(similarity.values, mask.values, "sbu_weight_map mask");
    require_same_shape(similarity.values, class_map, "sbu_weight_map class map");
    const int B = class_map.dim(0);
    const std::size_t n = class_map.size() / static_cast<std::size_t>(B);
    int classes = 1;
    for (auto c : class_map.values()) classes = std::max(classes, static_cast<int>(c) + 1);

    SbuWeightMap<T> out{BasicTensor<T>(similarity.values.shape(), T(0))};
    std::vector<double> top(static_cast<std::size_t>(classes)), sum(static_cast<std::size_t>(classes));
    for (int b = 0; b < B; ++b) {
        const auto s = similarity.values.slab(b);
        const auto m = mask.values.slab(b);
        const auto cls = class_map.slab(b);
        auto wt = out.values.slab(b);
        std::fill(top.begin(), top.end(), -std::numeric_limits<double>::infinity());
        std::fill(sum.begin(), sum.end(), 0.0);
        for (std::size_t k = 0; k < n; ++k)
            if (m[k]) top[cls[k]] = std::max(top[cls[k]], -static_cast<double>(s[k]));
        for (std::size_t k = 0; k < n; ++k)
            if (m[k]) sum[cls[k]] += std::exp(-static_cast<double>(s[k]) - top[cls[k]]);
        for (std::size_t k = 0; k < n; ++k)
            if (m[k]) wt[k] = static_cast<T>(std::exp(-static_cast<double>(s[k]) - top[cls[k]]) / sum[cls[k]]);
    }
    return out;
}

template <typename T>
SbuResult<T> sbu_loss(const BasicTensor<T>& strong_logits, const PredictionMap<T>& weak,
                      const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features, double tau) {
    check_tau(tau);
    require_same_shape(strong_logits, weak.logits, "sbu_loss logits");
    const int B = strong_logits.dim(0), C = strong_logits.dim(1), H = strong_logits.dim(2), W = strong_logits.dim(3);
    const int h = strong_features.dim(2), w = strong_features.dim(3);

    SbuResult<T> out;
    auto& art = out.artifacts;
    art.similarity = per_location_similarity(strong_features, weak_features);
    art.mask = uncertain_mask(weak, tau, h, w);
    art.class_map = downsample_nearest(weak.pseudo_labels, h, w);
    art.weights = sbu_weight_map(art.similarity, art.mask, art.class_map);
    const BasicTensor<T> pixel_weights = upsample_nearest(art.weights.values, H, W);

    const double scale = 1.0 / B;
    std::vector<double> probs(static_cast<std::size_t>(C));
    out.grad = BasicTensor<T>(strong_logits.shape());
    double total = 0.0;
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double wt = pixel_weights(b, y, x);
                if (wt == 0.0) continue;
                const int t = weak.pseudo_labels(b, y, x);
                total += wt * pixel_softmax(strong_logits, b, y, x, t, probs.data());
                for (int c = 0; c < C; ++c) {
                    out.grad(b, c, y, x) = static_cast<T>(scale * wt * (probs[c] - (c == t ? 1.0 : 0.0)));
                }
            }
    out.value = total * scale;
    return out;
}

template <typename T>
ClassPrototypes class_prototypes(const BasicTensor<T>& weak_features, const BasicTensor<T>& strong_features,
                                 const PredictionMap<T>& weak, int h, int w) {
    require_same_shape(weak_features, strong_features, "class_prototypes");
    if (weak_features.dim(2) != h || weak_features.dim(3) != w) {
        throw std::invalid_argument("class_prototypes: feature dims differ from (h, w)");
    }
    const int B = weak_features.dim(0), D = weak_features.dim(1);
    const std::size_t n = static_cast<std::size_t>(h) * w;

    ClassPrototypes out;
    out.class_map = downsample_nearest(weak.pseudo_labels, h, w);
    const BasicTensor<T> conf = downsample_nearest(weak.confidence, h, w);
    out.images.resize(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        auto& protos = out.images[static_cast<std::size_t>(b)];
        const auto cls = out.class_map.slab(b);
        const auto cf = conf.slab(b);
        for (std::size_t k = 0; k < n; ++k) protos[cls[k]].members.push_back(static_cast<int>(k));

        const T* fw = weak_features.slab(b).data();
        const T* fs = strong_features.slab(b).data();
        for (auto& [c, p] : protos) {
            double top = -std::numeric_limits<double>::infinity();
            for (int k : p.members) top = std::max(top, static_cast<double>(cf[k]));
            double sum = 0.0;
            p.weights.resize(p.members.size());
            for (std::size_t m = 0; m < p.members.size(); ++m) {
                p.weights[m] = std::exp(static_cast<double>(cf[p.members[m]]) - top);
                sum += p.weights[m];
            }
            for (auto& v : p.weights) v /= sum;
            p.weak.assign(static_cast<std::size_t>(D), 0.0);
            p.strong.assign(static_cast<std::size_t>(D), 0.0);
            for (int d = 0; d < D; ++d) {
                const std::size_t plane = static_cast<std::size_t>(d) * n;
                for (std::size_t m = 0; m < p.members.size(); ++m) {
                    p.weak[d] += p.weights[m] * fw[plane + p.members[m]];
                    p.strong[d] += p.weights[m] * fs[plane + p.members[m]];
                }
            }
        }
    }
    return out;
}

template <typename T>
ClassFeatureMap<T> class_feature_map(const ClassPrototypes& prototypes, int feature_dim, bool strong) {
    const LabelMap& cls = prototypes.class_map;
    const int B = cls.dim(0), h = cls.dim(1), w = cls.dim(2);
    ClassFeatureMap<T> out{BasicTensor<T>({B, feature_dim, h, w})};
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const Prototype& p = prototypes.images[static_cast<std::size_t>(b)].at(cls(b, i, j));
                const auto& v = strong ? p.strong : p.weak;
                for (int d = 0; d < feature_dim; ++d) out.values(b, d, i, j) = static_cast<T>(v[d]);
            }
    return out;
}

template <typename T>
ScalarLoss<T> ckr_loss(const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features,
                       const PredictionMap<T>& weak) {
    require_same_shape(strong_features, weak_features, "ckr_loss");
    const int B = strong_features.dim(0), D = strong_features.dim(1), h = strong_features.dim(2), w = strong_features.dim(3);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const ClassPrototypes protos = class_prototypes(weak_features, strong_features, weak, h, w);
    // Computed in double regardless of T; the broadcast maps are the literal per-pixel form.
    const auto strong_map = class_feature_map<double>(protos, D, true);
    const auto weak_map = class_feature_map<double>(protos, D, false);

    const double scale = 1.0 / (static_cast<double>(B) * n);
    std::vector<double> a(static_cast<std::size_t>(D)), v(static_cast<std::size_t>(D)), g(static_cast<std::size_t>(D));
    ScalarLoss<T> out;
    out.grad = BasicTensor<T>(strong_features.shape());
    double cos_sum = 0.0;
    for (int b = 0; b < B; ++b) {
        // dL/dD^c accumulated over the pixels broadcasting prototype c.
        std::map<int, std::vector<double>> grad_proto;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                for (int d = 0; d < D; ++d) {
                    a[d] = strong_map.values(b, d, i, j);
                    v[d] = weak_map.values(b, d, i, j);
                }
                cos_sum += cosine(a.data(), v.data(), D, g.data());
                auto& acc = grad_proto[protos.class_map(b, i, j)];
                acc.resize(static_cast<std::size_t>(D), 0.0);
                for (int d = 0; d < D; ++d) acc[d] -= scale * g[d];
            }
        T* gs = out.grad.slab(b).data();
        for (const auto& [c, p] : protos.images[static_cast<std::size_t>(b)]) {
            const auto& gp = grad_proto.at(c);
            for (std::size_t m = 0; m < p.members.size(); ++m)
                for (int d = 0; d < D; ++d) gs[static_cast<std::size_t>(d) * n + p.members[m]] = static_cast<T>(p.weights[m] * gp[d]);
        }
    }
    out.value = 1.0 - cos_sum * scale;
    return out;
}

LossBreakdown total_loss(double l_s, double l_x, double l_su, double l_cr, double alpha, double beta) {
    const double parts[] = {l_s, l_x, l_su, l_cr};
    const char* names[] = {"l_s", "l_x", "l_su", "l_cr"};
    for (int k = 0; k < 4; ++k) {
        if (!std::isfinite(parts[k])) throw DivergenceError(std::string("non-finite loss component ") + names[k]);
    }
    LossBreakdown out;
    out.l_s = l_s;
    out.l_x = l_x;
    out.l_su = l_su;
    out.l_cr = l_cr;
    out.alpha = alpha;
    out.beta = beta;
    out.total = l_s + l_x + alpha * l_su + beta * l_cr;
    return out;
}

#define UCCL_INSTANTIATE_LOSSES(T)                                                                                   \
    template BasicTensor<T> downsample_nearest<T>(const BasicTensor<T>&, int, int);                                  \
    template BasicTensor<T> upsample_nearest<T>(const BasicTensor<T>&, int, int);                                    \
    template BasicTensor<T> cross_entropy_map<T>(const BasicTensor<T>&, const LabelMap&);                            \
    template ScalarLoss<T> supervised_loss<T>(const BasicTensor<T>&, const LabelMap&);                               \
    template ScalarLoss<T> certainty_consistency_loss<T>(const BasicTensor<T>&, const PredictionMap<T>&, double);    \
    template SimilarityMap<T> per_location_similarity<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
    template UncertainMask uncertain_mask<T>(const PredictionMap<T>&, double, int, int);                             \
    template SbuWeightMap<T> sbu_weight_map<T>(const SimilarityMap<T>&, const UncertainMask&, const LabelMap&);      \
    template SbuResult<T> sbu_loss<T>(const BasicTensor<T>&, const PredictionMap<T>&, const BasicTensor<T>&,         \
                                      const BasicTensor<T>&, double);                                                \
    template ClassPrototypes class_prototypes<T>(const BasicTensor<T>&, const BasicTensor<T>&,                       \
                                                 const PredictionMap<T>&, int, int);                                 \
    template ClassFeatureMap<T> class_feature_map<T>(const ClassPrototypes&, int, bool);                             \
    template ScalarLoss<T> ckr_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&, const PredictionMap<T>&);

UCCL_INSTANTIATE_LOSSES(float)
UCCL_INSTANTIATE_LOSSES(double)

#undef UCCL_INSTANTIATE_LOSSES

}  // namespace uccl
