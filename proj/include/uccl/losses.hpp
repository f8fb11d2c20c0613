#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "uccl/model.hpp"
#include "uccl/tensor.hpp"

namespace uccl {

/// Lower clamp on each vector norm in cosine similarities.
inline constexpr double kCosineEps = 1e-8;

/// Loss value and its gradient w.r.t. the single differentiable input of the loss.
template <typename T>
struct ScalarLoss {
    double value = 0.0;
    BasicTensor<T> grad;
};

/// Per-location cosine similarity of the two views' features, (B, h, w).
template <typename T>
struct SimilarityMap {
    BasicTensor<T> values;
};

/// 1 where the weak-view confidence is strictly below tau, at feature resolution.
struct UncertainMask {
    BasicTensor<std::uint8_t> values;  ///< (B, h, w)
    double tau = 0.0;
};

/// Per-(image, class) softmax of negated similarities over the uncertain members; zero elsewhere.
template <typename T>
struct SbuWeightMap {
    BasicTensor<T> values;  ///< (B, h, w)
};

template <typename T>
struct SbuArtifacts {
    SimilarityMap<T> similarity;
    UncertainMask mask;
    LabelMap class_map;  ///< pseudo-labels downsampled to (B, h, w)
    SbuWeightMap<T> weights;
};

template <typename T>
struct SbuResult {
    double value = 0.0;
    BasicTensor<T> grad;  ///< w.r.t. strong-view logits
    SbuArtifacts<T> artifacts;
};

/// Prototype pair for one class of one image.
struct Prototype {
    std::vector<double> weak;    ///< R: confidence-weighted mean of weak features (constant)
    std::vector<double> strong;  ///< D: same weights applied to strong features
    std::vector<double> weights; ///< H: softmax over member confidences
    std::vector<int> members;    ///< flat h*w indices of member pixels, ascending
    int count() const { return static_cast<int>(members.size()); }
};

/// Per image: class id -> prototype, for classes present in the downsampled pseudo-label map.
struct ClassPrototypes {
    std::vector<std::map<int, Prototype>> images;
    LabelMap class_map;  ///< (B, h, w)
};

/// Every pixel holds the prototype of its class, (B, D, h, w).
template <typename T>
struct ClassFeatureMap {
    BasicTensor<T> values;
};

struct LossBreakdown {
    double l_s = 0.0;
    double l_x = 0.0;
    double l_su = 0.0;
    double l_cr = 0.0;
    double total = 0.0;
    double alpha = 0.015;
    double beta = 0.02;
};

/// Raised when a loss component is not finite.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void check_tau(double tau);

/// Nearest-neighbor resampling, source index = floor(dst * in / out).
LabelMap downsample_nearest(const LabelMap& map, int h, int w);
template <typename T>
BasicTensor<T> downsample_nearest(const BasicTensor<T>& map, int h, int w);
template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& map, int H, int W);

/// -log softmax(logits)[target] per pixel, (B, H, W).
template <typename T>
BasicTensor<T> cross_entropy_map(const BasicTensor<T>& logits, const LabelMap& targets);

/// Mean cross-entropy over the batch and all pixels.
template <typename T>
ScalarLoss<T> supervised_loss(const BasicTensor<T>& logits, const LabelMap& labels);

/// Cross-entropy against weak pseudo-labels over pixels with confidence > tau, averaged over
/// B*H*W. The weak prediction is a constant.
template <typename T>
ScalarLoss<T> certainty_consistency_loss(const BasicTensor<T>& strong_logits, const PredictionMap<T>& weak, double tau);

template <typename T>
SimilarityMap<T> per_location_similarity(const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features);

/// Predicate at full resolution, then nearest-neighbor downsampling to (h, w).
template <typename T>
UncertainMask uncertain_mask(const PredictionMap<T>& weak, double tau, int h, int w);

template <typename T>
SbuWeightMap<T> sbu_weight_map(const SimilarityMap<T>& similarity, const UncertainMask& mask, const LabelMap& class_map);

/// Weighted cross-entropy over uncertain pixels. Weights are computed at feature resolution,
/// nearest-upsampled to H x W and treated as constants; the sum is divided by B only.
template <typename T>
SbuResult<T> sbu_loss(const BasicTensor<T>& strong_logits, const PredictionMap<T>& weak,
                      const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features, double tau);

template <typename T>
ClassPrototypes class_prototypes(const BasicTensor<T>& weak_features, const BasicTensor<T>& strong_features,
                                 const PredictionMap<T>& weak, int h, int w);

/// Broadcasts each pixel's class prototype; `strong` selects D (true) or R (false).
template <typename T>
ClassFeatureMap<T> class_feature_map(const ClassPrototypes& prototypes, int feature_dim, bool strong);

/// 1 - mean per-pixel cosine of the broadcast prototype maps. Gradient w.r.t. strong features.
template <typename T>
ScalarLoss<T> ckr_loss(const BasicTensor<T>& strong_features, const BasicTensor<T>& weak_features,
                       const PredictionMap<T>& weak);

/// total = l_s + l_x + alpha*l_su + beta*l_cr. Throws DivergenceError on a non-finite component.
LossBreakdown total_loss(double l_s, double l_x, double l_su, double l_cr, double alpha = 0.015, double beta = 0.02);

}  // namespace uccl
