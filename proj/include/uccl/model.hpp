#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>
#include <type_traits>

#include "uccl/tensor.hpp"

namespace uccl {

struct ModelConfig {
    int image_height = 64;
    int image_width = 64;
    int in_channels = 3;
    int feature_dim = 64;  ///< D
    int stride = 4;        ///< power of two; h = H / stride
    int num_classes = 4;
    int blocks = 3;        ///< conv blocks; the first log2(stride) downsample by 2
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    /// Throws std::invalid_argument for unusable shapes.
    void validate() const;
    int feature_height() const { return image_height / stride; }
    int feature_width() const { return image_width / stride; }
};

/// Encoder output, (B, D, h, w).
template <typename T>
struct FeatureMap {
    BasicTensor<T> values;
    int stride = 1;
};

/// Decoder output and its derived fields.
template <typename T>
struct PredictionMap {
    BasicTensor<T> logits;         ///< (B, C, H, W)
    BasicTensor<T> probabilities;  ///< softmax over C
    BasicTensor<T> confidence;     ///< (B, H, W) max probability
    LabelMap pseudo_labels;        ///< (B, H, W) argmax class

    int classes() const { return logits.dim(1); }
};

/// Softmax, confidence and argmax of (B, C, H, W) logits. Ties go to the lowest class index.
template <typename T>
PredictionMap<T> make_prediction(BasicTensor<T> logits);

template <typename T>
struct ConvBlock {
    BasicTensor<T> weight;  ///< (Cout, Cin, 3, 3), no bias (normalization follows)
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    int stride = 1;
};

/// The single parameter set shared by every forward pass of a step.
template <typename T>
struct ModelParams {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::vector<ConvBlock<T>> blocks;
    BasicTensor<T> head_weight;  ///< (C, D)
    BasicTensor<T> head_bias;    ///< (C)

    /// Trainable tensors in a fixed order; gradients and optimizer state use the same order.
    std::vector<BasicTensor<T>*> trainable();
    std::vector<const BasicTensor<T>*> trainable() const;
    std::size_t parameter_count() const;
};

template <typename T>
using Gradients = std::vector<BasicTensor<T>>;

template <typename T>
Gradients<T> zero_gradients(const ModelParams<T>& params);

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Evaluation-mode encoder (running statistics); pure in (params, x).
template <typename T>
FeatureMap<T> encode(const ModelParams<T>& params, const BasicTensor<T>& x);

/// Classifier head followed by bilinear upsampling to the image size.
template <typename T>
PredictionMap<T> decode(const ModelParams<T>& params, const FeatureMap<T>& features);

/// Activations kept by a training-mode forward for the backward pass.
template <typename T>
struct ForwardTrace {
    struct BlockCache {
        BasicTensor<T> columns;  ///< (B, Cin*9, h_out*w_out) im2col of the block input
        BasicTensor<T> normed;   ///< (B, Cout, h, w) normalized pre-affine values
        std::vector<T> inv_std;  ///< per channel
        BasicTensor<T> output;   ///< post-ReLU
        int in_height = 0;
        int in_width = 0;
    };
    std::vector<BlockCache> blocks;
    FeatureMap<T> features;
    BasicTensor<T> logits;
};

/// Training-mode forward using batch statistics. Running statistics are updated when
/// `update_running_stats` is set.
template <typename T>
ForwardTrace<T> forward_train(ModelParams<T>& params, const BasicTensor<T>& x, bool update_running_stats = true);

/// Accumulates into `grads` the gradient of a scalar loss given dL/dlogits and, optionally,
/// an additional dL/dfeatures entering at the encoder output.
template <typename T>
void backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits,
              const std::type_identity_t<BasicTensor<T>>* grad_features, Gradients<T>& grads);

using Model = ModelParams<float>;

}  // namespace uccl
