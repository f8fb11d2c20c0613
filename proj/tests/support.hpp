#pragma once

#include <cmath>
#include <initializer_list>
#include <vector>

#include "uccl/model.hpp"
#include "uccl/tensor.hpp"

namespace uccl::test {

template <typename T = double>
BasicTensor<T> tensor(std::vector<int> shape, std::initializer_list<double> values) {
    BasicTensor<T> t(std::move(shape));
    std::size_t i = 0;
    for (double v : values) t[i++] = static_cast<T>(v);
    return t;
}

/// Prediction whose softmax equals `probs` exactly up to rounding, (B, C, H, W).
template <typename T = double>
PredictionMap<T> prediction_from_probs(const BasicTensor<T>& probs) {
    BasicTensor<T> logits = probs;
    for (auto& v : logits.values()) v = static_cast<T>(std::log(static_cast<double>(v)));
    return make_prediction(std::move(logits));
}

/// Two-class prediction with the given per-pixel probability of class 0, (1, 2, H, W).
inline PredictionMap<double> binary_prediction(int H, int W, std::initializer_list<double> p0) {
    TensorD probs({1, 2, H, W});
    int k = 0;
    for (double p : p0) {
        probs(0, 0, k / W, k % W) = p;
        probs(0, 1, k / W, k % W) = 1.0 - p;
        ++k;
    }
    return prediction_from_probs(probs);
}

}  // namespace uccl::test
