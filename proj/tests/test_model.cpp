#include <doctest.h>

#include <cmath>
#include <random>

#include "uccl/data.hpp"
#include "uccl/model.hpp"

using namespace uccl;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_height = 8;
    cfg.image_width = 4;
    cfg.feature_dim = 3;
    cfg.stride = 2;
    cfg.blocks = 2;
    cfg.num_classes = 3;
    return cfg;
}

template <typename T>
BasicTensor<T> random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
    BasicTensor<T> t(std::move(shape));
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : t.values()) v = static_cast<T>(n(rng));
    return t;
}

double dot(const TensorD& a, const TensorD& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("initialization and shapes") {
    ModelConfig cfg;
    const Model a = init_model<float>(cfg, 3), b = init_model<float>(cfg, 3), c = init_model<float>(cfg, 4);
    const auto pa = a.trainable(), pb = b.trainable(), pc = c.trainable();
    REQUIRE(pa.size() == 3 * 3 + 2);
    bool any_diff = false;
    for (std::size_t k = 0; k < pa.size(); ++k) {
        CHECK(*pa[k] == *pb[k]);
        any_diff = any_diff || !(*pa[k] == *pc[k]);
    }
    CHECK(any_diff);

    std::size_t counted = 0;
    for (const auto* t : pa) counted += t->size();
    CHECK(a.parameter_count() == counted);

    const Tensor x = random_tensor<float>({2, 3, 64, 64}, 1);
    const FeatureMap<float> f = encode(a, x);
    CHECK(f.values.shape() == std::vector<int>{2, 64, 16, 16});
    CHECK(f.stride == 4);
    const PredictionMap<float> p = decode(a, f);
    CHECK(p.logits.shape() == std::vector<int>{2, 4, 64, 64});
    CHECK(p.pseudo_labels.shape() == std::vector<int>{2, 64, 64});

    for (int b2 = 0; b2 < 2; ++b2) {
        for (int y = 0; y < 64; y += 9) {
            for (int x2 = 0; x2 < 64; x2 += 7) {
                double sum = 0.0;
                for (int k = 0; k < 4; ++k) sum += p.probabilities(b2, k, y, x2);
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
                const float conf = p.confidence(b2, y, x2);
                CHECK((conf > 0.0f && conf <= 1.0f));
                CHECK(p.probabilities(b2, p.pseudo_labels(b2, y, x2), y, x2) == conf);
            }
        }
    }
}

TEST_CASE("configuration errors") {
    ModelConfig cfg;
    cfg.stride = 3;
    CHECK_THROWS_AS(init_model<float>(cfg, 0), std::invalid_argument);
    cfg.stride = 8;
    cfg.image_height = 60;
    CHECK_THROWS_AS(init_model<float>(cfg, 0), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.num_classes = 1;
    CHECK_THROWS_AS(init_model<float>(cfg, 0), std::invalid_argument);

    const Model m = init_model<float>(ModelConfig{}, 0);
    CHECK_THROWS_AS(encode(m, Tensor({1, 3, 32, 64})), std::invalid_argument);
    CHECK_THROWS_AS(encode(m, Tensor({1, 1, 64, 64})), std::invalid_argument);
    CHECK_THROWS_AS(decode(m, FeatureMap<float>{Tensor({1, 5, 16, 16}), 4}), std::invalid_argument);
}

TEST_CASE("evaluation-mode forward") {
    const Model m = init_model<float>(ModelConfig{}, 9);
    const Tensor zeros({2, 3, 64, 64});
    const auto f = encode(m, zeros);
    for (float v : f.values.values()) REQUIRE(std::isfinite(v));

    DatasetConfig dc;
    const Scene s = generate_scene(1, dc);
    Tensor x({1, 3, 64, 64});
    std::copy(s.image.values().begin(), s.image.values().end(), x.data());
    const auto p1 = decode(m, encode(m, x));
    const auto p2 = decode(m, encode(m, x));
    CHECK(p1.logits == p2.logits);
    CHECK(p1.pseudo_labels == p2.pseudo_labels);
}

TEST_CASE("prediction fields") {
    const auto uniform = make_prediction(TensorD({1, 4, 2, 2}, 0.7));
    for (double c : uniform.confidence.values()) CHECK(c == doctest::Approx(0.25));
    for (int l : uniform.pseudo_labels.values()) CHECK(l == 0);

    TensorD logits({1, 3, 1, 1});
    logits[1] = 2.0;
    logits[2] = 2.0;
    CHECK(make_prediction(logits).pseudo_labels[0] == 1);
}

TEST_CASE("training forward updates running statistics only when asked") {
    Model m = init_model<float>(tiny_config(), 1);
    const Tensor x = random_tensor<float>({2, 3, 8, 4}, 2);
    const Tensor before = m.blocks[0].running_mean;
    forward_train(m, x, false);
    CHECK(m.blocks[0].running_mean == before);
    const auto trace = forward_train(m, x, true);
    CHECK_FALSE(m.blocks[0].running_mean == before);
    CHECK(trace.features.values.shape() == std::vector<int>{2, 3, 4, 2});
    CHECK(trace.logits.shape() == std::vector<int>{2, 3, 8, 4});
}

TEST_CASE("backward matches central differences in double precision") {
    // L = <logits, R> + <features, Q> in training mode (batch statistics).
    ModelParams<double> params = init_model<double>(tiny_config(), 5);
    // Break the symmetric initial state so every gradient is non-trivial.
    for (auto* t : params.trainable()) {
        const TensorD noise = random_tensor<double>(t->shape(), t->size() + 17, 0.3);
        for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] += noise[i];
    }
    const TensorD x = random_tensor<double>({2, 3, 8, 4}, 3);
    const TensorD R = random_tensor<double>({2, 3, 8, 4}, 4);
    const TensorD Q = random_tensor<double>({2, 3, 4, 2}, 5);

    auto loss = [&](ModelParams<double>& p) {
        const auto t = forward_train(p, x, false);
        return dot(t.logits, R) + dot(t.features.values, Q);
    };

    const auto trace = forward_train(params, x, false);
    Gradients<double> grads = zero_gradients(params);
    backward(params, trace, R, &Q, grads);

    const double eps = 1e-6;
    const auto tensors = params.trainable();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        TensorD& t = *tensors[k];
        double num = 0.0, den_a = 0.0, den_f = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + eps;
            const double up = loss(params);
            t[i] = keep - eps;
            const double down = loss(params);
            t[i] = keep;
            const double fd = (up - down) / (2 * eps);
            num += (grads[k][i] - fd) * (grads[k][i] - fd);
            den_a += grads[k][i] * grads[k][i];
            den_f += fd * fd;
        }
        const double rel = std::sqrt(num) / std::max({std::sqrt(den_a), std::sqrt(den_f), 1e-12});
        INFO("tensor " << k);
        CHECK(rel < 1e-6);
        CHECK(den_a > 0.0);
    }
}

TEST_CASE("gradients are finite on a random batch") {
    Model m = init_model<float>(ModelConfig{}, 2);
    const Tensor x = random_tensor<float>({2, 3, 64, 64}, 8, 0.5);
    const auto trace = forward_train(m, x);
    const Tensor g = random_tensor<float>(trace.logits.shape(), 3, 1e-3);
    Gradients<float> grads = zero_gradients(m);
    backward(m, trace, g, nullptr, grads);
    for (const auto& t : grads)
        for (float v : t.values()) REQUIRE(std::isfinite(v));
}
