#include "uccl/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace uccl {

void ModelConfig::validate() const {
    if (stride < 1 || (stride & (stride - 1)) != 0) {
        throw std::invalid_argument("model: stride must be a power of two, got " + std::to_string(stride));
    }
    if (image_height % stride != 0 || image_width % stride != 0) {
        throw std::invalid_argument("model: image size " + std::to_string(image_height) + "x" +
                                    std::to_string(image_width) + " not divisible by stride " +
                                    std::to_string(stride));
    }
    int downsamples = 0;
    for (int s = stride; s > 1; s >>= 1) ++downsamples;
    if (blocks < std::max(1, downsamples)) {
        throw std::invalid_argument("model: need at least log2(stride) conv blocks");
    }
    if (feature_dim < 1 || num_classes < 2 || in_channels < 1) {
        throw std::invalid_argument("model: feature_dim >= 1, num_classes >= 2 and in_channels >= 1 required");
    }
    if (!(bn_momentum > 0.0 && bn_momentum <= 1.0) || !(bn_eps > 0.0)) {
        throw std::invalid_argument("model: bad normalization constants");
    }
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

int out_size(int in, int stride) { return (in - 1) / stride + 1; }

// 3x3 kernel, padding 1.
template <typename T>
void im2col(const T* x, int channels, int h, int w, int stride, T* col) {
    const int ho = out_size(h, stride), wo = out_size(w, stride);
    const std::size_t P = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * P;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(static_cast<std::size_t>(c) * h + iy) * w + ix]
                                                : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, int channels, int h, int w, int stride, T* dx) {
    const int ho = out_size(h, stride), wo = out_size(w, stride);
    const std::size_t P = static_cast<std::size_t>(ho) * wo;
    std::fill_n(dx, static_cast<std::size_t>(channels) * h * w, T(0));
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * P;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < w) dx[(static_cast<std::size_t>(c) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

// Bilinear resampling weights with half-pixel centers (align_corners = false).
struct Taps {
    std::vector<int> lo, hi;
    std::vector<double> w_lo, w_hi;
};

Taps bilinear_taps(int in, int out) {
    Taps t;
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        const double src = std::max((o + 0.5) * scale - 0.5, 0.0);
        const int i0 = std::min(static_cast<int>(src), in - 1);
        const int i1 = std::min(i0 + 1, in - 1);
        const double l1 = src - i0;
        t.lo.push_back(i0);
        t.hi.push_back(i1);
        t.w_lo.push_back(1.0 - l1);
        t.w_hi.push_back(l1);
    }
    return t;
}

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& low, int H, int W) {
    const int B = low.dim(0), C = low.dim(1), h = low.dim(2), w = low.dim(3);
    const Taps ty = bilinear_taps(h, H), tx = bilinear_taps(w, W);
    BasicTensor<T> out({B, C, H, W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double top = tx.w_lo[x] * low(b, c, ty.lo[y], tx.lo[x]) + tx.w_hi[x] * low(b, c, ty.lo[y], tx.hi[x]);
                    const double bot = tx.w_lo[x] * low(b, c, ty.hi[y], tx.lo[x]) + tx.w_hi[x] * low(b, c, ty.hi[y], tx.hi[x]);
                    out(b, c, y, x) = static_cast<T>(ty.w_lo[y] * top + ty.w_hi[y] * bot);
                }
    return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& grad, int h, int w) {
    const int B = grad.dim(0), C = grad.dim(1), H = grad.dim(2), W = grad.dim(3);
    const Taps ty = bilinear_taps(h, H), tx = bilinear_taps(w, W);
    BasicTensor<T> low({B, C, h, w});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const T g = grad(b, c, y, x);
                    low(b, c, ty.lo[y], tx.lo[x]) += static_cast<T>(ty.w_lo[y] * tx.w_lo[x]) * g;
                    low(b, c, ty.lo[y], tx.hi[x]) += static_cast<T>(ty.w_lo[y] * tx.w_hi[x]) * g;
                    low(b, c, ty.hi[y], tx.lo[x]) += static_cast<T>(ty.w_hi[y] * tx.w_lo[x]) * g;
                    low(b, c, ty.hi[y], tx.hi[x]) += static_cast<T>(ty.w_hi[y] * tx.w_hi[x]) * g;
                }
    return low;
}

// Convolution of every image in x; optionally keeps the im2col buffers.
template <typename T>
BasicTensor<T> conv3x3(const BasicTensor<T>& x, const BasicTensor<T>& weight, int stride, BasicTensor<T>* keep_columns) {
    const int B = x.dim(0), Cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int Cout = weight.dim(0);
    if (weight.dim(1) != Cin) throw std::invalid_argument("conv: channel mismatch");
    const int ho = out_size(h, stride), wo = out_size(w, stride);
    const int K = Cin * 9, P = ho * wo;
    BasicTensor<T> y({B, Cout, ho, wo});
    BasicTensor<T> columns({B, K, P});
    ConstMapMat<T> wm(weight.data(), Cout, K);
    for (int b = 0; b < B; ++b) {
        T* col = columns.slab(b).data();
        im2col(x.slab(b).data(), Cin, h, w, stride, col);
        MapMat<T>(y.slab(b).data(), Cout, P).noalias() = wm * ConstMapMat<T>(col, K, P);
    }
    if (keep_columns) *keep_columns = std::move(columns);
    return y;
}

}  // namespace

template <typename T>
PredictionMap<T> make_prediction(BasicTensor<T> logits) {
    if (logits.rank() != 4) throw std::invalid_argument("make_prediction: logits must be (B,C,H,W)");
    const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    PredictionMap<T> p;
    p.probabilities = BasicTensor<T>(logits.shape());
    p.confidence = BasicTensor<T>({B, H, W});
    p.pseudo_labels = LabelMap({B, H, W});
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                int best = 0;
                T top = logits(b, 0, y, x);
                for (int c = 1; c < C; ++c) {
                    if (logits(b, c, y, x) > top) {
                        top = logits(b, c, y, x);
                        best = c;
                    }
                }
                double sum = 0.0;
                for (int c = 0; c < C; ++c) sum += std::exp(static_cast<double>(logits(b, c, y, x) - top));
                for (int c = 0; c < C; ++c) {
                    p.probabilities(b, c, y, x) = static_cast<T>(std::exp(static_cast<double>(logits(b, c, y, x) - top)) / sum);
                }
                p.confidence(b, y, x) = static_cast<T>(1.0 / sum);
                p.pseudo_labels(b, y, x) = best;
            }
    p.logits = std::move(logits);
    return p;
}

template <typename T>
std::vector<BasicTensor<T>*> ModelParams<T>::trainable() {
    std::vector<BasicTensor<T>*> out;
    for (auto& b : blocks) {
        out.push_back(&b.weight);
        out.push_back(&b.gamma);
        out.push_back(&b.beta);
    }
    out.push_back(&head_weight);
    out.push_back(&head_bias);
    return out;
}

template <typename T>
std::vector<const BasicTensor<T>*> ModelParams<T>::trainable() const {
    std::vector<const BasicTensor<T>*> out;
    for (auto* t : const_cast<ModelParams<T>*>(this)->trainable()) out.push_back(t);
    return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : trainable()) n += t->size();
    return n;
}

template <typename T>
Gradients<T> zero_gradients(const ModelParams<T>& params) {
    Gradients<T> g;
    for (const auto* t : params.trainable()) g.emplace_back(t->shape(), T(0));
    return g;
}

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams<T> params;
    params.config = cfg;
    params.seed = seed;
    std::mt19937_64 rng(seed);

    int downsamples = 0;
    for (int s = cfg.stride; s > 1; s >>= 1) ++downsamples;
    int in = cfg.in_channels;
    for (int b = 0; b < cfg.blocks; ++b) {
        const int out = b == cfg.blocks - 1 ? cfg.feature_dim : std::max(8, cfg.feature_dim >> (cfg.blocks - 1 - b));
        ConvBlock<T> block;
        block.stride = b < downsamples ? 2 : 1;
        block.weight = BasicTensor<T>({out, in, 3, 3});
        std::normal_distribution<double> he(0.0, std::sqrt(2.0 / (in * 9)));
        for (auto& v : block.weight.values()) v = static_cast<T>(he(rng));
        block.gamma = BasicTensor<T>({out}, T(1));
        block.beta = BasicTensor<T>({out}, T(0));
        block.running_mean = BasicTensor<T>({out}, T(0));
        block.running_var = BasicTensor<T>({out}, T(1));
        params.blocks.push_back(std::move(block));
        in = out;
    }
    params.head_weight = BasicTensor<T>({cfg.num_classes, cfg.feature_dim});
    std::normal_distribution<double> head(0.0, 0.01);
    for (auto& v : params.head_weight.values()) v = static_cast<T>(head(rng));
    params.head_bias = BasicTensor<T>({cfg.num_classes}, T(0));
    return params;
}

namespace {

template <typename T>
void check_input(const ModelConfig& cfg, const BasicTensor<T>& x) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.image_height || x.dim(3) != cfg.image_width) {
        throw std::invalid_argument("encode: expected (B," + std::to_string(cfg.in_channels) + "," +
                                    std::to_string(cfg.image_height) + "," + std::to_string(cfg.image_width) +
                                    ") input, got " + shape_string(x.shape()));
    }
}

}  // namespace

template <typename T>
FeatureMap<T> encode(const ModelParams<T>& params, const BasicTensor<T>& x) {
    check_input(params.config, x);
    BasicTensor<T> act = x;
    for (const auto& block : params.blocks) {
        BasicTensor<T> z = conv3x3<T>(act, block.weight, block.stride, nullptr);
        const int B = z.dim(0), C = z.dim(1);
        const std::size_t P = static_cast<std::size_t>(z.dim(2)) * z.dim(3);
        for (int c = 0; c < C; ++c) {
            const double inv = 1.0 / std::sqrt(static_cast<double>(block.running_var[c]) + params.config.bn_eps);
            const double scale = block.gamma[c] * inv;
            const double shift = block.beta[c] - block.running_mean[c] * scale;
            for (int b = 0; b < B; ++b) {
                T* v = z.data() + (static_cast<std::size_t>(b) * C + c) * P;
                for (std::size_t i = 0; i < P; ++i) v[i] = std::max(T(0), static_cast<T>(v[i] * scale + shift));
            }
        }
        act = std::move(z);
    }
    return {std::move(act), params.config.stride};
}

namespace {

template <typename T>
BasicTensor<T> head_logits(const ModelParams<T>& params, const BasicTensor<T>& features) {
    const int B = features.dim(0), D = features.dim(1), h = features.dim(2), w = features.dim(3);
    const int C = params.config.num_classes;
    if (D != params.head_weight.dim(1)) {
        throw std::invalid_argument("decode: feature channels " + std::to_string(D) + " != " +
                                    std::to_string(params.head_weight.dim(1)));
    }
    const int P = h * w;
    BasicTensor<T> low({B, C, h, w});
    ConstMapMat<T> wm(params.head_weight.data(), C, D);
    for (int b = 0; b < B; ++b) {
        MapMat<T> out(low.slab(b).data(), C, P);
        out.noalias() = wm * ConstMapMat<T>(features.slab(b).data(), D, P);
        for (int c = 0; c < C; ++c) out.row(c).array() += params.head_bias[c];
    }
    return upsample_bilinear(low, params.config.image_height, params.config.image_width);
}

}  // namespace

template <typename T>
PredictionMap<T> decode(const ModelParams<T>& params, const FeatureMap<T>& features) {
    return make_prediction(head_logits(params, features.values));
}

template <typename T>
ForwardTrace<T> forward_train(ModelParams<T>& params, const BasicTensor<T>& x, bool update_running_stats) {
    check_input(params.config, x);
    const double momentum = params.config.bn_momentum, eps = params.config.bn_eps;
    ForwardTrace<T> trace;
    const BasicTensor<T>* input = &x;
    for (auto& block : params.blocks) {
        typename ForwardTrace<T>::BlockCache cache;
        cache.in_height = input->dim(2);
        cache.in_width = input->dim(3);
        BasicTensor<T> z = conv3x3(*input, block.weight, block.stride, &cache.columns);
        const int B = z.dim(0), C = z.dim(1);
        const std::size_t P = static_cast<std::size_t>(z.dim(2)) * z.dim(3);
        const double n = static_cast<double>(B) * P;
        cache.normed = BasicTensor<T>(z.shape());
        cache.output = BasicTensor<T>(z.shape());
        cache.inv_std.resize(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            double mean = 0.0;
            for (int b = 0; b < B; ++b) {
                const T* v = z.data() + (static_cast<std::size_t>(b) * C + c) * P;
                for (std::size_t i = 0; i < P; ++i) mean += v[i];
            }
            mean /= n;
            double var = 0.0;
            for (int b = 0; b < B; ++b) {
                const T* v = z.data() + (static_cast<std::size_t>(b) * C + c) * P;
                for (std::size_t i = 0; i < P; ++i) var += (v[i] - mean) * (v[i] - mean);
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            cache.inv_std[static_cast<std::size_t>(c)] = static_cast<T>(inv);
            for (int b = 0; b < B; ++b) {
                const std::size_t off = (static_cast<std::size_t>(b) * C + c) * P;
                for (std::size_t i = 0; i < P; ++i) {
                    const T xn = static_cast<T>((z[off + i] - mean) * inv);
                    cache.normed[off + i] = xn;
                    cache.output[off + i] = std::max(T(0), block.gamma[c] * xn + block.beta[c]);
                }
            }
            if (update_running_stats) {
                const double unbiased = n > 1 ? var * n / (n - 1) : var;
                block.running_mean[c] = static_cast<T>((1 - momentum) * block.running_mean[c] + momentum * mean);
                block.running_var[c] = static_cast<T>((1 - momentum) * block.running_var[c] + momentum * unbiased);
            }
        }
        trace.blocks.push_back(std::move(cache));
        input = &trace.blocks.back().output;
    }
    trace.features = {trace.blocks.back().output, params.config.stride};
    trace.logits = head_logits(params, trace.features.values);
    return trace;
}

template <typename T>
void backward(const ModelParams<T>& params, const ForwardTrace<T>& trace, const BasicTensor<T>& grad_logits,
              const std::type_identity_t<BasicTensor<T>>* grad_features, Gradients<T>& grads) {
    require_same_shape(grad_logits, trace.logits, "backward logits");
    const BasicTensor<T>& F = trace.features.values;
    const int B = F.dim(0), D = F.dim(1), h = F.dim(2), w = F.dim(3);
    const int C = params.config.num_classes, P = h * w;
    const std::size_t nblocks = params.blocks.size();
    auto& g_head_w = grads[3 * nblocks];
    auto& g_head_b = grads[3 * nblocks + 1];

    // Decoder.
    const BasicTensor<T> g_low = upsample_bilinear_backward(grad_logits, h, w);
    BasicTensor<T> g_act(F.shape());
    ConstMapMat<T> wm(params.head_weight.data(), C, D);
    MapMat<T> gw(g_head_w.data(), C, D);
    for (int b = 0; b < B; ++b) {
        ConstMapMat<T> gl(g_low.slab(b).data(), C, P);
        ConstMapMat<T> fb(F.slab(b).data(), D, P);
        gw.noalias() += gl * fb.transpose();
        for (int c = 0; c < C; ++c) g_head_b[c] += gl.row(c).sum();
        MapMat<T>(g_act.slab(b).data(), D, P).noalias() = wm.transpose() * gl;
    }
    if (grad_features) {
        require_same_shape(*grad_features, F, "backward features");
        for (std::size_t i = 0; i < g_act.size(); ++i) g_act[i] += (*grad_features)[i];
    }

    // Encoder, last block first.
    for (std::size_t k = nblocks; k-- > 0;) {
        const auto& block = params.blocks[k];
        const auto& cache = trace.blocks[k];
        auto& g_weight = grads[3 * k];
        auto& g_gamma = grads[3 * k + 1];
        auto& g_beta = grads[3 * k + 2];
        const int Cout = cache.output.dim(1);
        const std::size_t Pk = static_cast<std::size_t>(cache.output.dim(2)) * cache.output.dim(3);
        const double n = static_cast<double>(B) * Pk;

        BasicTensor<T> g_z(cache.output.shape());
        for (int c = 0; c < Cout; ++c) {
            double sum_dy = 0.0, sum_dy_xn = 0.0;
            for (int b = 0; b < B; ++b) {
                const std::size_t off = (static_cast<std::size_t>(b) * Cout + c) * Pk;
                for (std::size_t i = 0; i < Pk; ++i) {
                    const T dy = cache.output[off + i] > T(0) ? g_act[off + i] : T(0);
                    g_z[off + i] = dy;
                    sum_dy += dy;
                    sum_dy_xn += dy * cache.normed[off + i];
                }
            }
            g_beta[c] += static_cast<T>(sum_dy);
            g_gamma[c] += static_cast<T>(sum_dy_xn);
            const double scale = block.gamma[c] * cache.inv_std[static_cast<std::size_t>(c)] / n;
            for (int b = 0; b < B; ++b) {
                const std::size_t off = (static_cast<std::size_t>(b) * Cout + c) * Pk;
                for (std::size_t i = 0; i < Pk; ++i) {
                    g_z[off + i] = static_cast<T>(scale * (n * g_z[off + i] - sum_dy - cache.normed[off + i] * sum_dy_xn));
                }
            }
        }

        const int Cin = block.weight.dim(1), K = Cin * 9;
        ConstMapMat<T> wk(block.weight.data(), Cout, K);
        MapMat<T> gwk(g_weight.data(), Cout, K);
        const bool need_input_grad = k > 0;
        BasicTensor<T> g_in;
        AlignedVector<T> g_col;
        if (need_input_grad) {
            g_in = BasicTensor<T>({B, Cin, cache.in_height, cache.in_width});
            g_col.resize(static_cast<std::size_t>(K) * Pk);
        }
        for (int b = 0; b < B; ++b) {
            ConstMapMat<T> gz(g_z.slab(b).data(), Cout, static_cast<Eigen::Index>(Pk));
            ConstMapMat<T> col(cache.columns.slab(b).data(), K, static_cast<Eigen::Index>(Pk));
            gwk.noalias() += gz * col.transpose();
            if (need_input_grad) {
                MapMat<T>(g_col.data(), K, static_cast<Eigen::Index>(Pk)).noalias() = wk.transpose() * gz;
                col2im(g_col.data(), Cin, cache.in_height, cache.in_width, block.stride, g_in.slab(b).data());
            }
        }
        if (need_input_grad) g_act = std::move(g_in);
    }
}

#define UCCL_INSTANTIATE_MODEL(T)                                                                            \
    template PredictionMap<T> make_prediction<T>(BasicTensor<T>);                                            \
    template struct ModelParams<T>;                                                                          \
    template Gradients<T> zero_gradients<T>(const ModelParams<T>&);                                          \
    template ModelParams<T> init_model<T>(const ModelConfig&, std::uint64_t);                                \
    template FeatureMap<T> encode<T>(const ModelParams<T>&, const BasicTensor<T>&);                          \
    template PredictionMap<T> decode<T>(const ModelParams<T>&, const FeatureMap<T>&);                        \
    template ForwardTrace<T> forward_train<T>(ModelParams<T>&, const BasicTensor<T>&, bool);                 \
    template void backward<T>(const ModelParams<T>&, const ForwardTrace<T>&, const BasicTensor<T>&,          \
                              const BasicTensor<T>*, Gradients<T>&);

UCCL_INSTANTIATE_MODEL(float)
UCCL_INSTANTIATE_MODEL(double)

#undef UCCL_INSTANTIATE_MODEL

}  // namespace uccl
