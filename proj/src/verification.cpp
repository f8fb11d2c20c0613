#include "uccl/verification.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "uccl/losses.hpp"

namespace uccl {

namespace {

// Max softmax probability and argmax of the weak logits at one full-resolution pixel.
void weak_pixel(const TensorD& logits, int b, int y, int x, double& confidence, int& label) {
    const int C = logits.dim(1);
    label = 0;
    for (int c = 1; c < C; ++c)
        if (logits(b, c, y, x) > logits(b, label, y, x)) label = c;
    double denom = 0.0;
    for (int c = 0; c < C; ++c) denom += std::exp(logits(b, c, y, x) - logits(b, label, y, x));
    confidence = 1.0 / denom;
}

double naive_ce(const TensorD& logits, int b, int y, int x, int target) {
    double denom = 0.0;
    for (int c = 0; c < logits.dim(1); ++c) denom += std::exp(logits(b, c, y, x));
    return -std::log(std::exp(logits(b, target, y, x)) / denom);
}

double naive_cos(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    return dot / (std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8));
}

std::vector<double> column(const TensorD& f, int b, int i, int j) {
    std::vector<double> v(static_cast<std::size_t>(f.dim(1)));
    for (int d = 0; d < f.dim(1); ++d) v[d] = f(b, d, i, j);
    return v;
}

struct ClassSummary {
    int count = 0;
    std::vector<double> weak_proto, strong_proto;
};

// Literal prototype construction for one image: member pixels of class c, softmax of their
// confidences, weighted sums of the two feature sets.
std::vector<ClassSummary> naive_prototypes(const TensorD& strong_features, const TensorD& weak_features,
                                           const TensorD& weak_logits, int b, std::vector<int>& pixel_class) {
    const int C = weak_logits.dim(1), H = weak_logits.dim(2), W = weak_logits.dim(3);
    const int D = weak_features.dim(1), h = weak_features.dim(2), w = weak_features.dim(3);
    const int sy = H / h, sx = W / w;
    pixel_class.assign(static_cast<std::size_t>(h) * w, 0);
    std::vector<double> conf(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            int label = 0;
            weak_pixel(weak_logits, b, i * sy, j * sx, conf[i * w + j], label);
            pixel_class[i * w + j] = label;
        }

    std::vector<ClassSummary> out(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        double z = 0.0;
        for (int k = 0; k < h * w; ++k)
            if (pixel_class[k] == c) {
                z += std::exp(conf[k]);
                ++out[c].count;
            }
        if (out[c].count == 0) continue;
        out[c].weak_proto.assign(static_cast<std::size_t>(D), 0.0);
        out[c].strong_proto.assign(static_cast<std::size_t>(D), 0.0);
        for (int k = 0; k < h * w; ++k) {
            if (pixel_class[k] != c) continue;
            const double hk = std::exp(conf[k]) / z;
            for (int d = 0; d < D; ++d) {
                out[c].weak_proto[d] += hk * weak_features(b, d, k / w, k % w);
                out[c].strong_proto[d] += hk * strong_features(b, d, k / w, k % w);
            }
        }
    }
    return out;
}

}  // namespace

double sbu_loss_naive(const TensorD& strong_logits, const PredictionMap<double>& weak, const TensorD& strong_features,
                      const TensorD& weak_features, double tau) {
    const TensorD& wl = weak.logits;
    const int B = wl.dim(0), C = wl.dim(1), H = wl.dim(2), W = wl.dim(3);
    const int h = weak_features.dim(2), w = weak_features.dim(3);
    const int sy = H / h, sx = W / w;

    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        // Full-resolution uncertainty predicate and pseudo-labels.
        std::vector<int> full_label(static_cast<std::size_t>(H) * W);
        std::vector<int> full_uncertain(static_cast<std::size_t>(H) * W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double conf = 0.0;
                weak_pixel(wl, b, y, x, conf, full_label[y * W + x]);
                full_uncertain[y * W + x] = conf < tau ? 1 : 0;
            }

        // Feature-resolution weights, one softmax per class.
        std::vector<double> weight(static_cast<std::size_t>(h) * w, 0.0);
        for (int c = 0; c < C; ++c) {
            std::vector<int> where;
            std::vector<double> values;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) {
                    if (full_label[(i * sy) * W + j * sx] != c) continue;
                    if (!full_uncertain[(i * sy) * W + j * sx]) continue;
                    where.push_back(i * w + j);
                    values.push_back(naive_cos(column(strong_features, b, i, j), column(weak_features, b, i, j)));
                }
            double z = 0.0;
            for (double v : values) z += std::exp(-v);
            for (std::size_t k = 0; k < where.size(); ++k) weight[where[k]] = std::exp(-values[k]) / z;
        }

        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double wt = weight[(y / sy) * w + x / sx];
                if (wt != 0.0) loss += wt * naive_ce(strong_logits, b, y, x, full_label[y * W + x]);
            }
    }
    return loss / B;
}

double ckr_loss_naive(const TensorD& strong_features, const TensorD& weak_features, const PredictionMap<double>& weak) {
    const int B = weak_features.dim(0), h = weak_features.dim(2), w = weak_features.dim(3);
    const int N = h * w;
    double sum = 0.0;
    for (int b = 0; b < B; ++b) {
        std::vector<int> pixel_class;
        const auto protos = naive_prototypes(strong_features, weak_features, weak.logits, b, pixel_class);
        for (int k = 0; k < N; ++k) {
            const auto& p = protos[pixel_class[k]];
            sum += naive_cos(p.strong_proto, p.weak_proto);
        }
    }
    return 1.0 - sum / B / N;
}

double ckr_loss_closed_form(const TensorD& strong_features, const TensorD& weak_features,
                            const PredictionMap<double>& weak) {
    const int B = weak_features.dim(0), N = weak_features.dim(2) * weak_features.dim(3);
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
        std::vector<int> pixel_class;
        const auto protos = naive_prototypes(strong_features, weak_features, weak.logits, b, pixel_class);
        for (const auto& p : protos)
            if (p.count > 0) acc += static_cast<double>(p.count) / N * naive_cos(p.strong_proto, p.weak_proto);
    }
    return 1.0 - acc / B;
}

TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, const TensorD& x, double eps) {
    TensorD grad(x.shape());
    TensorD probe = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        probe[k] = x[k] + eps;
        const double up = f(probe);
        probe[k] = x[k] - eps;
        const double down = f(probe);
        probe[k] = x[k];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::domain_error("finite_diff_grad: non-finite function value at component " + std::to_string(k));
        }
        grad[k] = (up - down) / (2.0 * eps);
    }
    return grad;
}

MiouResult miou_naive(const LabelMap& pred, const LabelMap& gt, int num_classes) {
    require_same_shape(pred, gt, "miou_naive");
    MiouResult out;
    out.per_class.resize(static_cast<std::size_t>(num_classes));
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        long inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c, g = gt[i] == c;
            inter += (p && g) ? 1 : 0;
            uni += (p || g) ? 1 : 0;
        }
        if (uni == 0) continue;
        out.per_class[c] = static_cast<double>(inter) / static_cast<double>(uni);
        sum += *out.per_class[c];
        ++present;
    }
    if (present == 0) throw std::invalid_argument("miou_naive: no class present in prediction or ground truth");
    out.mean = sum / present;
    return out;
}

OracleReport compare(std::string case_id, std::string metric, double vectorized, double oracle, double tol) {
    OracleReport r;
    r.case_id = std::move(case_id);
    r.metric = std::move(metric);
    r.vectorized = vectorized;
    r.oracle = oracle;
    r.abs_err = std::abs(vectorized - oracle);
    r.rel_err = std::abs(oracle) > 0.0 ? r.abs_err / std::abs(oracle) : r.abs_err;
    r.pass = std::abs(oracle) < 1e-8 ? r.abs_err <= tol : r.rel_err <= tol;
    if (!std::isfinite(vectorized) || !std::isfinite(oracle)) r.pass = false;
    return r;
}

std::string LossInstance::descriptor() const {
    std::ostringstream s;
    s << "seed=" << seed << " B=" << batch << " C=" << classes << " h=" << height << " w=" << width << " D=" << dim
      << " stride=" << stride << " tau=" << std::setprecision(6) << tau;
    return s.str();
}

LossInstance make_loss_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    std::normal_distribution<double> normal(0.0, 1.0);

    LossInstance in;
    in.seed = seed;
    in.batch = pick(1, 2);
    in.classes = pick(2, 4);
    in.height = pick(1, 8);
    in.width = pick(1, 8);
    in.dim = pick(1, 16);
    in.stride = pick(1, 2);
    in.tau = std::uniform_real_distribution<double>(0.55, 0.9)(rng);
    const int H = in.height * in.stride, W = in.width * in.stride;
    const double weak_scale = std::uniform_real_distribution<double>(0.5, 4.0)(rng);

    TensorD weak_logits({in.batch, in.classes, H, W});
    for (auto& v : weak_logits.values()) v = weak_scale * normal(rng);
    in.strong_logits = TensorD({in.batch, in.classes, H, W});
    for (auto& v : in.strong_logits.values()) v = 2.0 * normal(rng);
    in.strong_features = TensorD({in.batch, in.dim, in.height, in.width});
    in.weak_features = TensorD({in.batch, in.dim, in.height, in.width});
    for (auto& v : in.weak_features.values()) v = normal(rng);
    // Correlated views, as produced by a shared encoder.
    for (std::size_t k = 0; k < in.strong_features.size(); ++k) {
        in.strong_features[k] = in.weak_features[k] + 0.8 * normal(rng);
    }
    in.weak = make_prediction(std::move(weak_logits));
    return in;
}

LossSuite LossSuite::reference() {
    LossSuite s;
    s.sbu = [](const LossInstance& in) {
        return sbu_loss(in.strong_logits, in.weak, in.strong_features, in.weak_features, in.tau).value;
    };
    s.ckr = [](const LossInstance& in) { return ckr_loss(in.strong_features, in.weak_features, in.weak).value; };
    s.consistency_at = [](const LossInstance& in, const TensorD& logits, TensorD* grad) {
        auto r = certainty_consistency_loss(logits, in.weak, in.tau);
        if (grad) *grad = std::move(r.grad);
        return r.value;
    };
    s.sbu_at = [](const LossInstance& in, const TensorD& logits, TensorD* grad) {
        auto r = sbu_loss(logits, in.weak, in.strong_features, in.weak_features, in.tau);
        if (grad) *grad = std::move(r.grad);
        return r.value;
    };
    s.ckr_at = [](const LossInstance& in, const TensorD& features, TensorD* grad) {
        auto r = ckr_loss(features, in.weak_features, in.weak);
        if (grad) *grad = std::move(r.grad);
        return r.value;
    };
    return s;
}

std::vector<OracleReport> run_oracle_campaign(int cases, std::uint64_t seed, double tol, const LossSuite& suite) {
    std::vector<OracleReport> out;
    for (int k = 0; k < cases; ++k) {
        const LossInstance in = make_loss_instance(seed + static_cast<std::uint64_t>(k));
        const std::string id = in.descriptor();
        out.push_back(compare(id, "sbu_loss",
                              suite.sbu(in),
                              sbu_loss_naive(in.strong_logits, in.weak, in.strong_features, in.weak_features, in.tau),
                              tol));
        out.push_back(compare(id, "ckr_loss", suite.ckr(in),
                              ckr_loss_naive(in.strong_features, in.weak_features, in.weak), tol));
    }
    return out;
}

namespace {

double norm(const TensorD& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return std::sqrt(s);
}

OracleReport gradient_report(const std::string& id, const std::string& metric, const TensorD& analytic,
                             const TensorD& numeric, double tol) {
    TensorD diff(analytic.shape());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = analytic[k] - numeric[k];
    const double scale = std::max(norm(analytic), norm(numeric));
    OracleReport r;
    r.case_id = id;
    r.metric = metric;
    r.vectorized = norm(analytic);
    r.oracle = norm(numeric);
    r.abs_err = norm(diff);
    r.rel_err = scale > 0.0 ? r.abs_err / scale : 0.0;
    r.pass = scale < 1e-8 ? r.abs_err <= tol : r.rel_err <= tol;
    return r;
}

}  // namespace

std::vector<OracleReport> run_gradient_campaign(int cases, std::uint64_t seed, double tol, const LossSuite& suite) {
    using Fn = std::function<double(const LossInstance&, const TensorD&, TensorD*)>;
    std::vector<OracleReport> out;
    for (int k = 0; k < cases; ++k) {
        const LossInstance in = make_loss_instance(seed + static_cast<std::uint64_t>(k));
        const std::string id = in.descriptor();
        auto check = [&](const std::string& metric, const Fn& fn, const TensorD& at) {
            TensorD analytic;
            fn(in, at, &analytic);
            const TensorD numeric = finite_diff_grad([&](const TensorD& x) { return fn(in, x, nullptr); }, at);
            out.push_back(gradient_report(id, metric, analytic, numeric, tol));
        };
        check("grad_l_x", suite.consistency_at, in.strong_logits);
        check("grad_l_su", suite.sbu_at, in.strong_logits);
        check("grad_l_cr", suite.ckr_at, in.strong_features);
    }
    return out;
}

bool all_pass(const std::vector<OracleReport>& reports) {
    return std::all_of(reports.begin(), reports.end(), [](const OracleReport& r) { return r.pass; });
}

void write_report_csv(std::ostream& out, const std::vector<OracleReport>& reports) {
    out << "case,metric,vectorized,oracle,rel_err,pass\n";
    out << std::setprecision(17);
    for (const auto& r : reports) {
        out << '"' << r.case_id << "\"," << r.metric << ',' << r.vectorized << ',' << r.oracle << ',' << r.rel_err << ','
            << (r.pass ? 1 : 0) << '\n';
    }
}

}  // namespace uccl
