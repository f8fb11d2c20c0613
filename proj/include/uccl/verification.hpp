#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uccl/model.hpp"
#include "uccl/tensor.hpp"

namespace uccl {

// Oracles in this module are literal loop transcriptions; they only use the raw tensors and
// share no code with the losses module.

/// Weighted cross-entropy over uncertain pixels, recomputing confidence, pseudo-labels,
/// similarities, the mask and the per-class softmax element by element.
double sbu_loss_naive(const TensorD& strong_logits, const PredictionMap<double>& weak, const TensorD& strong_features,
                      const TensorD& weak_features, double tau);

/// Prototype regulation loss via explicit per-pixel broadcast.
double ckr_loss_naive(const TensorD& strong_features, const TensorD& weak_features, const PredictionMap<double>& weak);

/// 1 - (1/B) sum_i sum_c (E_c / N) cos(D^c, R^c).
double ckr_loss_closed_form(const TensorD& strong_features, const TensorD& weak_features,
                            const PredictionMap<double>& weak);

/// Central differences (f(x + eps e_k) - f(x - eps e_k)) / (2 eps) for every component of x.
/// Throws std::domain_error when f returns a non-finite value.
TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, const TensorD& x, double eps = 1e-3);

struct MiouResult {
    std::vector<std::optional<double>> per_class;  ///< nullopt for classes absent from both maps
    double mean = 0.0;
};

/// IoU per class from explicit set counts. Throws when no class occurs in either map.
MiouResult miou_naive(const LabelMap& pred, const LabelMap& gt, int num_classes);

struct OracleReport {
    std::string case_id;  ///< reconstructs the inputs, e.g. "seed=12 B=2 C=3 ..."
    std::string metric;
    double vectorized = 0.0;
    double oracle = 0.0;
    double abs_err = 0.0;
    double rel_err = 0.0;
    bool pass = false;
};

/// pass <=> rel_err <= tol, or abs_err <= tol when |oracle| < 1e-8.
OracleReport compare(std::string case_id, std::string metric, double vectorized, double oracle, double tol);

/// Small random loss inputs, fully determined by `seed`.
struct LossInstance {
    std::uint64_t seed = 0;
    int batch = 1, classes = 2, height = 1, width = 1, dim = 1, stride = 1;
    double tau = 0.5;
    TensorD strong_logits;
    PredictionMap<double> weak;
    TensorD strong_features;
    TensorD weak_features;

    std::string descriptor() const;
};

/// B <= 2, C <= 4, h, w <= 8, D <= 16, stride in {1, 2}.
LossInstance make_loss_instance(std::uint64_t seed);

/// The losses under test. Defaults bind to the losses module; tests substitute faulty versions.
struct LossSuite {
    std::function<double(const LossInstance&)> sbu;
    std::function<double(const LossInstance&)> ckr;
    /// Value and analytic gradient w.r.t. strong logits (L_x, L_su) or strong features (L_cr).
    std::function<double(const LossInstance&, const TensorD& strong_logits, TensorD* grad)> consistency_at;
    std::function<double(const LossInstance&, const TensorD& strong_logits, TensorD* grad)> sbu_at;
    std::function<double(const LossInstance&, const TensorD& strong_features, TensorD* grad)> ckr_at;

    static LossSuite reference();
};

/// sbu and ckr against their naive oracles on `cases` instances each.
std::vector<OracleReport> run_oracle_campaign(int cases, std::uint64_t seed, double tol = 1e-6,
                                              const LossSuite& suite = LossSuite::reference());

/// Analytic vs central-difference gradients of L_x, L_su and L_cr on `cases` instances each.
/// The relative error is ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||).
std::vector<OracleReport> run_gradient_campaign(int cases, std::uint64_t seed, double tol = 1e-4,
                                                const LossSuite& suite = LossSuite::reference());

bool all_pass(const std::vector<OracleReport>& reports);

/// CSV with header case,metric,vectorized,oracle,rel_err,pass.
void write_report_csv(std::ostream& out, const std::vector<OracleReport>& reports);

}  // namespace uccl
