#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uccl/data.hpp"
#include "uccl/losses.hpp"
#include "uccl/model.hpp"

namespace uccl {

struct TrainConfig {
    DatasetConfig dataset;
    ModelConfig model;
    AugmentConfig augment;
    double tau = 0.95;
    double alpha = 0.015;
    double beta = 0.02;
    double base_lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 40;
    int batch_size = 8;
    std::uint64_t seed = 0;
    Ratio ratio{1, 4};
    bool enable_sbu = true;
    bool enable_ckr = true;
    int eval_every = 5;  ///< epochs between evaluations; the last epoch is always evaluated
    std::string data_dir = "dataset";

    /// Throws std::invalid_argument when a field is out of range or dataset/model disagree.
    void validate() const;
};

/// base_lr * (1 - step / total_steps)^0.9
double poly_lr(int step, int total_steps, double base_lr);

/// SGD with momentum and L2 weight decay; velocity is stored per trainable tensor.
class Sgd {
public:
    Sgd() = default;
    Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(Model& params, const Gradients<float>& grads, double lr);

    std::vector<Tensor>& velocity() { return velocity_; }
    const std::vector<Tensor>& velocity() const { return velocity_; }
    double momentum() const { return momentum_; }
    double weight_decay() const { return weight_decay_; }

private:
    double momentum_ = 0.9;
    double weight_decay_ = 1e-4;
    std::vector<Tensor> velocity_;
};

struct TrainState {
    Model params;
    Sgd optimizer;
    int step = 0;
};

TrainState init_train_state(const TrainConfig& cfg);

/// Unlabeled-branch losses and their gradients on a concatenated (x^w, x^s) forward.
/// Gradients cover the whole 2B batch; the weak half is identically zero.
struct UnlabeledObjective {
    double l_x = 0.0;
    double l_su = 0.0;
    double l_cr = 0.0;
    Tensor grad_logits;    ///< (2B, C, H, W)
    Tensor grad_features;  ///< (2B, D, h, w)
};

UnlabeledObjective unlabeled_objective(const Tensor& logits, const Tensor& features, int batch, const TrainConfig& cfg);

/// One optimizer update on L = L_s + L_x + alpha L_su + beta L_cr. Disabled terms and a missing
/// unlabeled batch contribute exactly 0. Throws DivergenceError on a non-finite loss.
LossBreakdown train_step(TrainState& state, const LabeledBatch& labeled, const UnlabeledBatch* unlabeled,
                         const TrainConfig& cfg, double lr);

/// Global C x C counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void add(const LabelMap& pred, const LabelMap& gt);
    std::uint64_t at(int truth, int predicted) const;
    int num_classes() const { return classes_; }
    /// TP / (TP + FP + FN); nullopt for classes absent from both prediction and truth.
    std::vector<std::optional<double>> iou() const;
    /// Mean over present classes; throws if none is present.
    double miou() const;

private:
    int classes_;
    std::vector<std::uint64_t> counts_;
};

struct EvalResult {
    double miou = 0.0;
    std::vector<std::optional<double>> per_class;
};

/// Called once per evaluated batch with its predictions, ground truth and batch-local counts.
using EvalObserver = std::function<void(const LabelMap& pred, const LabelMap& gt, const ConfusionMatrix& batch)>;

/// Evaluation-mode forward over `scenes` (un-augmented), batched by `batch_size`.
EvalResult evaluate(const Model& params, std::span<const Scene> scenes, int batch_size = 16,
                    const EvalObserver& observer = {});

/// Argmax predictions of the evaluation-mode model, (B, H, W).
LabelMap predict(const Model& params, const Tensor& images);

struct StepRecord {
    int step = 0;
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown losses;
    double step_time_s = 0.0;
};

struct EvalRecord {
    int step = 0;
    double miou = 0.0;
    std::vector<std::optional<double>> per_class;
};

struct RunRecord {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    std::string config_hash;
    std::size_t parameter_count = 0;
    double mean_step_time_s = 0.0;
    double best_miou = 0.0;
    int best_step = -1;
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
    TrainState final_state;
};

struct TrainInputs {
    std::span<const Scene> scenes;  ///< indexed by id
    SplitManifest manifest;
    std::span<const Scene> validation;
};

/// Seeded end-to-end run. With `run_dir`, metrics.csv, timing.csv, eval.csv, checkpoints/ and summary.txt
/// are written there.
RunRecord train(const TrainConfig& cfg, const TrainInputs& inputs,
                const std::optional<std::filesystem::path>& run_dir = std::nullopt);

/// Checkpoint: parameters, running statistics, optimizer velocity, step counter and config hash.
void save_checkpoint(const std::filesystem::path& file, const TrainState& state, const std::string& config_hash);
struct LoadedCheckpoint {
    TrainState state;
    std::string config_hash;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

/// Losses per step; deterministic given config and seed.
void write_metrics_csv(const std::filesystem::path& file, std::span<const StepRecord> steps);
/// Wall-clock seconds per step, kept apart from metrics.csv because it is not reproducible.
void write_timing_csv(const std::filesystem::path& file, std::span<const StepRecord> steps);
void write_eval_csv(const std::filesystem::path& file, std::span<const EvalRecord> evals, int num_classes);

/// One-row text table in the layout of a component ablation: components, mIoU, params, time.
std::string summary_table(const TrainConfig& cfg, const RunRecord& record);

}  // namespace uccl
