#include "uccl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <cereal/archives/portable_binary.hpp>
#include <cereal/types/string.hpp>
#include <cereal/types/vector.hpp>

#include "uccl/config.hpp"

namespace uccl {

void TrainConfig::validate() const {
    dataset.validate();
    model.validate();
    if (model.num_classes != dataset.num_classes || model.image_height != dataset.height ||
        model.image_width != dataset.width) {
        throw std::invalid_argument("config: model and dataset disagree on image size or class count");
    }
    check_tau(tau);
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("config: alpha and beta must be >= 0");
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(base_lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
        throw std::invalid_argument("config: bad optimizer settings");
    }
    if (eval_every < 1) throw std::invalid_argument("config: eval_every must be >= 1");
    labeled_count(dataset.total, ratio);
}

double poly_lr(int step, int total_steps, double base_lr) {
    if (total_steps <= 0) throw std::invalid_argument("poly_lr: total_steps must be positive");
    if (step < 0 || step > total_steps) throw std::invalid_argument("poly_lr: step outside [0, total_steps]");
    return base_lr * std::pow(1.0 - static_cast<double>(step) / total_steps, 0.9);
}

void Sgd::step(Model& params, const Gradients<float>& grads, double lr) {
    auto tensors = params.trainable();
    if (velocity_.empty()) {
        for (const auto* t : tensors) velocity_.emplace_back(t->shape(), 0.0f);
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        Tensor& p = *tensors[k];
        Tensor& v = velocity_[k];
        const Tensor& g = grads[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float d = g[i] + static_cast<float>(weight_decay_) * p[i];
            v[i] = static_cast<float>(momentum_) * v[i] + d;
            p[i] -= static_cast<float>(lr) * v[i];
        }
    }
}

TrainState init_train_state(const TrainConfig& cfg) {
    TrainState state;
    state.params = init_model<float>(cfg.model, derive_seed(cfg.seed, 0));
    state.optimizer = Sgd(cfg.momentum, cfg.weight_decay);
    return state;
}

UnlabeledObjective unlabeled_objective(const Tensor& logits, const Tensor& features, int batch, const TrainConfig& cfg) {
    if (logits.dim(0) != 2 * batch || features.dim(0) != 2 * batch) {
        throw std::invalid_argument("unlabeled_objective: expected a concatenated (weak, strong) batch");
    }
    const Tensor weak_logits = slice_batch(logits, 0, batch);
    const Tensor strong_logits = slice_batch(logits, batch, batch);
    const Tensor weak_features = slice_batch(features, 0, batch);
    const Tensor strong_features = slice_batch(features, batch, batch);
    const PredictionMap<float> weak = make_prediction(weak_logits);

    UnlabeledObjective out;
    auto lx = certainty_consistency_loss(strong_logits, weak, cfg.tau);
    out.l_x = lx.value;
    Tensor g_strong = std::move(lx.grad);
    Tensor g_features(strong_features.shape(), 0.0f);

    if (cfg.enable_sbu) {
        const auto su = sbu_loss(strong_logits, weak, strong_features, weak_features, cfg.tau);
        out.l_su = su.value;
        for (std::size_t i = 0; i < g_strong.size(); ++i) g_strong[i] += static_cast<float>(cfg.alpha) * su.grad[i];
    }
    if (cfg.enable_ckr) {
        const auto cr = ckr_loss(strong_features, weak_features, weak);
        out.l_cr = cr.value;
        for (std::size_t i = 0; i < g_features.size(); ++i) g_features[i] = static_cast<float>(cfg.beta) * cr.grad[i];
    }

    // Weak view supplies targets only.
    out.grad_logits = concat_batch(Tensor(weak_logits.shape(), 0.0f), g_strong);
    out.grad_features = concat_batch(Tensor(weak_features.shape(), 0.0f), g_features);
    return out;
}

LossBreakdown train_step(TrainState& state, const LabeledBatch& labeled, const UnlabeledBatch* unlabeled,
                         const TrainConfig& cfg, double lr) {
    // Every forward of the step reads the same parameter values; the update comes last.
    const ForwardTrace<float> labeled_trace = forward_train(state.params, labeled.images);
    auto ls = supervised_loss(labeled_trace.logits, labeled.masks);

    std::optional<ForwardTrace<float>> unlabeled_trace;
    UnlabeledObjective u;
    if (unlabeled) {
        const int batch = unlabeled->weak.dim(0);
        unlabeled_trace = forward_train(state.params, concat_batch(unlabeled->weak, unlabeled->strong));
        u = unlabeled_objective(unlabeled_trace->logits, unlabeled_trace->features.values, batch, cfg);
    }

    const LossBreakdown losses = total_loss(ls.value, u.l_x, u.l_su, u.l_cr, cfg.alpha, cfg.beta);

    Gradients<float> grads = zero_gradients(state.params);
    backward(state.params, labeled_trace, ls.grad, nullptr, grads);
    if (unlabeled_trace) backward(state.params, *unlabeled_trace, u.grad_logits, &u.grad_features, grads);
    for (const auto& g : grads) {
        for (float v : g.values()) {
            if (!std::isfinite(v)) throw DivergenceError("non-finite gradient");
        }
    }
    state.optimizer.step(state.params, grads, lr);
    ++state.step;
    return losses;
}

// ---------------------------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw std::invalid_argument("confusion matrix: num_classes must be positive");
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt) {
    require_same_shape(pred, gt, "confusion matrix");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p < 0 || p >= classes_ || g < 0 || g >= classes_) {
            throw std::invalid_argument("confusion matrix: label outside 0..C-1");
        }
        ++counts_[static_cast<std::size_t>(g) * classes_ + p];
    }
}

std::uint64_t ConfusionMatrix::at(int truth, int predicted) const {
    return counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
}

std::vector<std::optional<double>> ConfusionMatrix::iou() const {
    std::vector<std::optional<double>> out(static_cast<std::size_t>(classes_));
    for (int c = 0; c < classes_; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int k = 0; k < classes_; ++k) {
            row += at(c, k);
            col += at(k, c);
        }
        const std::uint64_t tp = at(c, c);
        const std::uint64_t uni = row + col - tp;
        if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
    }
    return out;
}

double ConfusionMatrix::miou() const {
    double sum = 0.0;
    int present = 0;
    for (const auto& v : iou()) {
        if (!v) continue;
        sum += *v;
        ++present;
    }
    if (present == 0) throw std::invalid_argument("confusion matrix: no class present");
    return sum / present;
}

LabelMap predict(const Model& params, const Tensor& images) {
    return decode(params, encode(params, images)).pseudo_labels;
}

EvalResult evaluate(const Model& params, std::span<const Scene> scenes, int batch_size, const EvalObserver& observer) {
    if (scenes.empty()) throw std::invalid_argument("evaluate: empty split");
    const int C = params.config.num_classes, H = params.config.image_height, W = params.config.image_width;
    const std::size_t image_size = 3 * static_cast<std::size_t>(H) * W, mask_size = static_cast<std::size_t>(H) * W;
    ConfusionMatrix total(C);
    for (std::size_t start = 0; start < scenes.size(); start += static_cast<std::size_t>(batch_size)) {
        const int B = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(batch_size), scenes.size() - start));
        Tensor images({B, 3, H, W});
        LabelMap gt({B, H, W});
        for (int b = 0; b < B; ++b) {
            const Scene& s = scenes[start + static_cast<std::size_t>(b)];
            std::copy_n(s.image.data(), image_size, images.data() + b * image_size);
            std::copy_n(s.mask.data(), mask_size, gt.data() + b * mask_size);
        }
        const LabelMap pred = predict(params, images);
        total.add(pred, gt);
        if (observer) {
            ConfusionMatrix local(C);
            local.add(pred, gt);
            observer(pred, gt, local);
        }
    }
    return {total.miou(), total.iou()};
}

// ---------------------------------------------------------------------------------------------

namespace {

struct TensorBlob {
    std::vector<int> shape;
    std::vector<float> data;

    template <class Archive>
    void serialize(Archive& ar) {
        ar(shape, data);
    }
};

TensorBlob to_blob(const Tensor& t) { return {t.shape(), {t.values().begin(), t.values().end()}}; }

Tensor from_blob(const TensorBlob& b) {
    Tensor t(b.shape);
    if (t.size() != b.data.size()) throw std::runtime_error("checkpoint: tensor size mismatch");
    std::copy(b.data.begin(), b.data.end(), t.data());
    return t;
}

constexpr const char* kCheckpointMagic = "uccl-checkpoint";
constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const TrainState& state, const std::string& config_hash) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
    const ModelConfig& mc = state.params.config;
    std::vector<TensorBlob> tensors, velocity;
    for (const auto& b : state.params.blocks) {
        for (const Tensor* t : {&b.weight, &b.gamma, &b.beta, &b.running_mean, &b.running_var}) tensors.push_back(to_blob(*t));
    }
    tensors.push_back(to_blob(state.params.head_weight));
    tensors.push_back(to_blob(state.params.head_bias));
    for (const auto& v : state.optimizer.velocity()) velocity.push_back(to_blob(v));
    {
        cereal::PortableBinaryOutputArchive ar(out);
        ar(std::string(kCheckpointMagic), kCheckpointVersion, config_hash, state.step, state.params.seed);
        ar(mc.image_height, mc.image_width, mc.in_channels, mc.feature_dim, mc.stride, mc.num_classes, mc.blocks,
           mc.bn_momentum, mc.bn_eps);
        ar(tensors, velocity, state.optimizer.momentum(), state.optimizer.weight_decay());
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + file.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
    LoadedCheckpoint out;
    std::string magic;
    int version = 0;
    ModelConfig mc;
    std::vector<TensorBlob> tensors, velocity;
    double momentum = 0.0, weight_decay = 0.0;
    try {
        cereal::PortableBinaryInputArchive ar(in);
        ar(magic, version);
        if (magic != kCheckpointMagic || version != kCheckpointVersion) {
            throw std::runtime_error("not a checkpoint (version " + std::to_string(version) + ")");
        }
        ar(out.config_hash, out.state.step, out.state.params.seed);
        ar(mc.image_height, mc.image_width, mc.in_channels, mc.feature_dim, mc.stride, mc.num_classes, mc.blocks,
           mc.bn_momentum, mc.bn_eps);
        ar(tensors, velocity, momentum, weight_decay);
    } catch (const cereal::Exception& e) {
        throw std::runtime_error("corrupt checkpoint " + file.string() + ": " + e.what());
    }

    Model& p = out.state.params;
    p.config = mc;
    if (tensors.size() != 5 * static_cast<std::size_t>(mc.blocks) + 2) throw std::runtime_error("checkpoint: wrong tensor count");
    std::size_t k = 0;
    int downsamples = 0;
    for (int s = mc.stride; s > 1; s >>= 1) ++downsamples;
    for (int b = 0; b < mc.blocks; ++b) {
        ConvBlock<float> block;
        block.stride = b < downsamples ? 2 : 1;
        block.weight = from_blob(tensors[k++]);
        block.gamma = from_blob(tensors[k++]);
        block.beta = from_blob(tensors[k++]);
        block.running_mean = from_blob(tensors[k++]);
        block.running_var = from_blob(tensors[k++]);
        p.blocks.push_back(std::move(block));
    }
    p.head_weight = from_blob(tensors[k++]);
    p.head_bias = from_blob(tensors[k++]);
    out.state.optimizer = Sgd(momentum, weight_decay);
    for (const auto& v : velocity) out.state.optimizer.velocity().push_back(from_blob(v));
    return out;
}

void write_metrics_csv(const std::filesystem::path& file, std::span<const StepRecord> steps) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "step,lr,l_s,l_x,l_su,l_cr,total\n" << std::setprecision(17);
    for (const auto& s : steps) {
        out << s.step << ',' << s.lr << ',' << s.losses.l_s << ',' << s.losses.l_x << ','
            << s.losses.l_su << ',' << s.losses.l_cr << ',' << s.losses.total << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

void write_timing_csv(const std::filesystem::path& file, std::span<const StepRecord> steps) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "step,step_time_s\n" << std::setprecision(6);
    for (const auto& s : steps) out << s.step << ',' << s.step_time_s << '\n';
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

void write_eval_csv(const std::filesystem::path& file, std::span<const EvalRecord> evals, int num_classes) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "step,miou";
    for (int c = 0; c < num_classes; ++c) out << ",iou_class_" << c;
    out << '\n' << std::setprecision(17);
    for (const auto& e : evals) {
        out << e.step << ',' << e.miou;
        for (int c = 0; c < num_classes; ++c) {
            out << ',';
            if (static_cast<std::size_t>(c) < e.per_class.size() && e.per_class[c]) out << *e.per_class[c];
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::string summary_table(const TrainConfig& cfg, const RunRecord& record) {
    std::ostringstream s;
    auto mark = [](bool on) { return on ? "yes" : "-"; };
    s << std::left << std::setw(10) << "Baseline" << std::setw(6) << "SBU" << std::setw(6) << "CKR" << std::setw(10)
      << "mIoU" << std::setw(10) << "Params" << "Time/batch\n";
    s << std::setw(10) << "yes" << std::setw(6) << mark(cfg.enable_sbu) << std::setw(6) << mark(cfg.enable_ckr)
      << std::setw(10) << std::fixed << std::setprecision(2) << record.best_miou * 100.0 << std::setw(10)
      << record.parameter_count << std::setprecision(4) << record.mean_step_time_s << "s\n";
    s << "config " << record.config_hash << ", best step " << record.best_step << ", final mIoU "
      << std::setprecision(2) << (record.evals.empty() ? 0.0 : record.evals.back().miou * 100.0) << '\n';
    return s.str();
}

RunRecord train(const TrainConfig& cfg, const TrainInputs& inputs, const std::optional<std::filesystem::path>& run_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    RunRecord record;
    record.config_hash = config_hash(cfg);
    if (run_dir) {
        fs::create_directories(*run_dir / "checkpoints");
        save_config(*run_dir / "config.json", cfg);
    }

    TrainState state = init_train_state(cfg);
    record.parameter_count = state.params.parameter_count();
    BatchIterator batches(inputs.scenes, inputs.manifest, cfg.augment, cfg.batch_size, derive_seed(cfg.seed, 3));
    const int per_epoch = batches.batches_per_epoch();
    const int total_steps = per_epoch * cfg.epochs;

    auto flush = [&] {
        if (!run_dir) return;
        write_metrics_csv(*run_dir / "metrics.csv", record.steps);
        write_timing_csv(*run_dir / "timing.csv", record.steps);
        write_eval_csv(*run_dir / "eval.csv", record.evals, cfg.model.num_classes);
    };

    double time_sum = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int k = 0; k < per_epoch; ++k) {
            StepRecord row;
            row.step = state.step;
            row.epoch = epoch;
            row.lr = poly_lr(state.step, total_steps, cfg.base_lr);
            const BatchPair batch = batches.next();
            const auto t0 = std::chrono::steady_clock::now();
            try {
                row.losses = train_step(state, batch.labeled, batch.unlabeled ? &*batch.unlabeled : nullptr, cfg, row.lr);
            } catch (const DivergenceError& e) {
                flush();
                throw DivergenceError("training diverged at step " + std::to_string(row.step) + ": " + e.what());
            }
            row.step_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            time_sum += row.step_time_s;
            record.steps.push_back(row);
        }

        const bool last = epoch == cfg.epochs - 1;
        if (!inputs.validation.empty() && ((epoch + 1) % cfg.eval_every == 0 || last)) {
            const EvalResult ev = evaluate(state.params, inputs.validation);
            record.evals.push_back({state.step, ev.miou, ev.per_class});
            if (record.best_step < 0 || ev.miou > record.best_miou) {
                record.best_miou = ev.miou;
                record.best_step = state.step;
                if (run_dir) {
                    record.best_checkpoint = *run_dir / "checkpoints" / "best.ckpt";
                    save_checkpoint(record.best_checkpoint, state, record.config_hash);
                }
            }
        }
    }

    record.mean_step_time_s = record.steps.empty() ? 0.0 : time_sum / static_cast<double>(record.steps.size());
    if (run_dir) {
        record.final_checkpoint = *run_dir / "checkpoints" / "final.ckpt";
        save_checkpoint(record.final_checkpoint, state, record.config_hash);
        flush();
        std::ofstream(*run_dir / "summary.txt") << summary_table(cfg, record);
    }
    record.final_state = std::move(state);
    return record;
}

}  // namespace uccl
