#include "invariants.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <utility>

#include "uccl/data.hpp"
#include "uccl/losses.hpp"
#include "uccl/verification.hpp"

namespace uccl::test {

namespace {

constexpr double kTol = 1e-6;

void record(InvariantResult& r, double violation, const LossInstance& inst, const std::string& what) {
    ++r.checked;
    if (violation > r.worst) r.worst = violation;
    if (violation > kTol && r.pass) {
        r.pass = false;
        r.detail = what + " at " + inst.descriptor();
    }
}

SbuResult<double> sbu_of(const LossInstance& inst, const TensorD& fs, const TensorD& fw) {
    return sbu_loss(inst.strong_logits, inst.weak, fs, fw, inst.tau);
}

TensorD scaled(const TensorD& t, double a) {
    TensorD out = t;
    for (auto& v : out.values()) v *= a;
    return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    return dot / (std::max(std::sqrt(na), kCosineEps) * std::max(std::sqrt(nb), kCosineEps));
}

// Uncertain members per (image, class) at feature resolution.
std::map<std::pair<int, int>, std::vector<int>> uncertain_sets(const SbuArtifacts<double>& a) {
    std::map<std::pair<int, int>, std::vector<int>> sets;
    const int B = a.class_map.dim(0), n = a.class_map.dim(1) * a.class_map.dim(2);
    for (int b = 0; b < B; ++b) {
        for (int k = 0; k < n; ++k) {
            const std::size_t i = static_cast<std::size_t>(b) * n + k;
            if (a.mask.values[i]) sets[{b, a.class_map[i]}].push_back(k);
        }
    }
    return sets;
}

}  // namespace

std::vector<InvariantResult> run_invariant_suite(int cases, std::uint64_t seed) {
    InvariantResult norm{"sbu weight normalization"};
    InvariantResult monotone{"monotone reweighting"};
    InvariantResult support{"support discipline"};
    InvariantResult scale{"positive-scale invariance"};
    InvariantResult range{"ckr range and identity zero"};
    InvariantResult broadcast{"ckr broadcast identity"};

    Rng rng(seed);
    std::uniform_real_distribution<double> scale_draw(0.1, 10.0);

    for (int c = 0; c < cases; ++c) {
        const LossInstance inst = make_loss_instance(derive_seed(seed, static_cast<std::uint64_t>(c)));
        const int B = inst.batch, n = inst.height * inst.width;
        const auto base = sbu_of(inst, inst.strong_features, inst.weak_features);
        const auto& art = base.artifacts;
        const auto sets = uncertain_sets(art);

        // Each non-empty (image, class) set sums to 1; the map sums to the number of sets.
        for (const auto& [key, members] : sets) {
            double sum = 0.0;
            for (int k : members) sum += art.weights.values[static_cast<std::size_t>(key.first) * n + k];
            record(norm, std::abs(sum - 1.0), inst, "set sum");
        }
        double map_sum = 0.0;
        for (double v : art.weights.values.values()) map_sum += v;
        record(norm, std::abs(map_sum - static_cast<double>(sets.size())), inst, "global sum");

        // Lowering one member's similarity strictly raises its weight.
        for (const auto& [key, members] : sets) {
            if (members.size() < 2) continue;
            const std::size_t i = static_cast<std::size_t>(key.first) * n + members.front();
            SimilarityMap<double> lowered = art.similarity;
            lowered.values[i] -= 0.1;
            const auto w = sbu_weight_map(lowered, art.mask, art.class_map);
            record(monotone, w.values[i] > art.weights.values[i] ? 0.0 : 1.0, inst, "weight did not increase");
            break;
        }

        // Weights vanish off M.
        for (std::size_t i = 0; i < art.weights.values.size(); ++i) {
            if (!art.mask.values[i]) record(support, std::abs(art.weights.values[i]), inst, "weight off mask");
        }
        // L_x touches only confidence > tau; each mask cell is the predicate at its sampled pixel.
        const auto lx = certainty_consistency_loss(inst.strong_logits, inst.weak, inst.tau);
        const int C = inst.classes, H = inst.height * inst.stride, W = inst.width * inst.stride;
        for (int bi = 0; bi < B; ++bi) {
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    bool touched = false;
                    for (int k = 0; k < C; ++k) touched = touched || lx.grad(bi, k, y, x) != 0.0;
                    const double conf = inst.weak.confidence(bi, y, x);
                    record(support, touched && !(conf > inst.tau) ? 1.0 : 0.0, inst, "L_x on an uncertain pixel");
                    if (y % inst.stride == 0 && x % inst.stride == 0) {
                        const bool uncertain = conf < inst.tau;
                        const bool masked = art.mask.values(bi, y / inst.stride, x / inst.stride) != 0;
                        record(support, uncertain != masked ? 1.0 : 0.0, inst, "mask disagrees with predicate");
                    }
                }
            }
        }

        // (a F_s, b F_w) leaves similarity, weights, L_su and L_cr unchanged.
        const double a = scale_draw(rng), b = scale_draw(rng);
        const TensorD fs = scaled(inst.strong_features, a), fw = scaled(inst.weak_features, b);
        const auto moved = sbu_of(inst, fs, fw);
        for (std::size_t i = 0; i < art.similarity.values.size(); ++i) {
            record(scale, std::abs(moved.artifacts.similarity.values[i] - art.similarity.values[i]), inst, "similarity");
            record(scale, std::abs(moved.artifacts.weights.values[i] - art.weights.values[i]), inst, "weights");
        }
        record(scale, std::abs(moved.value - base.value) / std::max(1.0, std::abs(base.value)), inst, "L_su");
        const double l_cr = ckr_loss(inst.strong_features, inst.weak_features, inst.weak).value;
        record(scale, std::abs(ckr_loss(fs, fw, inst.weak).value - l_cr), inst, "L_cr");

        // L_cr in [0, 2], and 0 when both views agree.
        record(range, std::max({0.0, -l_cr, l_cr - 2.0}), inst, "L_cr outside [0, 2]");
        // L_cr(F, F) is zero up to the norm clamp in the cosine.
        const ClassPrototypes self =
            class_prototypes(inst.weak_features, inst.weak_features, inst.weak, inst.height, inst.width);
        double slack = 0.0;
        for (const auto& image : self.images) {
            for (const auto& [cls, p] : image) slack += static_cast<double>(p.count()) / n * (1.0 - cosine(p.weak, p.weak));
        }
        const double l_self = ckr_loss(inst.weak_features, inst.weak_features, inst.weak).value;
        record(range, std::max(0.0, std::abs(l_self) - slack / B), inst, "L_cr(F, F)");

        // 1 - (1/B) sum_i sum_c (E_c / N) cos(D^c, R^c)
        const ClassPrototypes protos =
            class_prototypes(inst.weak_features, inst.strong_features, inst.weak, inst.height, inst.width);
        double acc = 0.0;
        for (const auto& image : protos.images) {
            for (const auto& [cls, p] : image) acc += static_cast<double>(p.count()) / n * cosine(p.strong, p.weak);
        }
        record(broadcast, std::abs(l_cr - (1.0 - acc / B)), inst, "broadcast identity");
    }

    if (monotone.checked == 0) {
        monotone.pass = false;
        monotone.detail = "no instance had a set with two or more uncertain members";
    }
    return {norm, monotone, support, scale, range, broadcast};
}

}  // namespace uccl::test
