#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <utility>

#include "uccl/config.hpp"
#include "uccl/trainer.hpp"
#include "uccl/verification.hpp"

using namespace uccl;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.dataset.height = cfg.model.image_height = 32;
    cfg.dataset.width = cfg.model.image_width = 32;
    cfg.dataset.total = 16;
    cfg.dataset.val_count = 6;
    cfg.model.feature_dim = 16;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.eval_every = 1;
    cfg.base_lr = 0.05;
    cfg.tau = 0.6;
    return cfg;
}

struct Fixture {
    TrainConfig cfg = small_config();
    std::vector<Scene> scenes = generate_corpus(cfg.dataset);
    SplitManifest manifest = make_splits(cfg.dataset.total, cfg.ratio, cfg.dataset.seed);
    std::vector<Scene> validation = generate_validation(cfg.dataset);

    TrainInputs inputs() const { return {scenes, manifest, validation}; }
    BatchPair batch(std::uint64_t seed = 1) const {
        BatchIterator it(scenes, manifest, cfg.augment, cfg.batch_size, seed);
        return it.next();
    }
};

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("uccl_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("poly schedule") {
    CHECK(poly_lr(0, 100, 0.001) == 0.001);
    CHECK(poly_lr(100, 100, 0.001) == 0.0);
    CHECK(poly_lr(50, 100, 0.001) == doctest::Approx(0.001 * std::pow(0.5, 0.9)).epsilon(1e-12));
    CHECK(poly_lr(50, 100, 0.001) == doctest::Approx(5.3589e-4).epsilon(1e-4));
    for (int s = 0; s < 100; ++s) CHECK(poly_lr(s + 1, 100, 0.01) < poly_lr(s, 100, 0.01));
    CHECK_THROWS_AS(poly_lr(0, 0, 0.001), std::invalid_argument);
    CHECK_THROWS_AS(poly_lr(101, 100, 0.001), std::invalid_argument);
}

TEST_CASE("sgd with momentum and weight decay") {
    ModelConfig mc;
    mc.image_height = mc.image_width = 8;
    mc.feature_dim = 4;
    mc.stride = 2;
    mc.blocks = 1;
    Model m = init_model<float>(mc, 0);
    const Model start = m;
    Gradients<float> g = zero_gradients(m);
    for (auto& t : g) t.fill(0.5f);

    Sgd opt(0.9, 0.1);
    opt.step(m, g, 0.2);
    const float p0 = start.head_weight[3];
    const float v1 = 0.5f + 0.1f * p0;
    const float p1 = p0 - 0.2f * v1;
    CHECK(m.head_weight[3] == doctest::Approx(p1).epsilon(1e-6));
    opt.step(m, g, 0.1);
    const float v2 = 0.9f * v1 + 0.5f + 0.1f * p1;
    CHECK(m.head_weight[3] == doctest::Approx(p1 - 0.1f * v2).epsilon(1e-6));
    CHECK(opt.velocity().size() == m.trainable().size());
}

TEST_CASE("confusion matrix") {
    LabelMap pred({4}), gt({4}, 1);
    pred[2] = pred[3] = 1;
    gt[0] = 0;
    ConfusionMatrix cm(2);
    cm.add(pred, gt);
    CHECK(cm.at(1, 0) == 1);
    CHECK(cm.miou() == doctest::Approx(miou_naive(pred, gt, 2).mean).epsilon(1e-15));
    CHECK(cm.miou() == doctest::Approx(0.583333).epsilon(1e-6));

    ConfusionMatrix perfect(3);
    perfect.add(gt, gt);
    CHECK(perfect.miou() == 1.0);
    CHECK_FALSE(perfect.iou()[2].has_value());

    CHECK_THROWS(ConfusionMatrix(2).miou());
    LabelMap bad({4}, 5);
    CHECK_THROWS_AS(cm.add(bad, gt), std::invalid_argument);
}

TEST_CASE("evaluation") {
    Fixture f;
    Model m = init_model<float>(f.cfg.model, 0);

    SUBCASE("batch-wise agreement with the naive mIoU") {
        int batches = 0;
        const auto r = evaluate(m, f.validation, 4, [&](const LabelMap& pred, const LabelMap& gt, const ConfusionMatrix& cm) {
            ++batches;
            CHECK(cm.miou() == miou_naive(pred, gt, f.cfg.model.num_classes).mean);
        });
        CHECK(batches == 2);
        CHECK((r.miou >= 0.0 && r.miou <= 1.0));
    }
    SUBCASE("constant predictor scores zero on the other classes") {
        m.head_weight.fill(0.0f);
        m.head_bias.fill(0.0f);
        m.head_bias[2] = 10.0f;
        const auto r = evaluate(m, f.validation);
        for (int c = 0; c < f.cfg.model.num_classes; ++c) {
            if (c != 2 && r.per_class[static_cast<std::size_t>(c)]) CHECK(*r.per_class[static_cast<std::size_t>(c)] == 0.0);
        }
    }
    CHECK_THROWS_AS(evaluate(m, std::span<const Scene>{}), std::invalid_argument);
}

TEST_CASE("training step") {
    Fixture f;
    const BatchPair b = f.batch();
    REQUIRE(b.unlabeled.has_value());

    SUBCASE("logged total matches its components") {
        TrainState s = init_train_state(f.cfg);
        const LossBreakdown l = train_step(s, b.labeled, &*b.unlabeled, f.cfg, 0.01);
        CHECK(l.total == doctest::Approx(l.l_s + l.l_x + 0.015 * l.l_su + 0.02 * l.l_cr).epsilon(1e-12));
        CHECK(l.l_su > 0.0);
        CHECK(l.l_cr > 0.0);
        CHECK(s.step == 1);
    }
    SUBCASE("baseline flags zero the extra terms") {
        TrainConfig cfg = f.cfg;
        cfg.enable_sbu = cfg.enable_ckr = false;
        TrainState s = init_train_state(cfg);
        const LossBreakdown l = train_step(s, b.labeled, &*b.unlabeled, cfg, 0.01);
        CHECK(l.l_su == 0.0);
        CHECK(l.l_cr == 0.0);
        CHECK(l.total == l.l_s + l.l_x);
    }
    SUBCASE("zero coefficients give the baseline update") {
        TrainConfig zero = f.cfg, off = f.cfg;
        zero.alpha = zero.beta = 0.0;
        off.enable_sbu = off.enable_ckr = false;
        TrainState a = init_train_state(zero), c = init_train_state(off);
        train_step(a, b.labeled, &*b.unlabeled, zero, 0.01);
        train_step(c, b.labeled, &*b.unlabeled, off, 0.01);
        const auto pa = a.params.trainable(), pc = c.params.trainable();
        for (std::size_t k = 0; k < pa.size(); ++k) CHECK(*pa[k] == *pc[k]);
    }
    SUBCASE("missing unlabeled batch is a supervised step") {
        TrainState s = init_train_state(f.cfg);
        const LossBreakdown l = train_step(s, b.labeled, nullptr, f.cfg, 0.01);
        CHECK(l.l_x == 0.0);
        CHECK(l.l_su == 0.0);
        CHECK(l.l_cr == 0.0);
        CHECK(l.total == l.l_s);
    }
    SUBCASE("non-finite input raises divergence") {
        TrainState s = init_train_state(f.cfg);
        LabeledBatch broken = b.labeled;
        broken.images[0] = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(train_step(s, broken, nullptr, f.cfg, 0.01), DivergenceError);
    }
}

TEST_CASE("unlabeled objective") {
    Fixture f;
    const BatchPair b = f.batch();
    Model m = init_model<float>(f.cfg.model, 0);
    const int B = b.unlabeled->weak.dim(0);

    SUBCASE("weak half receives no gradient") {
        const auto trace = forward_train(m, concat_batch(b.unlabeled->weak, b.unlabeled->strong));
        const auto u = unlabeled_objective(trace.logits, trace.features.values, B, f.cfg);
        const std::size_t half_logits = u.grad_logits.size() / 2, half_features = u.grad_features.size() / 2;
        for (std::size_t i = 0; i < half_logits; ++i) REQUIRE(u.grad_logits[i] == 0.0f);
        for (std::size_t i = 0; i < half_features; ++i) REQUIRE(u.grad_features[i] == 0.0f);
        bool strong_nonzero = false;
        for (std::size_t i = half_features; i < u.grad_features.size(); ++i) strong_nonzero |= u.grad_features[i] != 0.0f;
        CHECK(strong_nonzero);
    }
    SUBCASE("identical views give zero L_cr and unit similarity") {
        const auto trace = forward_train(m, concat_batch(b.unlabeled->weak, b.unlabeled->weak));
        TrainConfig cfg = f.cfg;
        cfg.tau = 1e-6;
        const auto u = unlabeled_objective(trace.logits, trace.features.values, B, cfg);
        CHECK(std::abs(u.l_cr) < 1e-6);
        const Tensor fw = slice_batch(trace.features.values, 0, B), fs = slice_batch(trace.features.values, B, B);
        const auto sim = per_location_similarity(fs, fw);
        for (float s : sim.values.values()) CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK_THROWS_AS(unlabeled_objective(Tensor({3, 4, 32, 32}), Tensor({3, 16, 8, 8}), 2, f.cfg), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
    Fixture f;
    TrainState s = init_train_state(f.cfg);
    const BatchPair b = f.batch();
    train_step(s, b.labeled, &*b.unlabeled, f.cfg, 0.01);
    const fs::path dir = scratch("ckpt");
    fs::create_directories(dir);
    save_checkpoint(dir / "a.ckpt", s, "abc123");

    const LoadedCheckpoint back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.config_hash == "abc123");
    CHECK(back.state.step == 1);
    const auto pa = std::as_const(s.params).trainable();
    const auto pb = back.state.params.trainable();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(*pa[k] == *pb[k]);
    for (std::size_t k = 0; k < s.params.blocks.size(); ++k) {
        CHECK(s.params.blocks[k].running_var == back.state.params.blocks[k].running_var);
        CHECK(s.params.blocks[k].stride == back.state.params.blocks[k].stride);
    }
    REQUIRE(back.state.optimizer.velocity().size() == s.optimizer.velocity().size());
    for (std::size_t k = 0; k < s.optimizer.velocity().size(); ++k) {
        CHECK(back.state.optimizer.velocity()[k] == s.optimizer.velocity()[k]);
    }
    CHECK(evaluate(back.state.params, f.validation).miou == evaluate(s.params, f.validation).miou);

    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS(load_checkpoint(dir / "junk.ckpt"));
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
    fs::remove_all(dir);
}

TEST_CASE("end-to-end run is reproducible") {
    Fixture f;
    const fs::path a = scratch("run_a"), b = scratch("run_b");
    const RunRecord ra = train(f.cfg, f.inputs(), a);
    const RunRecord rb = train(f.cfg, f.inputs(), b);

    CHECK(ra.steps.size() == 2 * 3);
    CHECK(ra.evals.size() == 2);
    for (std::size_t i = 1; i < ra.steps.size(); ++i) CHECK(ra.steps[i].step > ra.steps[i - 1].step);
    for (const auto& s : ra.steps) {
        CHECK(s.losses.total == doctest::Approx(s.losses.l_s + s.losses.l_x + f.cfg.alpha * s.losses.l_su +
                                                f.cfg.beta * s.losses.l_cr).epsilon(1e-12));
    }
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "eval.csv") == slurp(b / "eval.csv"));
    CHECK(fs::exists(a / "timing.csv"));
    CHECK(fs::exists(a / "summary.txt"));
    CHECK(load_config(a / "config.json").seed == f.cfg.seed);
    CHECK(load_checkpoint(ra.final_checkpoint).config_hash == config_hash(f.cfg));
    CHECK(load_checkpoint(ra.best_checkpoint).config_hash == config_hash(f.cfg));
    CHECK(ra.best_miou == std::max(ra.evals[0].miou, ra.evals[1].miou));

    std::istringstream header(slurp(a / "eval.csv"));
    std::string line;
    std::getline(header, line);
    CHECK(line == "step,miou,iou_class_0,iou_class_1,iou_class_2,iou_class_3");

    TrainConfig other = f.cfg;
    other.seed = 1;
    const RunRecord rc = train(other, f.inputs());
    CHECK(rc.steps.back().losses.total != ra.steps.back().losses.total);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("configuration file") {
    TrainConfig cfg = small_config();
    cfg.ratio = Ratio{1, 8};
    cfg.enable_ckr = false;
    const TrainConfig back = config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(config_hash(cfg).size() == 16);

    TrainConfig changed = cfg;
    changed.alpha = 0.02;
    CHECK(config_hash(changed) != config_hash(cfg));

    CHECK_THROWS_AS(config_from_json({{"no_such_key", 1}}), std::invalid_argument);
    CHECK_THROWS_AS(config_from_json({{"tau", 1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(config_from_json({{"tau", "high"}}), std::invalid_argument);
    CHECK_THROWS_AS(config_from_json({{"alpha", -1.0}}), std::invalid_argument);
    CHECK_THROWS_AS(config_from_json({{"epochs", 0}}), std::invalid_argument);
    CHECK(config_from_json({{"height", 32}, {"width", 32}}).model.image_height == 32);

    const fs::path dir = scratch("config");
    fs::create_directories(dir);
    std::ofstream(dir / "c.json") << "{\n  // toy run\n  \"epochs\": 3, \"ratio\": \"1/2\"\n}\n";
    const TrainConfig loaded = load_config(dir / "c.json");
    CHECK(loaded.epochs == 3);
    CHECK(loaded.ratio == Ratio{1, 2});
    fs::remove_all(dir);
}
