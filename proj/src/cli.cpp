#include "uccl/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "uccl/config.hpp"
#include "uccl/plot.hpp"
#include "uccl/trainer.hpp"

namespace uccl {

namespace {

namespace fs = std::filesystem;

constexpr int kOracleCases = 200;
constexpr int kGradientCases = 24;

struct Options {
    std::string command;
    std::string check_kind;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> tau;
    std::optional<double> alpha;
    std::optional<double> beta;
    bool no_sbu = false;
    bool no_ckr = false;
    std::string out;
};

fs::path run_root() {
    const char* env = std::getenv("UCCL_OUT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

// File values first, then flags; the result is re-validated.
TrainConfig resolve_config(const Options& o) {
    TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.tau) cfg.tau = *o.tau;
    if (o.alpha) cfg.alpha = *o.alpha;
    if (o.beta) cfg.beta = *o.beta;
    if (o.no_sbu) cfg.enable_sbu = false;
    if (o.no_ckr) cfg.enable_ckr = false;
    cfg.validate();
    return cfg;
}

fs::path run_dir_for(const Options& o, const TrainConfig& cfg) {
    return o.out.empty() ? run_root() / config_hash(cfg) : fs::path(o.out);
}

int cmd_gen_data(const Options& o, std::ostream& out) {
    const TrainConfig cfg = resolve_config(o);
    const fs::path root = o.out.empty() ? fs::path(cfg.data_dir) : fs::path(o.out);
    const std::vector<Scene> scenes = generate_corpus(cfg.dataset);
    const SplitManifest manifest = make_splits(cfg.dataset.total, cfg.ratio, cfg.dataset.seed);
    write_dataset(root, scenes, manifest);
    out << "wrote " << scenes.size() << " scenes to " << root.string() << " (labeled " << manifest.labeled_ids.size()
        << ", unlabeled " << manifest.unlabeled_ids.size() << ")\n";
    return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    const TrainConfig cfg = resolve_config(o);
    const fs::path data_root(cfg.data_dir);
    if (!fs::exists(data_root / "splits" / "labeled.txt")) {
        throw std::invalid_argument("missing dataset at " + data_root.string() + "; run gen-data first");
    }
    const Dataset data = load_dataset(data_root, cfg.dataset.num_classes);
    if (static_cast<int>(data.scenes.size()) != cfg.dataset.total ||
        static_cast<int>(data.manifest.labeled_ids.size()) != labeled_count(cfg.dataset.total, cfg.ratio)) {
        throw std::invalid_argument("dataset at " + data_root.string() + " does not match the config; rerun gen-data");
    }
    const std::vector<Scene> validation = generate_validation(cfg.dataset);
    const fs::path dir = run_dir_for(o, cfg);
    const RunRecord record = train(cfg, {data.scenes, data.manifest, validation}, dir);
    out << summary_table(cfg, record) << "run directory: " << dir.string() << '\n';
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    fs::path dir;
    if (!o.out.empty()) {
        dir = o.out;
    } else {
        dir = run_dir_for(o, resolve_config(o));
    }
    const TrainConfig cfg = load_config(dir / "config.json");
    fs::path ckpt = dir / "checkpoints" / "best.ckpt";
    if (!fs::exists(ckpt)) ckpt = dir / "checkpoints" / "final.ckpt";
    const LoadedCheckpoint loaded = load_checkpoint(ckpt);
    if (loaded.config_hash != config_hash(cfg)) {
        throw std::invalid_argument("checkpoint " + ckpt.string() + " does not belong to " + (dir / "config.json").string());
    }
    const std::vector<Scene> validation = generate_validation(cfg.dataset);
    const EvalResult result = evaluate(loaded.state.params, validation);
    out << std::fixed << std::setprecision(4) << "checkpoint " << ckpt.string() << " (step " << loaded.state.step
        << ")\nmIoU " << result.miou * 100.0 << '\n';
    for (std::size_t c = 0; c < result.per_class.size(); ++c) {
        out << "  class " << c << ": ";
        if (result.per_class[c]) {
            out << *result.per_class[c] * 100.0 << '\n';
        } else {
            out << "absent\n";
        }
    }
    return kExitOk;
}

int cmd_check(const Options& o, std::ostream& out, const LossSuite& suite) {
    const TrainConfig cfg = resolve_config(o);
    const std::uint64_t seed = o.seed.value_or(cfg.seed);
    const bool oracle = o.check_kind == "oracle";
    const auto reports = oracle ? run_oracle_campaign(kOracleCases, seed, 1e-6, suite)
                                : run_gradient_campaign(kGradientCases, seed, 1e-4, suite);
    const fs::path reports_dir = (o.out.empty() ? run_root() / "checks" : fs::path(o.out)) / "reports";
    fs::create_directories(reports_dir);
    const fs::path file = reports_dir / (o.check_kind + ".csv");
    std::ofstream csv(file, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + file.string());
    write_report_csv(csv, reports);

    std::size_t failed = 0;
    for (const auto& r : reports) failed += r.pass ? 0 : 1;
    out << o.check_kind << " campaign: " << reports.size() - failed << '/' << reports.size() << " cases pass; report "
        << file.string() << '\n';
    return failed == 0 ? kExitOk : kExitVerification;
}

int cmd_plot(const Options& o, std::ostream& out, std::ostream& err) {
    const fs::path dir = o.out.empty() ? run_dir_for(o, resolve_config(o)) : fs::path(o.out);
    for (const auto& f : plot_run(dir, err)) out << "wrote " << f.string() << '\n';
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const LossSuite& suite) {
    Options o;
    CLI::App app{"Semi-supervised segmentation with uncertainty-aware consistency losses", "uccl"};
    app.require_subcommand(1);
    app.add_option("--config", o.config, "Flat JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", o.seed, "Training seed override");
    app.add_option("--tau", o.tau, "Confidence threshold override, in (0, 1)");
    app.add_option("--alpha", o.alpha, "SBU loss weight override");
    app.add_option("--beta", o.beta, "CKR loss weight override");
    app.add_flag("--no-sbu", o.no_sbu, "Disable the SBU loss");
    app.add_flag("--no-ckr", o.no_ckr, "Disable the CKR loss");
    app.add_option("--out", o.out, "Output directory (dataset root for gen-data, run directory otherwise)");

    app.add_subcommand("gen-data", "Write the synthetic dataset and split manifests")->fallthrough();
    app.add_subcommand("train", "Train and write a run directory")->fallthrough();
    app.add_subcommand("eval", "Evaluate a run's best checkpoint on the validation split")->fallthrough();
    auto* check = app.add_subcommand("check", "Run a verification campaign")->fallthrough();
    check->add_option("kind", o.check_kind, "oracle | grad")->required()->check(CLI::IsMember({"oracle", "grad"}));
    app.add_subcommand("plot", "Emit figures for a run directory")->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n' << app.help();
        return kExitUsage;
    }
    o.command = app.get_subcommands().front()->get_name();

    try {
        if (o.command == "gen-data") return cmd_gen_data(o, out);
        if (o.command == "train") return cmd_train(o, out);
        if (o.command == "eval") return cmd_eval(o, out);
        if (o.command == "check") return cmd_check(o, out, suite);
        return cmd_plot(o, out, err);
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }
}

}  // namespace uccl
