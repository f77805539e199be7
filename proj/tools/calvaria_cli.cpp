// calvaria: desk-scale MRI->CT synthesis and cranial bone/suture
// segmentation pipeline. Subcommands cover the full experiment lifecycle;
// every stage is deterministic for a fixed (config, seed) and idempotent
// (stages stamped with the config hash are skipped on re-run).

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/volume_io.hpp"
#include "calvaria/pipeline/pipeline.hpp"
#include "calvaria/pipeline/serialize.hpp"

namespace {

using calvaria::pipeline::ExperimentConfig;

struct GlobalArgs {
    std::string config_path;
    std::string out_dir;
    std::string device = "cpu";
    std::int64_t seed = -1;
    bool seed_set = false;
};

ExperimentConfig resolve_config(const GlobalArgs& g) {
    ExperimentConfig cfg;
    if (!g.config_path.empty()) {
        cfg = calvaria::pipeline::load_experiment_config(g.config_path);
    }
    if (!g.out_dir.empty()) {
        cfg.out_dir = g.out_dir;
    }
    if (g.seed_set) {
        if (g.seed < 0) {
            throw calvaria::ConfigError("--seed must be nonnegative");
        }
        cfg.seed = static_cast<std::uint64_t>(g.seed);
    }
    if (cfg.out_dir.empty()) {
        throw calvaria::ConfigError("no output directory: pass --out or set out_dir in --config");
    }
    if (cfg.data_dir.empty()) {
        cfg.data_dir = cfg.out_dir / "data";
    }
    if (g.device == "gpu") {
        std::cerr << "note: no GPU backend is compiled in; running on cpu\n";
    } else if (g.device != "cpu") {
        throw calvaria::ConfigError("--device must be cpu or gpu");
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"calvaria: dual-stage MRI->CT synthesis with atlas-guided "
                 "cranial bone and suture segmentation"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "Experiment config file (JSON)");
    app.add_option("--out", g.out_dir, "Output directory (overrides config out_dir)");
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed override (nonnegative)");
    app.add_option("--device", g.device, "cpu|gpu (gpu falls back to cpu)");

    int phantom_n = 32;
    auto* cmd_phantom = app.add_subcommand("phantom", "Generate a synthetic cohort");
    cmd_phantom->add_option("--n", phantom_n, "Cohort size")->check(CLI::PositiveNumber);

    auto* cmd_preprocess =
        app.add_subcommand("preprocess", "Clean, register, resample, and split the cohort");
    auto* cmd_train_synth =
        app.add_subcommand("train-synth", "Train the MRI->sCT synthesis stage");

    std::string synth_ckpt, seg_ckpt;
    auto* cmd_train_seg =
        app.add_subcommand("train-seg", "Train the atlas-guided segmentation stage on sCTs");
    cmd_train_seg->add_option("--synth-ckpt", synth_ckpt, "Synthesis checkpoint base path");

    int ft_epochs = -1;
    auto* cmd_finetune = app.add_subcommand(
        "finetune-seg", "Fine-tune the segmentation stage at 0.1x learning rate");
    cmd_finetune->add_option("--synth-ckpt", synth_ckpt, "Synthesis checkpoint base path");
    cmd_finetune->add_option("--seg-ckpt", seg_ckpt, "Parent segmentation checkpoint base path");
    cmd_finetune->add_option("--epochs", ft_epochs, "Fine-tune epochs (default: config epochs)");

    std::string subject_id;
    auto* cmd_infer = app.add_subcommand("infer", "Synthesize and segment one subject");
    cmd_infer->add_option("--subject", subject_id, "Preprocessed subject id")->required();
    cmd_infer->add_option("--synth-ckpt", synth_ckpt, "Synthesis checkpoint base path");
    cmd_infer->add_option("--seg-ckpt", seg_ckpt, "Segmentation checkpoint base path");

    auto* cmd_evaluate =
        app.add_subcommand("evaluate", "Run the full test-split evaluation and figures");

    std::string metrics_csv;
    auto* cmd_stats =
        app.add_subcommand("stats", "Wilcoxon + TOST equivalence panel from metrics.csv");
    cmd_stats->add_option("--metrics", metrics_csv, "metrics.csv path (default: eval dir)");

    auto* cmd_report = app.add_subcommand("report", "Assemble report.md from metrics and stats");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        g.seed_set = seed_opt->count() > 0;
        ExperimentConfig cfg = resolve_config(g);
        const auto or_default = [](const std::string& chosen, std::filesystem::path fallback) {
            return chosen.empty() ? fallback : std::filesystem::path(chosen);
        };
        const auto default_synth = cfg.out_dir / "checkpoints" / "synthesis" / "best";
        const auto default_seg = cfg.out_dir / "checkpoints" / "segmentation" / "best";

        if (cmd_phantom->parsed()) {
            const auto dir = calvaria::pipeline::run_phantom(cfg, phantom_n);
            std::cout << "cohort ready: " << dir.string() << "\n";
        } else if (cmd_preprocess->parsed()) {
            const auto dir = calvaria::pipeline::run_preprocess(cfg);
            std::cout << "preprocessed: " << dir.string() << "\n";
        } else if (cmd_train_synth->parsed()) {
            const auto base = calvaria::pipeline::train_synthesis(cfg);
            std::cout << "synthesis checkpoint: " << base.string() << "\n";
        } else if (cmd_train_seg->parsed()) {
            const auto base = calvaria::pipeline::train_segmentation(
                cfg, or_default(synth_ckpt, default_synth));
            std::cout << "segmentation checkpoint: " << base.string() << "\n";
        } else if (cmd_finetune->parsed()) {
            const auto base = calvaria::pipeline::finetune_segmentation(
                cfg, or_default(synth_ckpt, default_synth),
                or_default(seg_ckpt, default_seg), ft_epochs);
            std::cout << "fine-tuned checkpoint: " << base.string() << "\n";
        } else if (cmd_infer->parsed()) {
            const auto result = calvaria::pipeline::infer_subject(
                cfg, or_default(synth_ckpt, default_synth),
                or_default(seg_ckpt, default_seg), subject_id);
            const auto dir = cfg.out_dir / "inference" / subject_id;
            std::filesystem::create_directories(dir);
            calvaria::save_volume(result.sct, dir / "sct.vol");
            calvaria::save_labels(result.labels, dir / "labels.vol");
            calvaria::Volume suture(result.sct.shape, result.heatmap.spacing_mm,
                                    calvaria::Modality::SCT);
            const auto& probs = result.heatmap.probs;
            const std::size_t voxels = suture.data.size();
            for (std::size_t i = 0; i < voxels; ++i) {
                suture.data[i] =
                    probs.data[static_cast<std::size_t>(calvaria::LabelMap::kSuture) * voxels + i];
            }
            calvaria::save_volume(suture, dir / "suture_heat.vol");
            std::cout << "inference written: " << dir.string() << "\n";
        } else if (cmd_evaluate->parsed()) {
            const auto dir = calvaria::pipeline::run_full_evaluation(cfg);
            std::cout << "evaluation written: " << dir.string() << "\n";
        } else if (cmd_stats->parsed()) {
            const auto path = calvaria::pipeline::run_stats(
                cfg, or_default(metrics_csv, cfg.out_dir / "eval" / "metrics.csv"));
            std::cout << "stats written: " << path.string() << "\n";
        } else if (cmd_report->parsed()) {
            const auto path = calvaria::pipeline::write_report(cfg);
            std::cout << "report written: " << path.string() << "\n";
        }
        return 0;
    } catch (const calvaria::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const calvaria::ArgumentError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const calvaria::StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 3;
    } catch (const calvaria::FormatError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 3;
    } catch (const calvaria::VersionError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 3;
    } catch (const calvaria::TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 4;
    }
}
