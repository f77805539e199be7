#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "calvaria/core/errors.hpp"
#include "calvaria/core/rng.hpp"
#include "calvaria/core/volume_io.hpp"
#include "calvaria/metrics/metrics.hpp"
#include "calvaria/models/serialize.hpp"
#include "calvaria/pipeline/pipeline.hpp"
#include "stage_util.hpp"

namespace calvaria::pipeline {

namespace {

struct LoadedSubject {
    std::string id;
    Volume mri;
    Volume ct;
    LabelMap labels;
};

std::filesystem::path require_preprocessed(const ExperimentConfig& cfg) {
    const std::filesystem::path pre = detail::preprocessed_dir(cfg);
    if (!std::filesystem::exists(pre / "split.json")) {
        throw StateError("train: no preprocessed data under " + pre.string() +
                         " (run the preprocess stage first)");
    }
    return pre;
}

std::vector<LoadedSubject> load_part(const std::filesystem::path& pre,
                                     const SplitAssignment& split, SplitPart part) {
    std::vector<LoadedSubject> out;
    for (const std::string& id : split.ids(part)) {
        const SubjectRecord rec = load_subject(pre / id);
        out.push_back({id, rec.mri, rec.ct, rec.bones_sutures});
    }
    return out;
}

/// Seed-derived epoch shuffle of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t stream,
                                     int epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(Rng::derive_seed(seed, stream + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    return order;
}

void write_history(const std::filesystem::path& path, const nlohmann::json& epochs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw StateError("cannot write " + path.string());
    }
    out << nlohmann::json{{"epochs", epochs}}.dump(2) << "\n";
}

LabelMap load_atlas_labels(const std::filesystem::path& pre) {
    const std::filesystem::path path = pre / "atlas" / "labels.vol";
    if (!std::filesystem::exists(path)) {
        throw StateError("train: missing atlas prior " + path.string());
    }
    return load_labels(path);
}

/// Mean Dice over the 8 anatomy labels for one prediction.
double mean_dice(const LabelMap& pred, const LabelMap& gt) {
    const std::map<int, double> d = metrics::dice_per_label(pred, gt);
    double acc = 0.0;
    for (const auto& [label, value] : d) {
        (void)label;
        acc += value;
    }
    return acc / static_cast<double>(d.size());
}

/// One segmentation training run: shared by train_segmentation (fresh
/// weights) and finetune_segmentation (parent weights, reduced lr).
std::filesystem::path run_segmentation_training(
    const ExperimentConfig& cfg, const std::filesystem::path& synthesis_ckpt,
    const std::filesystem::path& out_dir, double lr, int epochs,
    const std::filesystem::path* parent_ckpt, std::uint64_t shuffle_stream) {
    const std::filesystem::path pre = require_preprocessed(cfg);
    // Fine-tune runs also key their stamp on the epoch count, which may be
    // overridden per call.
    const std::string hash =
        config_hash(cfg) + (parent_ckpt ? "-ft" + std::to_string(epochs) : "");
    const std::filesystem::path base = out_dir / "best";
    if (detail::stamp_matches(out_dir, hash) &&
        std::filesystem::exists(base.string() + ".json")) {
        return base;
    }

    const SplitAssignment split = detail::load_split(pre / "split.json");
    std::vector<LoadedSubject> train = load_part(pre, split, SplitPart::train);
    std::vector<LoadedSubject> val = load_part(pre, split, SplitPart::val);
    if (train.empty() || val.empty()) {
        throw StateError("train: empty train or val split");
    }
    const LabelMap atlas = load_atlas_labels(pre);

    // Stage 2 consumes sCTs, not real CTs: synthesize every input once (the
    // generator is frozen and deterministic here).
    const models::SynthesisVae vae = detail::load_generator(synthesis_ckpt);
    for (auto* part : {&train, &val}) {
        for (LoadedSubject& s : *part) {
            s.ct = vae.synthesize(s.mri, /*deterministic=*/true);
        }
    }

    models::SegmentationTrainer trainer(cfg.network, lr);
    std::string parent_tag;
    if (parent_ckpt != nullptr) {
        if (!std::filesystem::exists(parent_ckpt->string() + ".json")) {
            throw StateError("missing segmentation checkpoint " + parent_ckpt->string());
        }
        models::load_checkpoint(*parent_ckpt, trainer.network().params("s."));
        trainer.network().mark_trained();
        parent_tag = parent_ckpt->generic_string() + "#fnv1a:" +
                     detail::file_hash(parent_ckpt->string() + ".ckpt");
    }

    const auto val_mean_dice = [&]() {
        double acc = 0.0;
        for (const LoadedSubject& s : val) {
            const models::ProbabilityMap p = trainer.network().segment(s.ct, atlas);
            acc += mean_dice(models::heatmap_to_segmentation(p), s.labels);
        }
        return acc / static_cast<double>(val.size());
    };

    std::filesystem::create_directories(out_dir);
    const auto save_best = [&](int epoch, const std::vector<double>& losses) {
        models::CheckpointMeta meta;
        meta.kind = "segmentation";
        meta.config = cfg.network;
        meta.epoch = epoch;
        meta.seed = cfg.seed;
        meta.loss_history = losses;
        meta.parent = parent_tag;
        models::save_checkpoint(base, meta, trainer.network().params("s."));
    };

    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> losses;
    nlohmann::json history = nlohmann::json::array();

    if (parent_ckpt != nullptr) {
        // Fine-tuning competes against its starting point: epochs that hurt
        // validation Dice never displace the parent weights, and 0 epochs
        // saves them verbatim.
        best = val_mean_dice();
        save_best(0, losses);
        history.push_back({{"epoch", 0}, {"val_mean_dice", best}});
    }

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        const std::vector<std::size_t> order =
            epoch_order(train.size(), cfg.seed, shuffle_stream, epoch);
        double epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t batch_end =
                std::min(done + static_cast<std::size_t>(cfg.batch_size), order.size());
            for (; done < batch_end; ++done) {
                const LoadedSubject& s = train[order[done]];
                const std::string batch_id =
                    "epoch-" + std::to_string(epoch) + "/" + s.id;
                epoch_loss += trainer.accumulate(s.ct, atlas, s.labels, batch_id).loss.total;
            }
            trainer.apply_updates();
        }
        epoch_loss /= static_cast<double>(order.size());
        losses.push_back(epoch_loss);

        const double vd = val_mean_dice();
        if (vd > best) {
            best = vd;
            save_best(epoch, losses);
        }
        history.push_back(
            {{"epoch", epoch}, {"train_loss", epoch_loss}, {"val_mean_dice", vd}});
    }

    if (parent_ckpt == nullptr && !std::filesystem::exists(base.string() + ".json")) {
        // Degenerate guard: epochs >= 1 always runs the loop, but if no epoch
        // beat -inf something is deeply wrong.
        throw StateError("train: no checkpoint was ever saved");
    }
    write_history(out_dir / "history.json", history);
    detail::write_stamp(out_dir, hash, parent_ckpt ? "finetune-seg" : "train-seg");
    return base;
}

} // namespace

std::filesystem::path train_synthesis(const ExperimentConfig& cfg) {
    validate(cfg);
    const std::filesystem::path pre = require_preprocessed(cfg);
    const std::string hash = config_hash(cfg);
    const std::filesystem::path out_dir = detail::checkpoints_dir(cfg) / "synthesis";
    const std::filesystem::path base = out_dir / "best";
    if (detail::stamp_matches(out_dir, hash) &&
        std::filesystem::exists(base.string() + ".json")) {
        return base;
    }

    const SplitAssignment split = detail::load_split(pre / "split.json");
    const std::vector<LoadedSubject> train = load_part(pre, split, SplitPart::train);
    const std::vector<LoadedSubject> val = load_part(pre, split, SplitPart::val);
    if (train.empty() || val.empty()) {
        throw StateError("train: empty train or val split");
    }

    models::SynthesisTrainer trainer(cfg.network, cfg.lr_generator, cfg.lr_discriminator);
    std::filesystem::create_directories(out_dir);

    double best_ssim = -std::numeric_limits<double>::infinity();
    std::vector<double> losses;
    nlohmann::json history = nlohmann::json::array();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(train.size(), cfg.seed, 1000, epoch);
        double g_loss = 0.0, d_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t batch_end =
                std::min(done + static_cast<std::size_t>(cfg.batch_size), order.size());
            for (; done < batch_end; ++done) {
                const LoadedSubject& s = train[order[done]];
                const std::string batch_id =
                    "epoch-" + std::to_string(epoch) + "/" + s.id;
                const models::SynthesisStepStats stats =
                    trainer.accumulate(s.mri, s.ct, batch_id);
                g_loss += stats.generator.total;
                d_loss += stats.discriminator;
            }
            trainer.apply_updates();
        }
        g_loss /= static_cast<double>(order.size());
        d_loss /= static_cast<double>(order.size());
        losses.push_back(g_loss);

        double val_ssim = 0.0;
        for (const LoadedSubject& s : val) {
            const Volume sct = trainer.generator().synthesize(s.mri, /*deterministic=*/true);
            val_ssim += metrics::ssim(sct, s.ct);
        }
        val_ssim /= static_cast<double>(val.size());

        if (val_ssim > best_ssim) {
            best_ssim = val_ssim;
            models::CheckpointMeta meta;
            meta.kind = "synthesis";
            meta.config = cfg.network;
            meta.epoch = epoch;
            meta.seed = cfg.seed;
            meta.loss_history = losses;
            // One blob holds generator and discriminator; inference restores
            // only the g.* arrays.
            std::vector<models::ParamRef> params = trainer.generator().params("g.");
            const std::vector<models::ParamRef> dparams = trainer.discriminator().params("d.");
            params.insert(params.end(), dparams.begin(), dparams.end());
            models::save_checkpoint(base, meta, params);
        }
        history.push_back({{"epoch", epoch},
                           {"train_loss", g_loss},
                           {"discriminator_loss", d_loss},
                           {"val_ssim", val_ssim}});
    }

    write_history(out_dir / "history.json", history);
    detail::write_stamp(out_dir, hash, "train-synth");
    return base;
}

std::filesystem::path train_segmentation(const ExperimentConfig& cfg,
                                         const std::filesystem::path& synthesis_ckpt) {
    validate(cfg);
    return run_segmentation_training(cfg, synthesis_ckpt,
                                     detail::checkpoints_dir(cfg) / "segmentation",
                                     cfg.lr_segmenter, cfg.epochs, nullptr, 2000);
}

std::filesystem::path finetune_segmentation(const ExperimentConfig& cfg,
                                            const std::filesystem::path& synthesis_ckpt,
                                            const std::filesystem::path& segmentation_ckpt,
                                            int epochs) {
    validate(cfg);
    if (epochs < 0) {
        epochs = cfg.epochs;
    }
    return run_segmentation_training(cfg, synthesis_ckpt,
                                     detail::checkpoints_dir(cfg) / "segmentation_ft",
                                     0.1 * cfg.lr_segmenter, epochs, &segmentation_ckpt, 3000);
}

} // namespace calvaria::pipeline
