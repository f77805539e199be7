#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "calvaria/core/volume.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::pipeline {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Everything a run needs; mirrored exactly by the JSON config file (see
/// serialize.hpp). Unknown or missing keys in the file are ConfigErrors.
struct ExperimentConfig {
    std::filesystem::path data_dir;  // phantom cohort root (one subdir per subject)
    std::filesystem::path out_dir;   // experiment output root
    Shape3 grid{48, 48, 48};         // common grid after preprocessing
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    int epochs = 200;
    double lr_generator = 1e-4;
    double lr_discriminator = 4e-4;
    double lr_segmenter = 2e-4;
    int batch_size = 4;
    std::uint64_t seed = 0;
    models::NetworkConfig network;
    std::optional<std::string> atlas_subject; // explicit override; default youngest
};

/// Throws ConfigError on out-of-range values (fractions must sum to 1
/// within 1e-9, epochs >= 1, learning rates > 0, batch_size >= 1, grid
/// axes >= 8 and divisible by 2^downsampling_levels) and validates the
/// nested NetworkConfig.
void validate(const ExperimentConfig& cfg);

/// FNV-1a 64-bit hash of the canonical config JSON, as 16 hex digits.
/// Stages stamp their outputs with it so re-runs are idempotent.
std::string config_hash(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Cohort metadata, splitting, atlas selection
// ---------------------------------------------------------------------------

struct SubjectMeta {
    std::string subject_id;
    int age_days = 0;
    Sex sex = Sex::M;
};

enum class SplitPart { train, val, test };

std::string to_string(SplitPart p);
SplitPart split_part_from_string(const std::string& s);

struct SplitAssignment {
    std::map<std::string, SplitPart> parts;

    /// Subject ids of one partition, sorted.
    std::vector<std::string> ids(SplitPart p) const;
};

/// Stratified split: strata are (sex x age tercile); val and test sizes hit
/// round(fraction * n) globally, apportioned to strata by largest fractional
/// remainder; the remainder of every stratum trains. Within a stratum the
/// assignment order is shuffled by a seed-derived stream, so the result is
/// deterministic for a fixed (cohort, seed). Cohort < 10 -> ArgumentError.
SplitAssignment split_dataset(const std::vector<SubjectMeta>& cohort, double train_fraction,
                              double val_fraction, double test_fraction, std::uint64_t seed);

/// The atlas subject: the explicit id when provided (must exist ->
/// ArgumentError otherwise), else minimum age_days, ties toward the
/// lexicographically smallest id. Empty cohort -> ArgumentError.
const SubjectMeta& select_atlas(const std::vector<SubjectMeta>& cohort,
                                const std::optional<std::string>& explicit_id);

// ---------------------------------------------------------------------------
// On-disk dataset layout
// ---------------------------------------------------------------------------
//
// data_dir/<subject_id>/{mri,ct,labels}.vol(+.json) + subject.json
// out_dir/preprocessed/<subject_id>/...   same triple, common grid
// out_dir/preprocessed/split.json         subject -> train|val|test
// out_dir/preprocessed/atlas/...          atlas labels + reference CT
// out_dir/checkpoints/...                 <stage>_best.ckpt/.json + history
// out_dir/eval/...                        metrics.json, metrics.csv, stats
// out_dir/figures/...                     slice grids + suture overlays

void write_subject(const std::filesystem::path& dir, const SubjectRecord& rec);

/// Reads subject.json only (id, age_days, sex). Missing/invalid -> FormatError.
SubjectMeta load_subject_meta(const std::filesystem::path& dir);

/// Loads the full record (volumes + labels).
SubjectRecord load_subject(const std::filesystem::path& dir);

/// All subjects under a dataset root (subdirectories holding subject.json),
/// sorted by id. Missing or empty root -> StateError.
std::vector<SubjectMeta> list_cohort(const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------
//
// Every stage writes a stamp.json carrying the config hash into its output
// directory and returns early (reuse) when a complete previous run with the
// same hash is present.

/// Generates an n-subject phantom cohort into cfg.data_dir at cfg.grid.
std::filesystem::path run_phantom(const ExperimentConfig& cfg, int n);

/// Preprocesses the cohort onto the common grid: CT bed removal, MRI bias
/// correction, 9-DOF MRI->CT registration, rigid 6-DOF CT->reference
/// alignment (reference = atlas subject's cleaned CT), label carry-along,
/// resampling, split assignment. Returns out_dir/preprocessed.
std::filesystem::path run_preprocess(const ExperimentConfig& cfg);

/// Stage-1 training (alternating generator/discriminator, batch-averaged
/// gradient accumulation). Per-epoch validation SSIM drives best-checkpoint
/// selection. Returns the best checkpoint base path. Missing preprocessed
/// data -> StateError; non-finite loss -> TrainingAbort.
std::filesystem::path train_synthesis(const ExperimentConfig& cfg);

/// Stage-2 training on sCTs produced by the stage-1 generator, conditioned
/// on the atlas. Validation mean Dice drives best-checkpoint selection.
std::filesystem::path train_segmentation(const ExperimentConfig& cfg,
                                         const std::filesystem::path& synthesis_ckpt);

/// Continues segmentation training from `segmentation_ckpt` on sCT inputs at
/// 0.1x the segmenter learning rate for `epochs` epochs (cfg.epochs when
/// negative). The manifest records the parent checkpoint path and hash;
/// 0 epochs leaves the weights identical to the parent's.
std::filesystem::path finetune_segmentation(const ExperimentConfig& cfg,
                                            const std::filesystem::path& synthesis_ckpt,
                                            const std::filesystem::path& segmentation_ckpt,
                                            int epochs = -1);

struct InferenceResult {
    Volume sct;
    models::ProbabilityMap heatmap;
    LabelMap labels;
};

/// MRI -> sCT -> atlas-guided segmentation for one preprocessed subject.
InferenceResult infer_subject(const ExperimentConfig& cfg,
                              const std::filesystem::path& synthesis_ckpt,
                              const std::filesystem::path& segmentation_ckpt,
                              const std::string& subject_id);

/// Full test-split evaluation: image-quality metrics (SSIM/PSNR/MAE/
/// LPIPS-proxy/FID), segmentation metrics (Dice, HD95 per label) for
/// real-CT, sCT, and fine-tuned-sCT conditions, figures, metrics.json +
/// metrics.csv. Returns out_dir/eval. Missing artifacts -> StateError.
std::filesystem::path run_full_evaluation(const ExperimentConfig& cfg);

/// Wilcoxon + TOST panel over the per-region paired metrics in metrics.csv
/// (real-CT vs sCT segmentation); writes stats.json and stats_table.txt
/// next to it. Returns the stats.json path.
std::filesystem::path run_stats(const ExperimentConfig& cfg,
                                const std::filesystem::path& metrics_csv);

/// Human-readable report.md assembled from metrics.json + stats.json.
std::filesystem::path write_report(const ExperimentConfig& cfg);

} // namespace calvaria::pipeline
