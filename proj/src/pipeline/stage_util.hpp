#pragma once

// Internal helpers shared by the pipeline stages (not installed).

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "calvaria/core/volume.hpp"
#include "calvaria/pipeline/pipeline.hpp"

namespace calvaria::pipeline::detail {

inline std::filesystem::path preprocessed_dir(const ExperimentConfig& cfg) {
    return cfg.out_dir / "preprocessed";
}
inline std::filesystem::path checkpoints_dir(const ExperimentConfig& cfg) {
    return cfg.out_dir / "checkpoints";
}
inline std::filesystem::path eval_dir(const ExperimentConfig& cfg) { return cfg.out_dir / "eval"; }
inline std::filesystem::path figures_dir(const ExperimentConfig& cfg) {
    return cfg.out_dir / "figures";
}

/// True when dir/stamp.json exists and carries this config hash.
bool stamp_matches(const std::filesystem::path& dir, const std::string& hash);

/// Writes dir/stamp.json = {"config_hash": hash, "stage": stage}.
void write_stamp(const std::filesystem::path& dir, const std::string& hash,
                 const std::string& stage);

/// split.json IO: {"parts": {subject_id: "train"|"val"|"test"}}.
void save_split(const SplitAssignment& split, const std::filesystem::path& path);
SplitAssignment load_split(const std::filesystem::path& path);

/// FNV-1a 64-bit hash of a file's bytes, 16 hex digits. Missing -> StateError.
std::string file_hash(const std::filesystem::path& path);

/// Restores a generator (g.* arrays) / segmenter (s.* arrays) from a
/// checkpoint base path, configured from the manifest. Missing manifest ->
/// StateError; corrupt contents -> FormatError.
models::SynthesisVae load_generator(const std::filesystem::path& base);
models::SegmentationNet load_segmenter(const std::filesystem::path& base);

} // namespace calvaria::pipeline::detail
