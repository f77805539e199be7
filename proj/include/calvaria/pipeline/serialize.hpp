#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "calvaria/pipeline/pipeline.hpp"

namespace calvaria::pipeline {

/// Canonical JSON form of a config (object keys sorted, paths as strings).
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);

/// Strict inverse: every key required except the optional atlas_subject;
/// unknown keys anywhere (including inside network) -> ConfigError. The
/// result is validated before being returned.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Reads and strictly parses a config file. Unreadable file or invalid
/// JSON -> ConfigError.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

} // namespace calvaria::pipeline
