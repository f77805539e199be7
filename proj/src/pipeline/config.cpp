#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "calvaria/core/errors.hpp"
#include "calvaria/models/serialize.hpp"
#include "calvaria/pipeline/serialize.hpp"

namespace calvaria::pipeline {

namespace {

void require_keys(const nlohmann::json& j, const std::set<std::string>& required,
                  const std::set<std::string>& optional, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError("config: " + where + " must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (required.count(key) == 0 && optional.count(key) == 0) {
            throw ConfigError("config: unknown key \"" + key + "\" in " + where);
        }
    }
    for (const std::string& key : required) {
        if (!j.contains(key)) {
            throw ConfigError("config: missing key \"" + key + "\" in " + where);
        }
    }
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: bad value for \"" + key + "\" in " + where + ": " + e.what());
    }
}

} // namespace

void validate(const ExperimentConfig& cfg) {
    if (cfg.data_dir.empty() || cfg.out_dir.empty()) {
        throw ConfigError("config: data_dir and out_dir must be set");
    }
    const double sum = cfg.train_fraction + cfg.val_fraction + cfg.test_fraction;
    if (!(cfg.train_fraction >= 0 && cfg.val_fraction >= 0 && cfg.test_fraction >= 0) ||
        std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("config: split fractions must be nonnegative and sum to 1");
    }
    if (cfg.epochs < 1) {
        throw ConfigError("config: epochs must be >= 1");
    }
    if (!(cfg.lr_generator > 0) || !(cfg.lr_discriminator > 0) || !(cfg.lr_segmenter > 0)) {
        throw ConfigError("config: learning rates must be positive");
    }
    if (cfg.batch_size < 1) {
        throw ConfigError("config: batch_size must be >= 1");
    }
    const int div = 1 << cfg.network.downsampling_levels;
    for (int ax = 0; ax < 3; ++ax) {
        if (cfg.grid[ax] < kMinAxisDim) {
            throw ConfigError("config: grid axes must be >= 8");
        }
        if (cfg.grid[ax] % div != 0) {
            throw ConfigError("config: grid axes must be divisible by 2^downsampling_levels");
        }
    }
    try {
        models::validate(cfg.network);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config: network: ") + e.what());
    }
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j{
        {"data_dir", cfg.data_dir.generic_string()},
        {"out_dir", cfg.out_dir.generic_string()},
        {"grid", {cfg.grid[0], cfg.grid[1], cfg.grid[2]}},
        {"fractions",
         {{"train", cfg.train_fraction}, {"val", cfg.val_fraction}, {"test", cfg.test_fraction}}},
        {"epochs", cfg.epochs},
        {"learning_rates",
         {{"generator", cfg.lr_generator},
          {"discriminator", cfg.lr_discriminator},
          {"segmenter", cfg.lr_segmenter}}},
        {"batch_size", cfg.batch_size},
        {"seed", cfg.seed},
        {"network", models::network_config_to_json(cfg.network)},
    };
    if (cfg.atlas_subject) {
        j["atlas_subject"] = *cfg.atlas_subject;
    }
    return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    require_keys(j,
                 {"data_dir", "out_dir", "grid", "fractions", "epochs", "learning_rates",
                  "batch_size", "seed", "network"},
                 {"atlas_subject"}, "config");
    require_keys(j.at("fractions"), {"train", "val", "test"}, {}, "fractions");
    require_keys(j.at("learning_rates"), {"generator", "discriminator", "segmenter"}, {},
                 "learning_rates");
    require_keys(j.at("network"),
                 {"base_channels", "latent_channels", "downsampling_levels",
                  "discriminator_levels", "lambda_rec", "lambda_adv", "lambda_kl", "lambda_perc",
                  "lambda_dicefocal", "lambda_hd", "focal_gamma", "seed"},
                 {}, "network");

    ExperimentConfig cfg;
    cfg.data_dir = get_as<std::string>(j, "data_dir", "config");
    cfg.out_dir = get_as<std::string>(j, "out_dir", "config");
    const auto grid = get_as<std::vector<int>>(j, "grid", "config");
    if (grid.size() != 3) {
        throw ConfigError("config: grid must have exactly 3 entries");
    }
    cfg.grid = {grid[0], grid[1], grid[2]};
    cfg.train_fraction = get_as<double>(j.at("fractions"), "train", "fractions");
    cfg.val_fraction = get_as<double>(j.at("fractions"), "val", "fractions");
    cfg.test_fraction = get_as<double>(j.at("fractions"), "test", "fractions");
    cfg.epochs = get_as<int>(j, "epochs", "config");
    cfg.lr_generator = get_as<double>(j.at("learning_rates"), "generator", "learning_rates");
    cfg.lr_discriminator =
        get_as<double>(j.at("learning_rates"), "discriminator", "learning_rates");
    cfg.lr_segmenter = get_as<double>(j.at("learning_rates"), "segmenter", "learning_rates");
    cfg.batch_size = get_as<int>(j, "batch_size", "config");
    cfg.seed = get_as<std::uint64_t>(j, "seed", "config");
    try {
        cfg.network = models::network_config_from_json(j.at("network"));
    } catch (const FormatError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (j.contains("atlas_subject")) {
        cfg.atlas_subject = get_as<std::string>(j, "atlas_subject", "config");
    }
    validate(cfg);
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot read " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw ConfigError("config: cannot write " + path.string());
    }
    out << experiment_config_to_json(cfg).dump(2) << "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
    const std::string canon = experiment_config_to_json(cfg).dump();
    std::uint64_t h = 1469598103934665603ull; // FNV-1a offset basis
    for (const unsigned char c : canon) {
        h ^= c;
        h *= 1099511628211ull;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = hex[h & 0xf];
        h >>= 4;
    }
    return out;
}

} // namespace calvaria::pipeline
