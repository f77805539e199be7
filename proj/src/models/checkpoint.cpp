#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calvaria/core/errors.hpp"
#include "calvaria/models/models.hpp"
#include "calvaria/models/serialize.hpp"

namespace calvaria::models {
namespace {

constexpr char kMagic[8] = {'C', 'A', 'L', 'V', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kBlobVersion = 1;

std::filesystem::path blob_path(const std::filesystem::path& base) {
    std::filesystem::path p = base;
    p += ".ckpt";
    return p;
}

std::filesystem::path manifest_path(const std::filesystem::path& base) {
    std::filesystem::path p = base;
    p += ".json";
    return p;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

} // namespace

nlohmann::json network_config_to_json(const NetworkConfig& cfg) {
    return nlohmann::json{{"base_channels", cfg.base_channels},
                          {"latent_channels", cfg.latent_channels},
                          {"downsampling_levels", cfg.downsampling_levels},
                          {"discriminator_levels", cfg.discriminator_levels},
                          {"lambda_rec", cfg.lambda_rec},
                          {"lambda_adv", cfg.lambda_adv},
                          {"lambda_kl", cfg.lambda_kl},
                          {"lambda_perc", cfg.lambda_perc},
                          {"lambda_dicefocal", cfg.lambda_dicefocal},
                          {"lambda_hd", cfg.lambda_hd},
                          {"focal_gamma", cfg.focal_gamma},
                          {"seed", cfg.seed}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig cfg;
    try {
        cfg.base_channels = j.at("base_channels").get<int>();
        cfg.latent_channels = j.at("latent_channels").get<int>();
        cfg.downsampling_levels = j.at("downsampling_levels").get<int>();
        cfg.discriminator_levels = j.at("discriminator_levels").get<int>();
        cfg.lambda_rec = j.at("lambda_rec").get<double>();
        cfg.lambda_adv = j.at("lambda_adv").get<double>();
        cfg.lambda_kl = j.at("lambda_kl").get<double>();
        cfg.lambda_perc = j.at("lambda_perc").get<double>();
        cfg.lambda_dicefocal = j.at("lambda_dicefocal").get<double>();
        cfg.lambda_hd = j.at("lambda_hd").get<double>();
        cfg.focal_gamma = j.at("focal_gamma").get<double>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("network config: ") + e.what());
    }
    return cfg;
}

void save_checkpoint(const std::filesystem::path& base, const CheckpointMeta& meta,
                     const std::vector<ParamRef>& params) {
    if (base.has_parent_path()) {
        std::filesystem::create_directories(base.parent_path());
    }

    std::ofstream blob(blob_path(base), std::ios::binary | std::ios::trunc);
    if (!blob) {
        throw FormatError("checkpoint: cannot open " + blob_path(base).string() + " for writing");
    }
    blob.write(kMagic, sizeof(kMagic));
    write_pod(blob, kBlobVersion);
    write_pod(blob, static_cast<std::uint32_t>(params.size()));
    for (const ParamRef& p : params) {
        write_pod(blob, static_cast<std::uint32_t>(p.name.size()));
        blob.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod(blob, static_cast<std::uint64_t>(p.value->size()));
        blob.write(reinterpret_cast<const char*>(p.value->data()),
                   static_cast<std::streamsize>(p.value->size() * sizeof(float)));
    }
    if (!blob) {
        throw FormatError("checkpoint: short write to " + blob_path(base).string());
    }
    blob.close();

    nlohmann::json manifest{{"kind", meta.kind},
                            {"config", network_config_to_json(meta.config)},
                            {"epoch", meta.epoch},
                            {"seed", meta.seed},
                            {"loss_history", meta.loss_history},
                            {"parent", meta.parent},
                            {"version", kBlobVersion},
                            {"arrays", params.size()}};
    std::ofstream mf(manifest_path(base), std::ios::trunc);
    if (!mf) {
        throw FormatError("checkpoint: cannot open " + manifest_path(base).string() +
                          " for writing");
    }
    mf << manifest.dump(2) << "\n";
}

CheckpointMeta peek_checkpoint(const std::filesystem::path& base) {
    std::ifstream mf(manifest_path(base));
    if (!mf) {
        throw FormatError("checkpoint: missing manifest " + manifest_path(base).string());
    }
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    CheckpointMeta meta;
    try {
        meta.kind = manifest.at("kind").get<std::string>();
        meta.config = network_config_from_json(manifest.at("config"));
        meta.epoch = manifest.at("epoch").get<int>();
        meta.seed = manifest.at("seed").get<std::uint64_t>();
        meta.loss_history = manifest.at("loss_history").get<std::vector<double>>();
        meta.parent = manifest.value("parent", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    return meta;
}

CheckpointMeta load_checkpoint(const std::filesystem::path& base,
                               const std::vector<ParamRef>& params) {
    CheckpointMeta meta = peek_checkpoint(base);

    std::ifstream blob(blob_path(base), std::ios::binary);
    if (!blob) {
        throw FormatError("checkpoint: missing blob " + blob_path(base).string());
    }
    char magic[8];
    blob.read(magic, sizeof(magic));
    if (!blob || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint: bad magic in " + blob_path(base).string());
    }
    std::uint32_t version = 0, count = 0;
    read_pod(blob, version);
    read_pod(blob, count);
    if (!blob || version != kBlobVersion) {
        throw VersionError("checkpoint: unsupported blob version");
    }

    std::map<std::string, std::vector<float>> arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = 0;
        read_pod(blob, name_len);
        if (!blob || name_len > 4096) {
            throw FormatError("checkpoint: corrupt array name length");
        }
        std::string name(name_len, '\0');
        blob.read(name.data(), name_len);
        std::uint64_t n = 0;
        read_pod(blob, n);
        if (!blob || n > (1ull << 32)) {
            throw FormatError("checkpoint: corrupt array length for " + name);
        }
        std::vector<float> values(static_cast<std::size_t>(n));
        blob.read(reinterpret_cast<char*>(values.data()),
                  static_cast<std::streamsize>(n * sizeof(float)));
        if (!blob) {
            throw FormatError("checkpoint: truncated array data for " + name);
        }
        arrays.emplace(std::move(name), std::move(values));
    }

    // Name-keyed restore: every registry entry must be present with the
    // right size; the file may hold extra arrays (e.g. the discriminator
    // when only the generator is being loaded).
    for (const ParamRef& p : params) {
        const auto it = arrays.find(p.name);
        if (it == arrays.end()) {
            throw FormatError("checkpoint: array '" + p.name + "' missing from " +
                              blob_path(base).string());
        }
        if (it->second.size() != p.value->size()) {
            throw FormatError("checkpoint: array '" + p.name + "' has " +
                              std::to_string(it->second.size()) + " values, expected " +
                              std::to_string(p.value->size()));
        }
        *p.value = it->second;
    }
    return meta;
}

} // namespace calvaria::models
