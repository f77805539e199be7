#pragma once

#include <nlohmann/json.hpp>

#include "calvaria/models/models.hpp"

namespace calvaria::models {

nlohmann::json network_config_to_json(const NetworkConfig& cfg);

/// Throws FormatError on missing or ill-typed fields.
NetworkConfig network_config_from_json(const nlohmann::json& j);

} // namespace calvaria::models
