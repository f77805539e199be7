#pragma once

#include <filesystem>

#include "calvaria/core/volume.hpp"

namespace calvaria {

/// Volume container: a two-file pair <base>.vol + <base>.json.
///
/// <base>.vol   raw little-endian payload, C-order (depth slowest):
///              float32 for intensity volumes, uint8 for label maps.
/// <base>.json  {"shape":[D,H,W], "spacing_mm":[sd,sh,sw],
///               "modality":"MRI|CT|SCT|LABEL", "dtype":"f32|u8", "version":1}
///
/// With compress=true the payload is written as <base>.vol.gz instead; the
/// decompressed bytes are identical to the uncompressed form. Loaders accept
/// either, preferring the uncompressed file when both exist.
///
/// The `path` argument may carry the .vol / .vol.gz / .json suffix or none;
/// the base name is derived by stripping a recognized suffix.
///
/// Errors: payload length inconsistent with header shape -> FormatError;
/// unknown header version -> VersionError; dtype/modality mismatched with the
/// requested kind -> FormatError.
void save_volume(const Volume& v, const std::filesystem::path& path, bool compress = false);
Volume load_volume(const std::filesystem::path& path);

void save_labels(const LabelMap& m, const std::filesystem::path& path, bool compress = false);
LabelMap load_labels(const std::filesystem::path& path);

} // namespace calvaria
