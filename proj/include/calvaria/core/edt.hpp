#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "calvaria/core/volume.hpp"

namespace calvaria {

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher),
/// anisotropic: distances are in mm^2 using the given per-axis spacing.
/// mask[i] != 0 marks a site; the result at site voxels is 0. An empty mask
/// yields +infinity everywhere.
std::vector<double> squared_edt(const std::vector<std::uint8_t>& mask,
                                const Shape3& shape, const Spacing3& spacing_mm);

constexpr double kEdtInf = std::numeric_limits<double>::infinity();

} // namespace calvaria
