#pragma once

#include "calvaria/core/volume.hpp"

namespace calvaria {

/// Resamples to target_shape, rescaling spacing so the physical extent
/// (shape * spacing per axis) is preserved. Intensities are interpolated
/// trilinearly; label maps use nearest-neighbor so codes are never blended.
/// Throws ArgumentError if any target axis is < 8.
Volume resample(const Volume& v, const Shape3& target_shape);
LabelMap resample(const LabelMap& m, const Shape3& target_shape);

/// Trilinear sample at fractional voxel coordinates, clamped to the grid.
float sample_trilinear(const Volume& v, double d, double h, double w);

/// Nearest-neighbor label sample; out-of-grid coordinates return `outside`.
std::uint8_t sample_nearest(const LabelMap& m, double d, double h, double w,
                            std::uint8_t outside);

} // namespace calvaria
