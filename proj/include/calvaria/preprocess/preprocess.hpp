#pragma once

#include <array>
#include <filesystem>
#include <string>

#include "calvaria/core/volume.hpp"

namespace calvaria::preprocess {

enum class RegMode { rigid6, similarity9 };
enum class RegMetric { mse, mutual_information };

std::string to_string(RegMode m);
std::string to_string(RegMetric m);
RegMode reg_mode_from_string(const std::string& s);
RegMetric reg_metric_from_string(const std::string& s);

/// Forward map about the volume's physical center c:
///     y = c + t + R * (s .* (x - c))
/// with R = Rz(rot[2]) * Ry(rot[1]) * Rx(rot[0]) in right-handed axes
/// (x, y, z) = (w, h, d). Resampling pulls back through the analytic
/// inverse x = c + (1/s) .* (R^T (y - c - t)).
struct SimilarityTransform {
    std::array<double, 3> rotation{0, 0, 0};       // radians about (w, h, d)
    std::array<double, 3> translation_mm{0, 0, 0}; // (w, h, d) components
    std::array<double, 3> scale{1, 1, 1};          // rigid mode keeps exactly 1
    RegMode mode = RegMode::rigid6;
    RegMetric metric = RegMetric::mse;
    bool converged = true;
};

/// Parameter-space inverse; exact for rigid and isotropic-scale transforms.
/// Anisotropic scale does not stay in this family -> DomainError.
SimilarityTransform inverse(const SimilarityTransform& t);

void save_transform(const SimilarityTransform& t, const std::filesystem::path& path);
SimilarityTransform load_transform(const std::filesystem::path& path);

/// Keeps the 26-connected nonzero component carrying the most voxels above
/// the Otsu threshold (computed over nonzero intensities) and zeroes every
/// other voxel, discarding bed/table artifacts while keeping the whole head
/// (sub-threshold soft tissue connected to the skull survives).
/// No voxel above threshold -> EmptyForegroundError.
Volume remove_bed(const Volume& ct);

/// Divides out a multiplicative bias field: least-squares fit of a
/// degree-`order` 3D polynomial to log-intensity over foreground (v > 0),
/// field exponentiated and normalized to unit mean over foreground.
/// Negative intensities -> DomainError.
Volume correct_bias(const Volume& mri, int order = 3);

/// Mean squared error over the shared grid (shapes must match).
double mse_metric(const Volume& a, const Volume& b);

/// Mutual information from a 32x32 joint histogram with linear binning over
/// foreground voxels (either volume > 1e-6). Natural-log units.
double mutual_information(const Volume& a, const Volume& b);

/// Multi-resolution (3-level, factor-2) registration of `moving` onto
/// `fixed` by derivative-free coordinate descent with golden-section line
/// searches, 200 metric evaluations per level. The result's `converged`
/// flag is false when no improving step was found at the coarsest level.
/// mse across differing modalities -> ArgumentError.
SimilarityTransform register_volumes(const Volume& moving, const Volume& fixed,
                                     RegMode mode, RegMetric metric);

/// Resamples through the transform about the volume's own center; trilinear
/// for intensities, nearest for labels; out-of-field voxels are background.
Volume apply_transform(const Volume& v, const SimilarityTransform& t);
LabelMap apply_transform(const LabelMap& m, const SimilarityTransform& t);

/// Otsu threshold over the given sample (exposed for tests).
float otsu_threshold(const std::vector<float>& values);

} // namespace calvaria::preprocess
