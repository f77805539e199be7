#pragma once

#include <map>
#include <vector>

#include "calvaria/core/volume.hpp"

namespace calvaria::metrics {

/// Mean local SSIM over the valid region (full 7^3 Gaussian window support),
/// window sigma 1.5, C1=(0.01 L)^2, C2=(0.03 L)^2 with dynamic range L=1.
/// Requires every axis >= 7. Shape mismatch -> ShapeError.
double ssim(const Volume& a, const Volume& b);

struct PsnrMae {
    double psnr_db; // +infinity when the volumes are identical
    double mae;
};

/// PSNR (10*log10(1/MSE), L=1) and mean absolute error.
PsnrMae psnr_mae(const Volume& a, const Volume& b);

/// Frechet distance between the Gaussians fitted to two feature-vector sets:
/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}). Covariances use the
/// n-1 normalization; the matrix square root is computed by symmetric
/// eigendecomposition of Sa^{1/2} Sb Sa^{1/2} with eigenvalues clamped at 0.
/// Requires >= 2 vectors per set, all of one dimension -> ArgumentError.
double fid(const std::vector<std::vector<float>>& features_a,
           const std::vector<std::vector<float>>& features_b);

/// LPIPS-style perceptual distance: feature maps of the canonical frozen
/// feature stack, unit-normalized across channels at every location, squared
/// differences averaged over locations and then over layers. Symmetric,
/// zero at identity. Shape mismatch -> ShapeError.
double perceptual_distance(const Volume& a, const Volume& b);

/// Frozen-stack descriptors of overlapping cubic patches (side `patch`,
/// stride `stride`), as FID feature vectors. Patches must fit: every axis
/// must be >= patch and divisible constraints do not apply (the last patch
/// is clamped to the boundary). Throws ArgumentError on a non-positive
/// stride or a patch smaller than 16 (the stack's 4 stride-2 layers).
std::vector<std::vector<float>> fid_descriptors(const Volume& v, int patch = 16,
                                                int stride = 8);

/// Per-label Dice for codes 1..8: 2|P&G| / (|P|+|G|); both empty -> 1,
/// exactly one empty -> 0. Grid mismatch -> ShapeError.
std::map<int, double> dice_per_label(const LabelMap& pred, const LabelMap& gt);

/// 95th-percentile Hausdorff distance (mm) for one label. Boundary voxels are
/// foreground voxels 6-adjacent to background (the outside of the grid counts
/// as background); both directed distance sets are pooled and the percentile
/// uses linear interpolation between order statistics. Label empty in either
/// mask -> UndefinedDistanceError.
double hd95(const LabelMap& pred, const LabelMap& gt, int label);

/// Extracts the boundary voxel mask (1 = boundary) for one label.
std::vector<std::uint8_t> boundary_mask(const LabelMap& m, int label);

/// p-th percentile (p in [0,100]) with linear interpolation between order
/// statistics; values need not be sorted. Empty input -> ArgumentError.
double percentile(std::vector<double> values, double p);

/// Mean and sample standard deviation (n-1; 0 when n < 2).
struct MeanSd {
    double mean;
    double sd;
};
MeanSd mean_sd(const std::vector<double>& values);

} // namespace calvaria::metrics
