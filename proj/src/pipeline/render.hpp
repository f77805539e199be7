#pragma once

// Internal figure rendering: 24-bit BMP slice grids and overlays.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "calvaria/core/volume.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::pipeline::detail {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

struct Image {
    int width = 0;
    int height = 0;
    std::vector<Rgb> px;

    Image() = default;
    Image(int w, int h, Rgb fill = {}) : width(w), height(h), px(static_cast<std::size_t>(w) * h, fill) {}
    Rgb& at(int x, int y) { return px[static_cast<std::size_t>(y) * width + x]; }
    const Rgb& at(int x, int y) const { return px[static_cast<std::size_t>(y) * width + x]; }
};

/// Uncompressed bottom-up 24-bit BMP.
void save_bmp(const Image& img, const std::filesystem::path& path);

/// Mid-volume grayscale slice. plane 0 = axial (fixed depth), 1 = coronal
/// (fixed height), 2 = sagittal (fixed width); index -1 = middle slice.
/// Intensities are clamped to [0,1].
Image gray_slice(const Volume& v, int plane, int index = -1);

/// Alpha-blends `color` onto the image wherever the probability channel is
/// above `threshold`; blend weight is the probability itself.
void overlay_heat(Image& img, const models::ProbabilityMap& p, int channel, int plane,
                  int index, Rgb color, float threshold = 0.1f);

/// Solid-color overlay of one label's voxels in the slice.
void overlay_label(Image& img, const LabelMap& m, int label, int plane, int index, Rgb color);

/// Nearest-neighbor upscale by an integer factor.
Image upscale(const Image& img, int factor);

/// Lays out rows of equally padded cells on a dark background.
Image compose_grid(const std::vector<std::vector<Image>>& rows, int pad = 2);

} // namespace calvaria::pipeline::detail
