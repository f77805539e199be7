#include "calvaria/core/resample.hpp"

#include <algorithm>
#include <cmath>

namespace calvaria {
namespace {

// Pixel-centre alignment: output voxel centre x_out maps to input coordinate
// (x_out + 0.5) * in/out - 0.5, which keeps the physical extent of the grid
// fixed while the voxel count changes.
inline double map_coord(int out_idx, int in_dim, int out_dim) {
    return (out_idx + 0.5) * (static_cast<double>(in_dim) / out_dim) - 0.5;
}

Spacing3 rescaled_spacing(const Spacing3& sp, const Shape3& in, const Shape3& out) {
    Spacing3 r;
    for (int a = 0; a < 3; ++a) {
        r[a] = sp[a] * static_cast<double>(in[a]) / out[a];
    }
    return r;
}

} // namespace

float sample_trilinear(const Volume& v, double d, double h, double w) {
    const auto [D, H, W] = v.shape;
    d = std::clamp(d, 0.0, static_cast<double>(D - 1));
    h = std::clamp(h, 0.0, static_cast<double>(H - 1));
    w = std::clamp(w, 0.0, static_cast<double>(W - 1));
    const int d0 = std::min(static_cast<int>(d), D - 2 >= 0 ? D - 2 : 0);
    const int h0 = std::min(static_cast<int>(h), H - 2 >= 0 ? H - 2 : 0);
    const int w0 = std::min(static_cast<int>(w), W - 2 >= 0 ? W - 2 : 0);
    const int d1 = std::min(d0 + 1, D - 1);
    const int h1 = std::min(h0 + 1, H - 1);
    const int w1 = std::min(w0 + 1, W - 1);
    const double fd = d - d0, fh = h - h0, fw = w - w0;
    auto at = [&](int a, int b, int c) { return static_cast<double>(v.at(a, b, c)); };
    const double c00 = at(d0, h0, w0) * (1 - fw) + at(d0, h0, w1) * fw;
    const double c01 = at(d0, h1, w0) * (1 - fw) + at(d0, h1, w1) * fw;
    const double c10 = at(d1, h0, w0) * (1 - fw) + at(d1, h0, w1) * fw;
    const double c11 = at(d1, h1, w0) * (1 - fw) + at(d1, h1, w1) * fw;
    const double c0 = c00 * (1 - fh) + c01 * fh;
    const double c1 = c10 * (1 - fh) + c11 * fh;
    return static_cast<float>(c0 * (1 - fd) + c1 * fd);
}

std::uint8_t sample_nearest(const LabelMap& m, double d, double h, double w,
                            std::uint8_t outside) {
    const auto [D, H, W] = m.shape;
    const long di = std::lround(d);
    const long hi = std::lround(h);
    const long wi = std::lround(w);
    if (di < 0 || di >= D || hi < 0 || hi >= H || wi < 0 || wi >= W) {
        return outside;
    }
    return m.at(static_cast<int>(di), static_cast<int>(hi), static_cast<int>(wi));
}

Volume resample(const Volume& v, const Shape3& out_shape) {
    validate(v);
    validate_grid(out_shape, v.spacing_mm);
    Volume out;
    out.shape = out_shape;
    out.spacing_mm = rescaled_spacing(v.spacing_mm, v.shape, out_shape);
    out.modality = v.modality;
    out.data.resize(static_cast<std::size_t>(voxel_count(out_shape)));
    std::size_t i = 0;
    for (int d = 0; d < out_shape[0]; ++d) {
        const double sd = map_coord(d, v.shape[0], out_shape[0]);
        for (int h = 0; h < out_shape[1]; ++h) {
            const double sh = map_coord(h, v.shape[1], out_shape[1]);
            for (int w = 0; w < out_shape[2]; ++w) {
                const double sw = map_coord(w, v.shape[2], out_shape[2]);
                out.data[i++] = sample_trilinear(v, sd, sh, sw);
            }
        }
    }
    return out;
}

LabelMap resample(const LabelMap& m, const Shape3& out_shape) {
    validate(m);
    validate_grid(out_shape, m.spacing_mm);
    LabelMap out;
    out.shape = out_shape;
    out.spacing_mm = rescaled_spacing(m.spacing_mm, m.shape, out_shape);
    out.data.resize(static_cast<std::size_t>(voxel_count(out_shape)));
    std::size_t i = 0;
    for (int d = 0; d < out_shape[0]; ++d) {
        const double sd = std::clamp(map_coord(d, m.shape[0], out_shape[0]), 0.0,
                                     static_cast<double>(m.shape[0] - 1));
        for (int h = 0; h < out_shape[1]; ++h) {
            const double sh = std::clamp(map_coord(h, m.shape[1], out_shape[1]), 0.0,
                                         static_cast<double>(m.shape[1] - 1));
            for (int w = 0; w < out_shape[2]; ++w) {
                const double sw = std::clamp(map_coord(w, m.shape[2], out_shape[2]), 0.0,
                                             static_cast<double>(m.shape[2] - 1));
                out.data[i++] = sample_nearest(m, sd, sh, sw, LabelMap::kBackground);
            }
        }
    }
    return out;
}

} // namespace calvaria
