#pragma once

#include <array>
#include <cmath>

#include "calvaria/core/volume.hpp"
#include "calvaria/preprocess/preprocess.hpp"

namespace calvaria::preprocess::detail {

/// Right-handed axes (x, y, z) = (w, h, d). Rows/cols in x, y, z order.
/// R = Rz(rot[2]) * Ry(rot[1]) * Rx(rot[0]).
inline std::array<double, 9> rotation_zyx(const std::array<double, 3>& rot) {
    const double ca = std::cos(rot[0]), sa = std::sin(rot[0]); // about x (w)
    const double cb = std::cos(rot[1]), sb = std::sin(rot[1]); // about y (h)
    const double cg = std::cos(rot[2]), sg = std::sin(rot[2]); // about z (d)
    return {
        cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa,
        sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa,
        -sb,     cb * sa,                cb * ca,
    };
}

/// Maps output voxel centers to fractional input voxel coordinates through
/// the analytic inverse x = c_in + (1/s) .* R^T (y - c_out - t).
struct PullBack {
    std::array<double, 9> rt{};            // R transposed, row-major xyz
    std::array<double, 3> inv_scale{};     // 1/s in xyz
    std::array<double, 3> shift{};         // c_out + t in xyz (mm)
    std::array<double, 3> c_in{};          // input grid center in xyz (mm)
    Spacing3 in_sp{};                      // (d, h, w) mm
    Spacing3 out_sp{};

    void map(int d, int h, int w, double& vd, double& vh, double& vw) const {
        const double qx = (w + 0.5) * out_sp[2] - shift[0];
        const double qy = (h + 0.5) * out_sp[1] - shift[1];
        const double qz = (d + 0.5) * out_sp[0] - shift[2];
        const double xx = inv_scale[0] * (rt[0] * qx + rt[1] * qy + rt[2] * qz) + c_in[0];
        const double xy = inv_scale[1] * (rt[3] * qx + rt[4] * qy + rt[5] * qz) + c_in[1];
        const double xz = inv_scale[2] * (rt[6] * qx + rt[7] * qy + rt[8] * qz) + c_in[2];
        vw = xx / in_sp[2] - 0.5;
        vh = xy / in_sp[1] - 0.5;
        vd = xz / in_sp[0] - 0.5;
    }
};

inline PullBack make_pullback(const SimilarityTransform& t,
                              const Shape3& out_shape, const Spacing3& out_sp,
                              const Shape3& in_shape, const Spacing3& in_sp) {
    PullBack pb;
    const auto r = rotation_zyx(t.rotation);
    // transpose
    pb.rt = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
    for (int a = 0; a < 3; ++a) {
        if (!(t.scale[a] > 0.0)) {
            throw ArgumentError("transform scale must be positive");
        }
        pb.inv_scale[a] = 1.0 / t.scale[a];
    }
    const std::array<double, 3> c_out = {out_shape[2] * out_sp[2] / 2.0,
                                         out_shape[1] * out_sp[1] / 2.0,
                                         out_shape[0] * out_sp[0] / 2.0};
    pb.c_in = {in_shape[2] * in_sp[2] / 2.0, in_shape[1] * in_sp[1] / 2.0,
               in_shape[0] * in_sp[0] / 2.0};
    for (int a = 0; a < 3; ++a) {
        pb.shift[a] = c_out[a] + t.translation_mm[a];
    }
    pb.in_sp = in_sp;
    pb.out_sp = out_sp;
    return pb;
}

/// Inside test for trilinear sampling: allow the half-voxel rim, where the
/// clamped interpolant extends the edge value; beyond it is out-of-field.
inline bool inside(double vd, double vh, double vw, const Shape3& shape) {
    return vd >= -0.5 && vd <= shape[0] - 0.5 && vh >= -0.5 &&
           vh <= shape[1] - 0.5 && vw >= -0.5 && vw <= shape[2] - 0.5;
}

} // namespace calvaria::preprocess::detail
