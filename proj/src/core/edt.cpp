#include "calvaria/core/edt.hpp"

#include <limits>
#include <vector>

namespace calvaria {
namespace {

// Felzenszwalb & Huttenlocher lower-envelope distance transform of a sampled
// function f along one axis, with sample pitch `step` (mm). Exact for squared
// Euclidean distance; anisotropy is handled by running the 1-d pass per axis
// with that axis's spacing.
void dt_1d(const double* f, double* out, int n, double step) {
    thread_local std::vector<int> v;
    thread_local std::vector<double> z;
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    const double s2 = step * step;
    int k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (int q = 1; q < n; ++q) {
        if (f[q] >= kEdtInf) {
            continue; // parabola at +inf never forms the envelope
        }
        double s;
        while (true) {
            const int p = v[k];
            if (f[p] >= kEdtInf) {
                // degenerate predecessor: this parabola wins everywhere left
                --k;
                if (k < 0) break;
                continue;
            }
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
            if (s > z[k]) break;
            --k;
            if (k < 0) break;
        }
        ++k;
        v[k] = q;
        z[k] = (k == 0) ? -kEdtInf : s;
        z[k + 1] = kEdtInf;
    }
    if (f[v[0]] >= kEdtInf) {
        // no finite parabola along this line
        for (int q = 0; q < n; ++q) out[q] = kEdtInf;
        return;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const int p = v[k];
        const double dq = s2 * (q - p) * (q - p);
        out[q] = (f[p] >= kEdtInf) ? kEdtInf : f[p] + dq;
    }
}

} // namespace

std::vector<double> squared_edt(const std::vector<std::uint8_t>& mask, const Shape3& shape,
                                const Spacing3& spacing_mm) {
    validate_grid(shape, spacing_mm);
    const auto [D, H, W] = shape;
    const auto n = static_cast<std::size_t>(voxel_count(shape));
    if (mask.size() != n) {
        throw ShapeError("squared_edt: mask size does not match shape");
    }
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = mask[i] ? 0.0 : kEdtInf;
    }
    std::vector<double> line(static_cast<std::size_t>(std::max({D, H, W})));
    std::vector<double> lout(line.size());

    // pass 1: along W (stride 1)
    for (int d = 0; d < D; ++d) {
        for (int h = 0; h < H; ++h) {
            double* row = g.data() + (static_cast<std::size_t>(d) * H + h) * W;
            dt_1d(row, lout.data(), W, spacing_mm[2]);
            std::copy(lout.begin(), lout.begin() + W, row);
        }
    }
    // pass 2: along H (stride W)
    for (int d = 0; d < D; ++d) {
        for (int w = 0; w < W; ++w) {
            double* col0 = g.data() + static_cast<std::size_t>(d) * H * W + w;
            for (int h = 0; h < H; ++h) line[static_cast<std::size_t>(h)] = col0[static_cast<std::size_t>(h) * W];
            dt_1d(line.data(), lout.data(), H, spacing_mm[1]);
            for (int h = 0; h < H; ++h) col0[static_cast<std::size_t>(h) * W] = lout[static_cast<std::size_t>(h)];
        }
    }
    // pass 3: along D (stride H*W)
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
            double* col0 = g.data() + static_cast<std::size_t>(h) * W + w;
            for (int d = 0; d < D; ++d) line[static_cast<std::size_t>(d)] = col0[static_cast<std::size_t>(d) * hw];
            dt_1d(line.data(), lout.data(), D, spacing_mm[0]);
            for (int d = 0; d < D; ++d) col0[static_cast<std::size_t>(d) * hw] = lout[static_cast<std::size_t>(d)];
        }
    }
    return g;
}

} // namespace calvaria
