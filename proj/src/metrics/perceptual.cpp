#include <cmath>
#include <cstddef>
#include <vector>

#include "calvaria/core/errors.hpp"
#include "calvaria/metrics/metrics.hpp"
#include "calvaria/models/models.hpp"

namespace calvaria::metrics {

namespace {

// One process-wide canonical stack: construction draws ~60k He samples, and
// every metric call must use the same weights anyway.
const models::FrozenFeatures& canonical_stack() {
    static const models::FrozenFeatures stack;
    return stack;
}

constexpr double kNormEps = 1e-10;

} // namespace

double perceptual_distance(const Volume& a, const Volume& b) {
    if (a.shape != b.shape) {
        throw ShapeError("perceptual_distance: volume shapes differ");
    }
    const models::FrozenFeatures& stack = canonical_stack();
    const std::vector<models::Tensor4> fa = stack.features(a);
    const std::vector<models::Tensor4> fb = stack.features(b);

    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const models::Tensor4& ta = fa[l];
        const models::Tensor4& tb = fb[l];
        const std::int64_t n = ta.voxels();
        const int c = ta.c;
        double layer_acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            double na = 0.0, nb = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const double va = ta.data[static_cast<std::size_t>(ch) * n + i];
                const double vb = tb.data[static_cast<std::size_t>(ch) * n + i];
                na += va * va;
                nb += vb * vb;
            }
            const double inv_na = 1.0 / std::sqrt(na + kNormEps);
            const double inv_nb = 1.0 / std::sqrt(nb + kNormEps);
            for (int ch = 0; ch < c; ++ch) {
                const double va = ta.data[static_cast<std::size_t>(ch) * n + i] * inv_na;
                const double vb = tb.data[static_cast<std::size_t>(ch) * n + i] * inv_nb;
                const double d = va - vb;
                layer_acc += d * d;
            }
        }
        total += layer_acc / static_cast<double>(n);
    }
    return total / static_cast<double>(fa.size());
}

std::vector<std::vector<float>> fid_descriptors(const Volume& v, int patch, int stride) {
    if (stride <= 0) {
        throw ArgumentError("fid_descriptors: stride must be positive");
    }
    if (patch < 16) {
        throw ArgumentError("fid_descriptors: patch must be at least 16");
    }
    for (int ax = 0; ax < 3; ++ax) {
        if (v.shape[ax] < patch) {
            throw ArgumentError("fid_descriptors: volume smaller than the patch size");
        }
    }
    // Patch anchor positions per axis: stride steps plus a boundary-clamped
    // final patch so the whole volume is covered.
    const auto anchors = [&](int extent) {
        std::vector<int> out;
        for (int p = 0; p + patch < extent; p += stride) {
            out.push_back(p);
        }
        out.push_back(extent - patch);
        return out;
    };
    const std::vector<int> zs = anchors(v.shape[0]);
    const std::vector<int> ys = anchors(v.shape[1]);
    const std::vector<int> xs = anchors(v.shape[2]);

    const models::FrozenFeatures& stack = canonical_stack();
    std::vector<std::vector<float>> out;
    out.reserve(zs.size() * ys.size() * xs.size());
    models::Tensor4 cube(1, patch, patch, patch);
    for (const int z0 : zs) {
        for (const int y0 : ys) {
            for (const int x0 : xs) {
                for (int d = 0; d < patch; ++d) {
                    for (int h = 0; h < patch; ++h) {
                        const std::size_t src =
                            (static_cast<std::size_t>(z0 + d) * v.shape[1] + (y0 + h)) *
                                v.shape[2] +
                            x0;
                        const std::size_t dst =
                            (static_cast<std::size_t>(d) * patch + h) * patch;
                        for (int w = 0; w < patch; ++w) {
                            cube.data[dst + w] = v.data[src + w];
                        }
                    }
                }
                out.push_back(stack.descriptor(cube));
            }
        }
    }
    return out;
}

} // namespace calvaria::metrics
