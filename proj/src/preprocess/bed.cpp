#include "calvaria/preprocess/preprocess.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

namespace calvaria::preprocess {
namespace {

constexpr int kOtsuBins = 256;

/// Labels 26-connected components of `mask`, writing 1-based component ids
/// into `comp` (0 for background). Returns the number of components.
int label_components(const Shape3& shape, const std::vector<std::uint8_t>& mask,
                     std::vector<std::int32_t>& comp) {
    comp.assign(mask.size(), 0);
    std::vector<std::size_t> stack;
    const int D = shape[0], H = shape[1], W = shape[2];
    const std::int64_t sd = static_cast<std::int64_t>(H) * W;
    int n_comp = 0;
    for (std::size_t seed = 0; seed < mask.size(); ++seed) {
        if (!mask[seed] || comp[seed] != 0) continue;
        ++n_comp;
        comp[seed] = n_comp;
        stack.assign(1, seed);
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            const int d = static_cast<int>(cur / sd);
            const int h = static_cast<int>(cur % sd) / W;
            const int w = static_cast<int>(cur % W);
            for (int dd = -1; dd <= 1; ++dd) {
                for (int dh = -1; dh <= 1; ++dh) {
                    for (int dw = -1; dw <= 1; ++dw) {
                        const int nd = d + dd, nh = h + dh, nw = w + dw;
                        if ((dd | dh | dw) == 0 || nd < 0 || nd >= D ||
                            nh < 0 || nh >= H || nw < 0 || nw >= W) {
                            continue;
                        }
                        const std::size_t ni =
                            static_cast<std::size_t>(nd) * sd +
                            static_cast<std::size_t>(nh) * W + nw;
                        if (mask[ni] && comp[ni] == 0) {
                            comp[ni] = n_comp;
                            stack.push_back(ni);
                        }
                    }
                }
            }
        }
    }
    return n_comp;
}

} // namespace

float otsu_threshold(const std::vector<float>& values) {
    if (values.empty()) {
        throw ArgumentError("otsu_threshold on an empty sample");
    }
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (float v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) return lo;

    std::array<std::int64_t, kOtsuBins> hist{};
    const double scale = kOtsuBins / (static_cast<double>(hi) - lo);
    for (float v : values) {
        int b = static_cast<int>((static_cast<double>(v) - lo) * scale);
        hist[std::clamp(b, 0, kOtsuBins - 1)]++;
    }

    const double total = static_cast<double>(values.size());
    double sum_all = 0.0;
    for (int b = 0; b < kOtsuBins; ++b) sum_all += b * static_cast<double>(hist[b]);

    double best_sigma = -1.0;
    int best_bin = 0;
    double w0 = 0.0, sum0 = 0.0;
    for (int b = 0; b < kOtsuBins - 1; ++b) {
        w0 += static_cast<double>(hist[b]);
        sum0 += b * static_cast<double>(hist[b]);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double sigma = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (sigma > best_sigma) {
            best_sigma = sigma;
            best_bin = b;
        }
    }
    if (best_sigma < 0.0) return lo; // single occupied bin
    // Threshold at the lower edge of the first class-1 bin so values in that
    // bin count as foreground under v >= t.
    return static_cast<float>(lo + (best_bin + 1) / scale);
}

Volume remove_bed(const Volume& ct) {
    validate(ct);
    require_finite(ct, "remove_bed");

    std::vector<float> nonzero;
    nonzero.reserve(ct.data.size() / 4);
    for (float v : ct.data) {
        if (v != 0.0f) nonzero.push_back(v);
    }
    if (nonzero.empty()) {
        throw EmptyForegroundError("remove_bed: volume has no nonzero voxels");
    }
    const float thr = otsu_threshold(nonzero);

    // Components over all nonzero voxels; the head keeps its sub-threshold
    // soft tissue because it is 26-connected to the bright skull, while a
    // detached bed/table component carries little or no above-threshold mass.
    std::vector<std::uint8_t> mask(ct.data.size());
    for (std::size_t i = 0; i < ct.data.size(); ++i) {
        mask[i] = ct.data[i] != 0.0f;
    }
    std::vector<std::int32_t> comp;
    const int n_comp = label_components(ct.shape, mask, comp);

    std::vector<std::int64_t> strong(static_cast<std::size_t>(n_comp) + 1, 0);
    std::vector<std::int64_t> size(static_cast<std::size_t>(n_comp) + 1, 0);
    for (std::size_t i = 0; i < ct.data.size(); ++i) {
        if (comp[i] > 0) {
            size[comp[i]]++;
            if (ct.data[i] >= thr) strong[comp[i]]++;
        }
    }
    int keep = 0;
    for (int c = 1; c <= n_comp; ++c) {
        if (keep == 0 || strong[c] > strong[keep] ||
            (strong[c] == strong[keep] && size[c] > size[keep])) {
            keep = c;
        }
    }
    if (keep == 0 || strong[keep] == 0) {
        throw EmptyForegroundError("remove_bed: no voxel above Otsu threshold");
    }

    Volume out = ct;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (comp[i] != keep) out.data[i] = 0.0f;
    }
    return out;
}

} // namespace calvaria::preprocess
