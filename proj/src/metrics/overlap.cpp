#include <array>
#include <cmath>

#include "calvaria/core/edt.hpp"
#include "calvaria/metrics/metrics.hpp"

namespace calvaria::metrics {

std::map<int, double> dice_per_label(const LabelMap& pred, const LabelMap& gt) {
    if (pred.shape != gt.shape) {
        throw ShapeError("dice: label maps have different shapes");
    }
    std::array<std::int64_t, LabelMap::kNumCodes> np{}, ng{}, ni{};
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        ++np[pred.data[i]];
        ++ng[gt.data[i]];
        if (pred.data[i] == gt.data[i]) {
            ++ni[pred.data[i]];
        }
    }
    std::map<int, double> out;
    for (int c = 1; c < LabelMap::kNumCodes; ++c) {
        const auto denom = np[c] + ng[c];
        out[c] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(ni[c]) / static_cast<double>(denom);
    }
    return out;
}

std::vector<std::uint8_t> boundary_mask(const LabelMap& m, int label) {
    const auto [D, H, W] = m.shape;
    std::vector<std::uint8_t> out(m.data.size(), 0);
    auto fg = [&](int d, int h, int w) {
        if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) {
            return false; // outside the grid counts as background
        }
        return m.at(d, h, w) == label;
    };
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                if (!fg(d, h, w)) continue;
                const bool interior = fg(d - 1, h, w) && fg(d + 1, h, w) && fg(d, h - 1, w) &&
                                      fg(d, h + 1, w) && fg(d, h, w - 1) && fg(d, h, w + 1);
                if (!interior) {
                    out[m.index(d, h, w)] = 1;
                }
            }
    return out;
}

double hd95(const LabelMap& pred, const LabelMap& gt, int label) {
    if (pred.shape != gt.shape || pred.spacing_mm != gt.spacing_mm) {
        throw ShapeError("hd95: label maps are on different grids");
    }
    if (label < 1 || label >= LabelMap::kNumCodes) {
        throw ArgumentError("hd95: label must be in 1..8");
    }
    const auto bp = boundary_mask(pred, label);
    const auto bg = boundary_mask(gt, label);
    std::int64_t cp = 0, cg = 0;
    for (auto v : bp) cp += v;
    for (auto v : bg) cg += v;
    if (cp == 0 || cg == 0) {
        throw UndefinedDistanceError("hd95: label " + std::to_string(label) +
                                     " is empty in " + (cp == 0 ? "pred" : "gt"));
    }
    const auto dt_to_gt = squared_edt(bg, pred.shape, pred.spacing_mm);
    const auto dt_to_pred = squared_edt(bp, pred.shape, pred.spacing_mm);

    std::vector<double> pooled;
    pooled.reserve(static_cast<std::size_t>(cp + cg));
    for (std::size_t i = 0; i < bp.size(); ++i) {
        if (bp[i]) pooled.push_back(std::sqrt(dt_to_gt[i]));
        if (bg[i]) pooled.push_back(std::sqrt(dt_to_pred[i]));
    }
    return percentile(std::move(pooled), 95.0);
}

} // namespace calvaria::metrics
