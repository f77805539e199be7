#include "calvaria/preprocess/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "calvaria/core/resample.hpp"
#include "transform_detail.hpp"

namespace calvaria::preprocess {
namespace {

constexpr int kBins = 32;
constexpr float kFgEps = 1e-6f;
constexpr int kEvalBudgetPerLevel = 200;
constexpr int kEvalsPerSearch = 13; // 2 seeds + 11 golden shrink steps

struct Range {
    float lo = 0.0f;
    float hi = 0.0f;
};

Range value_range(const Volume& v) {
    Range r{v.data[0], v.data[0]};
    for (float x : v.data) {
        r.lo = std::min(r.lo, x);
        r.hi = std::max(r.hi, x);
    }
    return r;
}

int bin_of(float v, const Range& r) {
    if (!(r.hi > r.lo)) return 0;
    const int b = static_cast<int>((static_cast<double>(v) - r.lo) /
                                   (static_cast<double>(r.hi) - r.lo) * kBins);
    return std::clamp(b, 0, kBins - 1);
}

double mi_from_hist(const std::array<std::int64_t, kBins * kBins>& hist) {
    std::int64_t total = 0;
    std::array<std::int64_t, kBins> ma{}, mb{};
    for (int i = 0; i < kBins; ++i) {
        for (int j = 0; j < kBins; ++j) {
            const std::int64_t c = hist[i * kBins + j];
            total += c;
            ma[i] += c;
            mb[j] += c;
        }
    }
    if (total == 0) return 0.0;
    const double n = static_cast<double>(total);
    double mi = 0.0;
    for (int i = 0; i < kBins; ++i) {
        if (ma[i] == 0) continue;
        for (int j = 0; j < kBins; ++j) {
            const std::int64_t c = hist[i * kBins + j];
            if (c == 0 || mb[j] == 0) continue;
            const double pij = c / n;
            mi += pij * std::log(pij * n * n /
                                 (static_cast<double>(ma[i]) *
                                  static_cast<double>(mb[j])));
        }
    }
    return mi;
}

/// One pyramid step: box average when all dims are even, resample otherwise.
Volume downsample2(const Volume& v) {
    if (v.shape[0] % 2 == 0 && v.shape[1] % 2 == 0 && v.shape[2] % 2 == 0) {
        const Shape3 os = {v.shape[0] / 2, v.shape[1] / 2, v.shape[2] / 2};
        Volume out(os, {v.spacing_mm[0] * 2, v.spacing_mm[1] * 2,
                        v.spacing_mm[2] * 2},
                   v.modality);
        std::size_t idx = 0;
        for (int d = 0; d < os[0]; ++d) {
            for (int h = 0; h < os[1]; ++h) {
                for (int w = 0; w < os[2]; ++w, ++idx) {
                    double acc = 0.0;
                    for (int dd = 0; dd < 2; ++dd) {
                        for (int dh = 0; dh < 2; ++dh) {
                            for (int dw = 0; dw < 2; ++dw) {
                                acc += v.at(2 * d + dd, 2 * h + dh, 2 * w + dw);
                            }
                        }
                    }
                    out.data[idx] = static_cast<float>(acc / 8.0);
                }
            }
        }
        return out;
    }
    return resample(v, {std::max(kMinAxisDim, (v.shape[0] + 1) / 2),
                        std::max(kMinAxisDim, (v.shape[1] + 1) / 2),
                        std::max(kMinAxisDim, (v.shape[2] + 1) / 2)});
}

bool can_halve(const Volume& v) {
    return std::min({v.shape[0], v.shape[1], v.shape[2]}) >= 2 * kMinAxisDim;
}

using Params = std::array<double, 9>; // t(x,y,z) mm, rot(x,y,z) rad, scale(x,y,z)

SimilarityTransform transform_from(const Params& p, RegMode mode,
                                   RegMetric metric) {
    SimilarityTransform t;
    t.translation_mm = {p[0], p[1], p[2]};
    t.rotation = {p[3], p[4], p[5]};
    t.scale = mode == RegMode::rigid6 ? std::array<double, 3>{1, 1, 1}
                                      : std::array<double, 3>{p[6], p[7], p[8]};
    t.mode = mode;
    t.metric = metric;
    return t;
}

double eval_cost(const Volume& mov, const Volume& fix, const Params& p,
                 RegMode mode, RegMetric metric, const Range& mov_range,
                 const Range& fix_range) {
    const auto t = transform_from(p, mode, metric);
    const auto pb = detail::make_pullback(t, fix.shape, fix.spacing_mm,
                                          mov.shape, mov.spacing_mm);
    if (metric == RegMetric::mse) {
        double acc = 0.0;
        std::size_t idx = 0;
        for (int d = 0; d < fix.shape[0]; ++d) {
            for (int h = 0; h < fix.shape[1]; ++h) {
                for (int w = 0; w < fix.shape[2]; ++w, ++idx) {
                    double vd, vh, vw;
                    pb.map(d, h, w, vd, vh, vw);
                    const float s = detail::inside(vd, vh, vw, mov.shape)
                                        ? sample_trilinear(mov, vd, vh, vw)
                                        : 0.0f;
                    const double diff =
                        static_cast<double>(s) - fix.data[idx];
                    acc += diff * diff;
                }
            }
        }
        return acc / static_cast<double>(fix.size());
    }
    std::array<std::int64_t, kBins * kBins> hist{};
    std::size_t idx = 0;
    for (int d = 0; d < fix.shape[0]; ++d) {
        for (int h = 0; h < fix.shape[1]; ++h) {
            for (int w = 0; w < fix.shape[2]; ++w, ++idx) {
                double vd, vh, vw;
                pb.map(d, h, w, vd, vh, vw);
                const float s = detail::inside(vd, vh, vw, mov.shape)
                                    ? sample_trilinear(mov, vd, vh, vw)
                                    : 0.0f;
                const float f = fix.data[idx];
                if (f > kFgEps || s > kFgEps) {
                    hist[bin_of(f, fix_range) * kBins + bin_of(s, mov_range)]++;
                }
            }
        }
    }
    return -mi_from_hist(hist);
}

struct LineResult {
    double x = 0.0;
    double f = 0.0;
};

/// Golden-section minimization on [lo, hi] spending exactly n_evals metric
/// evaluations; returns the best probed point (ties resolve low-side).
template <class F>
LineResult golden_min(F&& cost, double lo, double hi, int n_evals) {
    constexpr double kInvPhi = 0.6180339887498949;
    double x1 = hi - kInvPhi * (hi - lo);
    double x2 = lo + kInvPhi * (hi - lo);
    double f1 = cost(x1);
    double f2 = cost(x2);
    for (int k = 0; k < n_evals - 2; ++k) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - kInvPhi * (hi - lo);
            f1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + kInvPhi * (hi - lo);
            f2 = cost(x2);
        }
    }
    return f1 <= f2 ? LineResult{x1, f1} : LineResult{x2, f2};
}

} // namespace

double mse_metric(const Volume& a, const Volume& b) {
    if (a.shape != b.shape) {
        throw ShapeError("mse_metric: shapes differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

double mutual_information(const Volume& a, const Volume& b) {
    if (a.shape != b.shape) {
        throw ShapeError("mutual_information: shapes differ");
    }
    const Range ra = value_range(a), rb = value_range(b);
    std::array<std::int64_t, kBins * kBins> hist{};
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] > kFgEps || b.data[i] > kFgEps) {
            hist[bin_of(a.data[i], ra) * kBins + bin_of(b.data[i], rb)]++;
        }
    }
    return mi_from_hist(hist);
}

SimilarityTransform register_volumes(const Volume& moving, const Volume& fixed,
                                     RegMode mode, RegMetric metric) {
    validate(moving);
    validate(fixed);
    require_finite(moving, "register_volumes(moving)");
    require_finite(fixed, "register_volumes(fixed)");
    if (metric == RegMetric::mse && moving.modality != fixed.modality) {
        throw ArgumentError(
            "register_volumes: mse requires matching modalities; use "
            "mutual_information across modalities");
    }

    std::vector<Volume> mov_pyr{moving}, fix_pyr{fixed};
    for (int k = 1; k < 3; ++k) {
        if (!can_halve(mov_pyr.back()) || !can_halve(fix_pyr.back())) break;
        mov_pyr.push_back(downsample2(mov_pyr.back()));
        fix_pyr.push_back(downsample2(fix_pyr.back()));
    }
    const int levels = static_cast<int>(fix_pyr.size());

    Params p = {0, 0, 0, 0, 0, 0, 1, 1, 1};
    const int n_active = mode == RegMode::rigid6 ? 6 : 9;
    bool improved_coarsest = false;

    for (int level = levels - 1; level >= 0; --level) {
        const Volume& mov = mov_pyr[level];
        const Volume& fix = fix_pyr[level];
        const Range mr = value_range(mov), fr = value_range(fix);

        int budget = kEvalBudgetPerLevel;
        const auto cost = [&](const Params& q) {
            --budget;
            return eval_cost(mov, fix, q, mode, metric, mr, fr);
        };

        const double max_sp =
            std::max({fix.spacing_mm[0], fix.spacing_mm[1], fix.spacing_mm[2]});
        double rad_t = 6.0 * max_sp;
        double rad_r = 0.075 * static_cast<double>(1 << level);
        double rad_s = 0.0375 * static_cast<double>(1 << level);

        double best = cost(p);
        bool improved_level = false;
        while (budget >= kEvalsPerSearch) {
            bool cycle_improved = false;
            for (int i = 0; i < n_active && budget >= kEvalsPerSearch; ++i) {
                const double radius = i < 3 ? rad_t : i < 6 ? rad_r : rad_s;
                double lo = p[i] - radius;
                double hi = p[i] + radius;
                if (i >= 6) lo = std::max(lo, 0.05);
                Params q = p;
                const auto line = golden_min(
                    [&](double x) {
                        q[i] = x;
                        return cost(q);
                    },
                    lo, hi, kEvalsPerSearch);
                if (line.f < best) {
                    p[i] = line.x;
                    best = line.f;
                    cycle_improved = true;
                    improved_level = true;
                }
            }
            if (!cycle_improved) {
                rad_t *= 0.5;
                rad_r *= 0.5;
                rad_s *= 0.5;
                if (rad_t < 0.01 && rad_r < 1e-4 && rad_s < 1e-4) break;
            }
        }
        if (level == levels - 1) improved_coarsest = improved_level;
    }

    SimilarityTransform result = transform_from(p, mode, metric);
    result.converged = improved_coarsest;
    return result;
}

} // namespace calvaria::preprocess
