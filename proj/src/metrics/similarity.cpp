#include "calvaria/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace calvaria::metrics {
namespace {

constexpr int kWin = 7;
constexpr int kHalf = kWin / 2;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::array<double, kWin>& window_taps() {
    static const std::array<double, kWin> taps = [] {
        std::array<double, kWin> t{};
        double sum = 0;
        for (int i = 0; i < kWin; ++i) {
            const double x = i - kHalf;
            t[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
            sum += t[i];
        }
        for (auto& v : t) v /= sum;
        return t;
    }();
    return taps;
}

// Valid-support separable convolution along one axis: the output extent on
// that axis shrinks by kWin-1.
std::vector<double> blur_axis(const std::vector<double>& in, Shape3& shape, int axis) {
    const auto& taps = window_taps();
    Shape3 out_shape = shape;
    out_shape[axis] -= kWin - 1;
    std::vector<double> out(static_cast<std::size_t>(voxel_count(out_shape)));
    const int OD = out_shape[0], OH = out_shape[1], OW = out_shape[2];
    const std::size_t in_hw = static_cast<std::size_t>(shape[1]) * shape[2];
    const std::size_t stride = axis == 0 ? in_hw : axis == 1 ? static_cast<std::size_t>(shape[2]) : 1;
    std::size_t o = 0;
    for (int d = 0; d < OD; ++d)
        for (int h = 0; h < OH; ++h)
            for (int w = 0; w < OW; ++w, ++o) {
                const std::size_t base =
                    (static_cast<std::size_t>(d) * shape[1] + h) * shape[2] + w;
                double acc = 0;
                for (int k = 0; k < kWin; ++k) {
                    acc += taps[k] * in[base + stride * k];
                }
                out[o] = acc;
            }
    shape = out_shape;
    return out;
}

std::vector<double> blur_valid(std::vector<double> field, Shape3 shape) {
    for (int axis = 0; axis < 3; ++axis) {
        field = blur_axis(field, shape, axis);
    }
    return field;
}

} // namespace

double ssim(const Volume& a, const Volume& b) {
    if (a.shape != b.shape) {
        throw ShapeError("ssim: volumes have different shapes");
    }
    validate(a);
    validate(b);
    for (int ax = 0; ax < 3; ++ax) {
        if (a.shape[ax] < kWin) {
            throw ArgumentError("ssim: every axis must be >= 7 for the 7^3 window");
        }
    }
    const auto n = a.data.size();
    std::vector<double> fa(n), fb(n), faa(n), fbb(n), fab(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.data[i], y = b.data[i];
        fa[i] = x;
        fb[i] = y;
        faa[i] = x * x;
        fbb[i] = y * y;
        fab[i] = x * y;
    }
    const auto mu_a = blur_valid(std::move(fa), a.shape);
    const auto mu_b = blur_valid(std::move(fb), a.shape);
    const auto m_aa = blur_valid(std::move(faa), a.shape);
    const auto m_bb = blur_valid(std::move(fbb), a.shape);
    const auto m_ab = blur_valid(std::move(fab), a.shape);

    double total = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = m_aa[i] - ma * ma;
        const double vb = m_bb[i] - mb * mb;
        const double cov = m_ab[i] - ma * mb;
        total += ((2 * ma * mb + kC1) * (2 * cov + kC2)) /
                 ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
    }
    return total / static_cast<double>(mu_a.size());
}

PsnrMae psnr_mae(const Volume& a, const Volume& b) {
    if (a.shape != b.shape) {
        throw ShapeError("psnr_mae: volumes have different shapes");
    }
    double se = 0, ae = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        se += d * d;
        ae += std::abs(d);
    }
    const double n = static_cast<double>(a.data.size());
    const double mse = se / n;
    PsnrMae r;
    r.mae = ae / n;
    r.psnr_db = mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
    return r;
}

double percentile(std::vector<double> values, double p) {
    if (values.empty()) {
        throw ArgumentError("percentile of an empty sample");
    }
    if (p < 0.0 || p > 100.0) {
        throw ArgumentError("percentile rank must be in [0, 100]");
    }
    std::sort(values.begin(), values.end());
    const double rank = (p / 100.0) * (static_cast<double>(values.size()) - 1);
    const auto lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) {
        return values.back();
    }
    const double frac = rank - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

MeanSd mean_sd(const std::vector<double>& values) {
    if (values.empty()) {
        throw ArgumentError("mean_sd of an empty sample");
    }
    double sum = 0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) {
        return {mean, 0.0};
    }
    double ss = 0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (static_cast<double>(values.size()) - 1))};
}

} // namespace calvaria::metrics
