#include "calvaria/preprocess/preprocess.hpp"

#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace calvaria::preprocess {
namespace {

/// Exponent triples (a, b, c) with a + b + c <= order, in a fixed order.
std::vector<std::array<int, 3>> monomials(int order) {
    std::vector<std::array<int, 3>> terms;
    for (int a = 0; a <= order; ++a) {
        for (int b = 0; b + a <= order; ++b) {
            for (int c = 0; c + b + a <= order; ++c) {
                terms.push_back({a, b, c});
            }
        }
    }
    return terms;
}

} // namespace

Volume correct_bias(const Volume& mri, int order) {
    validate(mri);
    require_finite(mri, "correct_bias");
    if (order < 0 || order > 6) {
        throw ArgumentError("correct_bias: order must be in [0, 6]");
    }
    for (float v : mri.data) {
        if (v < 0.0f) {
            throw DomainError("correct_bias: non-positive foreground intensity");
        }
    }

    // The field is estimated from the dominant bright tissue class, isolated
    // by two Otsu splits (nonzero -> tissue, tissue -> brightest class).
    // Within one class, log-intensity varies only by bias and noise; mixing
    // classes would hand the polynomial a log-contrast an order of magnitude
    // larger than the bias and drag it toward anatomy.
    std::vector<float> nonzero;
    nonzero.reserve(mri.data.size() / 4);
    for (float v : mri.data) {
        if (v != 0.0f) nonzero.push_back(v);
    }
    if (nonzero.empty()) {
        throw EmptyForegroundError("correct_bias: no foreground voxels");
    }
    const float thr1 = otsu_threshold(nonzero);
    std::vector<float> bright;
    bright.reserve(nonzero.size());
    for (float v : nonzero) {
        if (v >= thr1) bright.push_back(v);
    }
    float fit_thr = otsu_threshold(bright);
    // Keep enough samples to condition the fit; fall back to the first split
    // when the brightest class is tiny.
    std::int64_t n_top = 0;
    for (float v : bright) {
        if (v >= fit_thr) ++n_top;
    }
    const auto min_samples =
        static_cast<std::int64_t>(10 * monomials(order).size());
    if (n_top < min_samples) fit_thr = thr1;

    const auto terms = monomials(order);
    const int nt = static_cast<int>(terms.size());
    Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(nt, nt);
    Eigen::VectorXd atb = Eigen::VectorXd::Zero(nt);
    Eigen::VectorXd basis(nt);

    const auto fill_basis = [&](int d, int h, int w) {
        // Coordinates normalized to [-1, 1] keep the normal equations
        // well-conditioned at any grid size.
        const double u = 2.0 * (d + 0.5) / mri.shape[0] - 1.0;
        const double v = 2.0 * (h + 0.5) / mri.shape[1] - 1.0;
        const double s = 2.0 * (w + 0.5) / mri.shape[2] - 1.0;
        double pu[7], pv[7], ps[7];
        pu[0] = pv[0] = ps[0] = 1.0;
        for (int k = 1; k <= order; ++k) {
            pu[k] = pu[k - 1] * u;
            pv[k] = pv[k - 1] * v;
            ps[k] = ps[k - 1] * s;
        }
        for (int t = 0; t < nt; ++t) {
            basis(t) = pu[terms[t][0]] * pv[terms[t][1]] * ps[terms[t][2]];
        }
    };

    std::int64_t n_fit = 0;
    std::size_t idx = 0;
    for (int d = 0; d < mri.shape[0]; ++d) {
        for (int h = 0; h < mri.shape[1]; ++h) {
            for (int w = 0; w < mri.shape[2]; ++w, ++idx) {
                const float val = mri.data[idx];
                if (val < fit_thr) continue;
                ++n_fit;
                fill_basis(d, h, w);
                const double logv = std::log(static_cast<double>(val));
                ata.selfadjointView<Eigen::Lower>().rankUpdate(basis, 1.0);
                atb.noalias() += basis * logv;
            }
        }
    }
    if (n_fit == 0) {
        throw EmptyForegroundError(
            "correct_bias: no foreground voxels above threshold");
    }
    ata = ata.selfadjointView<Eigen::Lower>();
    const Eigen::VectorXd coeff = ata.ldlt().solve(atb);

    // Evaluate the field over all nonzero voxels, normalized to unit mean
    // over the fit foreground.
    std::vector<double> field(mri.data.size(), 0.0);
    double field_sum = 0.0;
    idx = 0;
    for (int d = 0; d < mri.shape[0]; ++d) {
        for (int h = 0; h < mri.shape[1]; ++h) {
            for (int w = 0; w < mri.shape[2]; ++w, ++idx) {
                if (mri.data[idx] == 0.0f) continue;
                fill_basis(d, h, w);
                const double f = std::exp(basis.dot(coeff));
                field[idx] = f;
                if (mri.data[idx] >= fit_thr) field_sum += f;
            }
        }
    }
    const double mean_field = field_sum / static_cast<double>(n_fit);

    Volume out = mri;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (field[i] != 0.0) {
            out.data[i] = static_cast<float>(
                static_cast<double>(mri.data[i]) * mean_field / field[i]);
        }
    }
    return out;
}

} // namespace calvaria::preprocess
