#include "calvaria/metrics/metrics.hpp"

#include <Eigen/Dense>

namespace calvaria::metrics {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void fit_gaussian(const std::vector<std::vector<float>>& feats, VectorXd& mu, MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(feats.size());
    const auto dim = static_cast<Eigen::Index>(feats[0].size());
    MatrixXd x(n, dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(feats[static_cast<std::size_t>(i)].size()) != dim) {
            throw ArgumentError("fid: feature vectors have mixed dimensions");
        }
        for (Eigen::Index j = 0; j < dim; ++j) {
            x(i, j) = feats[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    mu = x.colwise().mean();
    const MatrixXd centered = x.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(n - 1);
}

// Positive-semidefinite square root via eigendecomposition; negative
// eigenvalues from round-off are clamped to zero.
MatrixXd psd_sqrt(const MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es((m + m.transpose()) * 0.5);
    VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

} // namespace

double fid(const std::vector<std::vector<float>>& features_a,
           const std::vector<std::vector<float>>& features_b) {
    if (features_a.size() < 2 || features_b.size() < 2) {
        throw ArgumentError("fid: each feature set needs at least 2 vectors");
    }
    if (features_a[0].size() != features_b[0].size() || features_a[0].empty()) {
        throw ArgumentError("fid: feature dimension mismatch");
    }
    VectorXd mu_a, mu_b;
    MatrixXd cov_a, cov_b;
    fit_gaussian(features_a, mu_a, cov_a);
    fit_gaussian(features_b, mu_b, cov_b);

    const MatrixXd root_a = psd_sqrt(cov_a);
    const MatrixXd inner = root_a * cov_b * root_a;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es((inner + inner.transpose()) * 0.5);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double d2 = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    // round-off floor: the analytic value is >= 0
    return d2 < 0.0 && d2 > -1e-6 ? 0.0 : d2;
}

} // namespace calvaria::metrics
