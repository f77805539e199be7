#include <cmath>

#include "calvaria/stats/stats.hpp"

namespace calvaria::stats {
namespace {

// Regularized incomplete beta I_x(a,b) via the continued fraction of
// Numerical Recipes (modified Lentz), with the symmetry switch at the
// convergence boundary.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * betacf(a, b, x) / a;
    }
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

} // namespace

double student_t_cdf(double t, int nu) {
    if (nu < 1) {
        throw ArgumentError("student_t_cdf: degrees of freedom must be >= 1");
    }
    const double x = static_cast<double>(nu) / (nu + t * t);
    const double tail = 0.5 * reg_inc_beta(static_cast<double>(nu) / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

TestResult tost_equivalence(const PairedSample& s, double bound) {
    if (!(bound > 0.0)) {
        throw ArgumentError("tost: equivalence bound must be positive");
    }
    if (s.values_a.size() != s.values_b.size() || s.values_a.size() < 5) {
        throw ArgumentError("tost: need equal-length lists of at least 5 pairs");
    }
    const int n = static_cast<int>(s.values_a.size());
    std::vector<double> diffs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double a = s.values_a[static_cast<std::size_t>(i)];
        const double b = s.values_b[static_cast<std::size_t>(i)];
        if (!std::isfinite(a) || !std::isfinite(b)) {
            throw ArgumentError("tost: non-finite value");
        }
        diffs[static_cast<std::size_t>(i)] = a - b;
    }
    double mean = 0;
    for (double d : diffs) mean += d;
    mean /= n;
    double ss = 0;
    for (double d : diffs) ss += (d - mean) * (d - mean);
    const double sd = std::sqrt(ss / (n - 1));

    TestResult r;
    r.n_effective = n;
    r.method = Method::exact;

    if (sd == 0.0) {
        // degenerate convention: no sampling variability, decide by the mean
        const bool equivalent = std::abs(mean) < bound;
        r.statistic = 0.0;
        r.p_value = equivalent ? 0.0 : 1.0;
        r.decision = equivalent ? Decision::reject : Decision::fail_to_reject;
        return r;
    }

    const double se = sd / std::sqrt(static_cast<double>(n));
    const double t1 = (mean + bound) / se; // H1: mean > -bound
    const double t2 = (mean - bound) / se; // H1: mean < +bound
    const double p1 = 1.0 - student_t_cdf(t1, n - 1);
    const double p2 = student_t_cdf(t2, n - 1);
    if (p1 >= p2) {
        r.statistic = t1;
        r.p_value = p1;
    } else {
        r.statistic = t2;
        r.p_value = p2;
    }
    r.decision = r.p_value < kAlpha ? Decision::reject : Decision::fail_to_reject;
    return r;
}

PanelReport run_region_panel(const MetricTable& table,
                             const std::map<std::string, double>& bounds) {
    for (const auto& [region, metrics] : table) {
        for (const auto& [metric, sample] : metrics) {
            if (!bounds.count(metric)) {
                throw ConfigError("no equivalence bound configured for metric '" + metric +
                                  "' (region '" + region + "')");
            }
        }
    }
    PanelReport report;
    for (const auto& [region, metrics] : table) {
        for (const auto& [metric, sample] : metrics) {
            PanelCell cell;
            cell.region = region;
            cell.metric = metric;
            cell.bound = bounds.at(metric);
            try {
                cell.wilcoxon = wilcoxon_signed_rank(sample);
            } catch (const Error& e) {
                cell.wilcoxon_error = e.what();
            }
            try {
                cell.tost = tost_equivalence(sample, cell.bound);
            } catch (const Error& e) {
                cell.tost_error = e.what();
            }
            if (cell.wilcoxon && cell.wilcoxon->decision == Decision::reject) {
                report.significant_regions[metric].push_back(region);
            }
            if (cell.tost && cell.tost->decision == Decision::reject) {
                report.equivalent_regions[metric].push_back(region);
            }
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

} // namespace calvaria::stats
