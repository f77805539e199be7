#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "calvaria/core/errors.hpp"

namespace calvaria::stats {

constexpr double kAlpha = 0.05;

/// Per-subject metric values under two conditions, paired by index.
struct PairedSample {
    std::vector<double> values_a;
    std::vector<double> values_b;
    std::string label;
};

enum class Method { exact, normal_approx };
enum class Decision { reject, fail_to_reject };

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
    Method method = Method::exact;
    int n_effective = 0;
    Decision decision = Decision::fail_to_reject;
};

/// Two-sided Wilcoxon signed-rank test on the paired differences a - b.
/// Zero differences are dropped; ties get mid-ranks; the statistic is
/// W = min(W+, W-). For n_effective <= 25 the p-value is exact (full
/// distribution of W+ over all sign assignments); above that a normal
/// approximation with tie and continuity corrections is used.
/// Fewer than 5 nonzero differences -> InsufficientDataError.
TestResult wilcoxon_signed_rank(const PairedSample& s);

/// Schuirmann paired-t TOST for equivalence of a and b within +-bound.
/// p = max of the two one-sided p-values; decision `reject` means the
/// non-equivalence null is rejected, i.e. the pair is equivalent.
/// The reported statistic is the t value of the binding (larger-p) side.
/// Zero-variance differences degenerate by convention: equivalent iff
/// |mean difference| < bound, with p reported as 0 or 1 and statistic 0.
TestResult tost_equivalence(const PairedSample& s, double bound);

/// Student-t CDF with nu degrees of freedom (via the regularized
/// incomplete beta function).
double student_t_cdf(double t, int nu);

/// Region -> metric -> paired sample.
using MetricTable = std::map<std::string, std::map<std::string, PairedSample>>;

struct PanelCell {
    std::string region;
    std::string metric;
    std::optional<TestResult> wilcoxon;
    std::string wilcoxon_error; // set when the test could not run
    std::optional<TestResult> tost;
    std::string tost_error;
    double bound = 0.0;
};

struct PanelReport {
    std::vector<PanelCell> cells;
    // regions whose TOST rejected non-equivalence, per metric
    std::map<std::string, std::vector<std::string>> equivalent_regions;
    // regions whose Wilcoxon found a significant paired difference, per metric
    std::map<std::string, std::vector<std::string>> significant_regions;
};

/// Runs Wilcoxon + TOST for every (region, metric) cell. Per-cell failures
/// (e.g. all differences zero) are recorded in the cell, never aborting the
/// panel. A metric present in the table but missing from `bounds` is a
/// ConfigError.
PanelReport run_region_panel(const MetricTable& table,
                             const std::map<std::string, double>& bounds);

} // namespace calvaria::stats
