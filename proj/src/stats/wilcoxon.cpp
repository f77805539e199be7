#include <algorithm>
#include <cmath>
#include <numeric>

#include "calvaria/stats/stats.hpp"

namespace calvaria::stats {
namespace {

void check_sample(const PairedSample& s) {
    if (s.values_a.size() != s.values_b.size()) {
        throw ArgumentError("paired sample: lists differ in length");
    }
    if (s.values_a.size() < 5) {
        throw ArgumentError("paired sample: need at least 5 pairs");
    }
    for (std::size_t i = 0; i < s.values_a.size(); ++i) {
        if (!std::isfinite(s.values_a[i]) || !std::isfinite(s.values_b[i])) {
            throw ArgumentError("paired sample: non-finite value");
        }
    }
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

} // namespace

TestResult wilcoxon_signed_rank(const PairedSample& s) {
    check_sample(s);
    std::vector<double> diffs;
    for (std::size_t i = 0; i < s.values_a.size(); ++i) {
        const double d = s.values_a[i] - s.values_b[i];
        if (d != 0.0) {
            diffs.push_back(d);
        }
    }
    const int n = static_cast<int>(diffs.size());
    if (n < 5) {
        throw InsufficientDataError("wilcoxon: only " + std::to_string(n) +
                                    " nonzero differences (need 5)");
    }

    // mid-ranks of |d|
    std::vector<int> order(diffs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        return std::abs(diffs[static_cast<std::size_t>(i)]) <
               std::abs(diffs[static_cast<std::size_t>(j)]);
    });
    std::vector<double> rank(diffs.size());
    std::vector<int> tie_sizes;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        const double v = std::abs(diffs[static_cast<std::size_t>(order[i])]);
        while (j < order.size() && std::abs(diffs[static_cast<std::size_t>(order[j])]) == v) {
            ++j;
        }
        const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
            rank[static_cast<std::size_t>(order[k])] = mid;
        }
        tie_sizes.push_back(static_cast<int>(j - i));
        i = j;
    }

    double w_plus = 0, w_minus = 0;
    for (std::size_t i = 0; i < diffs.size(); ++i) {
        (diffs[i] > 0 ? w_plus : w_minus) += rank[i];
    }
    const double w = std::min(w_plus, w_minus);

    TestResult r;
    r.statistic = w;
    r.n_effective = n;

    if (n <= 25) {
        // Exact distribution of W+ over all 2^n sign assignments. Mid-ranks are
        // integer multiples of 1/2, so doubling them makes every achievable
        // rank-sum an integer and the distribution a dense integer DP.
        std::vector<int> r2(diffs.size());
        int total2 = 0;
        for (std::size_t i = 0; i < rank.size(); ++i) {
            r2[i] = static_cast<int>(std::llround(2.0 * rank[i]));
            total2 += r2[i];
        }
        std::vector<std::uint64_t> count(static_cast<std::size_t>(total2) + 1, 0);
        count[0] = 1;
        int reach = 0;
        for (int v : r2) {
            reach += v;
            for (int t = reach; t >= v; --t) {
                count[static_cast<std::size_t>(t)] += count[static_cast<std::size_t>(t - v)];
            }
        }
        const double denom = std::ldexp(1.0, n); // 2^n
        const int w2 = static_cast<int>(std::llround(2.0 * w));
        double below = 0, above = 0;
        for (int t = 0; t <= total2; ++t) {
            if (t <= w2) below += static_cast<double>(count[static_cast<std::size_t>(t)]);
            if (t >= total2 - w2) above += static_cast<double>(count[static_cast<std::size_t>(t)]);
        }
        r.method = Method::exact;
        r.p_value = std::min(1.0, (below + above) / denom);
    } else {
        const double mu = static_cast<double>(n) * (n + 1) / 4.0;
        double sigma2 = static_cast<double>(n) * (n + 1) * (2 * n + 1) / 24.0;
        for (int t : tie_sizes) {
            sigma2 -= (static_cast<double>(t) * t * t - t) / 48.0;
        }
        const double num = std::max(0.0, std::abs(w_plus - mu) - 0.5);
        const double z = num / std::sqrt(sigma2);
        r.method = Method::normal_approx;
        r.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(z)));
    }
    r.decision = r.p_value < kAlpha ? Decision::reject : Decision::fail_to_reject;
    return r;
}

} // namespace calvaria::stats
