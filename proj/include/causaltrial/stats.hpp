#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace causaltrial {

inline double mean(std::span<const double> xs) {
    detail::require(!xs.empty(), "mean of empty range");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

/// Sample standard deviation (divisor n - 1); 0 for fewer than two values.
inline double sample_sd(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

inline double median(std::vector<double> xs) {
    detail::require(!xs.empty(), "median of empty range");
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Linear-interpolation quantile of already sorted data (R type 7).
inline double quantile_sorted(std::span<const double> sorted, double q) {
    detail::require(!sorted.empty(), "quantile of empty range");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Pearson correlation; 0 when either side is constant.
inline double pearson(std::span<const double> a, std::span<const double> b) {
    detail::require(a.size() == b.size() && a.size() >= 2, "pearson: need two equal-length ranges of size >= 2");
    const double ma = mean(a), mb = mean(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Survival function of chi-square with two degrees of freedom.
inline double chi2_df2_sf(double w) { return w <= 0.0 ? 1.0 : std::exp(-0.5 * w); }

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

enum class CiMethod { percentile, basic, normal };

inline CiMethod parse_ci_method(const std::string& s) {
    if (s == "percentile") return CiMethod::percentile;
    if (s == "basic") return CiMethod::basic;
    if (s == "normal") return CiMethod::normal;
    throw ContractError("unknown CI method '" + s + "'");
}

inline std::string to_string(CiMethod m) {
    switch (m) {
        case CiMethod::percentile: return "percentile";
        case CiMethod::basic: return "basic";
        case CiMethod::normal: return "normal";
    }
    return "percentile";
}

/// 95% interval from bootstrap replicates of a statistic with point estimate `point`.
inline Interval bootstrap_interval(std::vector<double> draws, double point, CiMethod method = CiMethod::percentile) {
    detail::require(!draws.empty(), "bootstrap interval needs at least one draw");
    std::sort(draws.begin(), draws.end());
    const double q_lo = quantile_sorted(draws, 0.025);
    const double q_hi = quantile_sorted(draws, 0.975);
    switch (method) {
        case CiMethod::percentile:
            return {std::min(q_lo, point), std::max(q_hi, point)};
        case CiMethod::basic:
            return {std::min(2 * point - q_hi, point), std::max(2 * point - q_lo, point)};
        case CiMethod::normal: {
            const double se = sample_sd(draws);
            return {point - 1.959963984540054 * se, point + 1.959963984540054 * se};
        }
    }
    return {q_lo, q_hi};
}

}  // namespace causaltrial
