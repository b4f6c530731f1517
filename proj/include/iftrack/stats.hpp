#pragma once

// Two-sample tests: Welch's t-test and the Mann-Whitney U test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace iftrack::stats {

// Regularized incomplete beta I_x(a, b) by the modified Lentz continued fraction.
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw Error("incomplete_beta: shape parameters must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;

    auto continued_fraction = [](double a, double b, double x) {
        constexpr double tiny = 1e-300;
        constexpr double eps = 1e-16;
        const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
        double c = 1.0;
        double d = 1.0 - qab * x / qap;
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        double h = d;
        for (int m = 1; m <= 10000; ++m) {
            const double m2 = 2.0 * m;
            double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            h *= d * c;
            aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            double del = d * c;
            h *= del;
            if (std::abs(del - 1.0) < eps) return h;
        }
        throw Error("incomplete_beta: continued fraction did not converge");
    };

    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * continued_fraction(a, b, x) / a;
    return 1.0 - std::exp(log_front) * continued_fraction(b, a, 1.0 - x) / b;
}

// Two-sided tail probability P(|T| >= |t|) for Student's t with nu degrees of freedom.
inline double student_t_two_sided(double t, double nu) {
    if (!(nu > 0.0)) throw Error("student_t_two_sided: degrees of freedom must be positive");
    if (std::isinf(t)) return 0.0;
    if (t == 0.0) return 1.0;
    return std::clamp(incomplete_beta(0.5 * nu, 0.5, nu / (nu + t * t)), 0.0, 1.0);
}

struct TestResult {
    std::string test;
    double statistic = 0.0;
    double df = 0.0;
    double p = 1.0;
};

inline double mean(std::span<const double> x) {
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double sample_variance(std::span<const double> x) {
    double m = mean(x);
    double acc = 0.0;
    for (double v : x) acc += (v - m) * (v - m);
    return acc / static_cast<double>(x.size() - 1);
}

// Welch's unequal-variance t-test. When both variances vanish the test
// degenerates: equal means give t = 0, p = 1; different means give |t| = inf, p = 0.
inline TestResult welch_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw Error("welch_test: each sample needs at least 2 values");
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double ma = mean(a), mb = mean(b);
    const double va = sample_variance(a), vb = sample_variance(b);
    const double sa = va / na, sb = vb / nb;
    const double se2 = sa + sb;
    TestResult r{"welch", 0.0, na + nb - 2.0, 1.0};
    if (se2 == 0.0) {
        if (ma == mb) return r;
        r.statistic = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        return r;
    }
    r.statistic = (ma - mb) / std::sqrt(se2);
    r.df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p = student_t_two_sided(r.statistic, r.df);
    return r;
}

// Mann-Whitney U with the tie-corrected normal approximation and continuity
// correction. The statistic is U of the first sample.
inline TestResult mann_whitney_test(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw Error("mann_whitney_test: samples must be non-empty");
    const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
    std::vector<std::pair<double, int>> all;
    all.reserve(n);
    for (double v : a) all.emplace_back(v, 0);
    for (double v : b) all.emplace_back(v, 1);
    std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    double rank_sum_a = 0.0;
    double tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && all[j].first == all[i].first) ++j;
        double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (all[k].second == 0) rank_sum_a += avg_rank;
        double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    const double dn1 = static_cast<double>(n1), dn2 = static_cast<double>(n2), dn = static_cast<double>(n);
    const double u1 = rank_sum_a - dn1 * (dn1 + 1.0) / 2.0;
    const double mu = dn1 * dn2 / 2.0;
    const double var = dn1 * dn2 / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
    TestResult r{"mann_whitney", u1, 0.0, 1.0};
    if (!(var > 0.0)) return r;
    double diff = std::abs(u1 - mu) - 0.5;
    double z = std::max(diff, 0.0) / std::sqrt(var);
    r.p = std::clamp(std::erfc(z / std::sqrt(2.0)), 0.0, 1.0);
    return r;
}

}  // namespace iftrack::stats
