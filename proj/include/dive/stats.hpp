#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "dive/errors.hpp"

namespace dive {

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-15;
    constexpr int max_iters = 500;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iters; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) return h;
    }
    throw NonFinite("regularized_incomplete_beta: continued fraction did not converge");
}

}  // namespace detail

// I_x(a, b), accurate to ~1e-10 over the t-test range.
inline double regularized_incomplete_beta(double x, double a, double b) {
    if (!(a > 0.0 && b > 0.0)) throw SpecInvalid("regularized_incomplete_beta: a, b must be positive");
    if (!(x >= 0.0 && x <= 1.0)) throw SpecInvalid("regularized_incomplete_beta: x outside [0, 1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

inline double student_t_cdf(double t, double df) {
    if (!(df > 0.0)) throw SpecInvalid("student_t_cdf: df must be positive");
    if (t == 0.0) return 0.5;
    const double x = df / (df + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5);
    return t > 0.0 ? 1.0 - tail : tail;
}

// Two-sided p-value for a t statistic with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    return regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5);
}

struct TTestResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
    bool degenerate = false;  // constant differences: t/p are meaningless and p is omitted
};

// Two-sided paired t-test on the elementwise differences a_i - b_i.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeMismatch("paired_t_test: lengths differ");
    const std::size_t n = a.size();
    if (n < 2) throw TooFew("paired_t_test: needs at least 2 pairs");

    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        ss += d * d;
    }
    TTestResult result;
    result.df = static_cast<double>(n - 1);
    const double var = ss / result.df;
    if (var <= 0.0) {
        result.degenerate = true;
        return result;
    }
    result.t = mean / std::sqrt(var / static_cast<double>(n));
    result.p = student_t_two_sided_p(result.t, result.df);
    return result;
}

}  // namespace dive
