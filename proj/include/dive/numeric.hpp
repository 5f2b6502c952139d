#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "dive/errors.hpp"

namespace dive {

using Vec = std::vector<double>;

inline constexpr double kNormEpsilon = 1e-12;

// Row-major dense matrix. Only what the objectives and RSA need.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }
};

inline bool all_finite(const Vec& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeMismatch("dot: lengths differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& v) { return std::sqrt(dot(v, v)); }

inline void axpy(double a, const Vec& x, Vec& y) {
    if (x.size() != y.size()) throw ShapeMismatch("axpy: lengths differ");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline Vec scaled(const Vec& v, double a) {
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = a * v[i];
    return out;
}

inline Vec sub(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeMismatch("sub: lengths differ");
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

// y = M x
inline Vec matvec(const Matrix& m, const Vec& x) {
    if (m.cols != x.size()) throw ShapeMismatch("matvec: dimension mismatch");
    Vec y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double s = 0.0;
        const double* row = &m.data[r * m.cols];
        for (std::size_t c = 0; c < m.cols; ++c) s += row[c] * x[c];
        y[r] = s;
    }
    return y;
}

// y = M^T x
inline Vec matvec_transposed(const Matrix& m, const Vec& x) {
    if (m.rows != x.size()) throw ShapeMismatch("matvec_transposed: dimension mismatch");
    Vec y(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* row = &m.data[r * m.cols];
        for (std::size_t c = 0; c < m.cols; ++c) y[c] += row[c] * x[r];
    }
    return y;
}

inline Vec l2_normalize(const Vec& v) {
    const double n = norm(v);
    if (!(n > kNormEpsilon)) throw ZeroNorm("l2_normalize: vector norm below 1e-12");
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

inline bool is_unit_norm(const Vec& v, double tol = 1e-9) {
    return std::fabs(norm(v) - 1.0) <= tol;
}

inline double cosine_similarity(const Vec& a, const Vec& b) {
    if (!is_unit_norm(a) || !is_unit_norm(b))
        throw NotNormalized("cosine_similarity: inputs must be unit-norm within 1e-9");
    return std::clamp(dot(a, b), -1.0, 1.0);
}

inline double pearson_correlation(const Vec& x, const Vec& y) {
    if (x.size() != y.size()) throw ShapeMismatch("pearson_correlation: lengths differ");
    const std::size_t n = x.size();
    if (n < 2) throw TooFew("pearson_correlation: needs at least 2 points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0)
        throw DegenerateVariance("pearson_correlation: constant input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Central-difference gradient estimate, one coordinate at a time.
inline Vec finite_difference_gradient(const std::function<double(const Vec&)>& f, const Vec& p,
                                      double eps) {
    if (!(eps > 0.0)) throw SpecInvalid("finite_difference_gradient: eps must be positive");
    Vec grad(p.size(), 0.0);
    Vec probe = p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double original = probe[i];
        probe[i] = original + eps;
        const double up = f(probe);
        probe[i] = original - eps;
        const double down = f(probe);
        probe[i] = original;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NonFinite("finite_difference_gradient: objective evaluated to non-finite value");
        grad[i] = (up - down) / (2.0 * eps);
    }
    return grad;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|); the gradient-check metric.
inline double max_relative_error(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw ShapeMismatch("max_relative_error: lengths differ");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({1.0, std::fabs(a[i]), std::fabs(b[i])});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / scale);
    }
    return worst;
}

}  // namespace dive
