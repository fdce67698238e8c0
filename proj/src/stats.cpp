#include "sdar/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sdar/matrix.hpp"

namespace sdar {

double pearson(std::span<const double> a, std::span<const double> b) {
    SDAR_CHECK(a.size() == b.size() && a.size() >= 2, "pearson: need two equal-length series");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<size_t> order(x.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return x[i] < x[j]; });
    std::vector<double> ranks(x.size());
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double shared = 0.5 * static_cast<double>(i + j);  // mean of ranks i..j
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    SDAR_CHECK(a.size() == b.size() && a.size() >= 2, "spearman: need two equal-length series");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return pearson(ra, rb);
}

SymEigen sym_eigen(const Matrix& a) {
    SDAR_CHECK(a.rows == a.cols && a.rows > 0, "sym_eigen: need a square matrix");
    const int n = a.rows;
    double scale = 0.0;
    for (double v : a.data) scale = std::max(scale, std::abs(v));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            SDAR_CHECK(std::abs(a.at(i, j) - a.at(j, i)) <= 1e-9 * std::max(1.0, scale),
                       "sym_eigen: matrix is not symmetric");

    // Work on the symmetrized copy so roundoff asymmetry cannot accumulate.
    Matrix w(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) w.at(i, j) = 0.5 * (a.at(i, j) + a.at(j, i));

    Matrix v(n, n);
    for (int i = 0; i < n; ++i) v.at(i, i) = 1.0;

    // Cyclic Jacobi: rotate away each off-diagonal entry in sweeps until the
    // off-diagonal mass is negligible against the diagonal scale.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += w.at(i, j) * w.at(i, j);
        if (off <= 1e-30 * std::max(1.0, scale * scale)) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = w.at(p, q);
                if (apq == 0.0) continue;
                const double theta = 0.5 * (w.at(q, q) - w.at(p, p)) / apq;
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double wkp = w.at(k, p), wkq = w.at(k, q);
                    w.at(k, p) = c * wkp - s * wkq;
                    w.at(k, q) = s * wkp + c * wkq;
                }
                for (int k = 0; k < n; ++k) {
                    const double wpk = w.at(p, k), wqk = w.at(q, k);
                    w.at(p, k) = c * wpk - s * wqk;
                    w.at(q, k) = s * wpk + c * wqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    SymEigen out;
    out.values.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.values[static_cast<size_t>(i)] = w.at(i, i);
    out.vectors = std::move(v);
    return out;
}

Matrix sym_sqrt(const Matrix& a) {
    const SymEigen eig = sym_eigen(a);
    const int n = a.rows;
    Matrix scaled = eig.vectors;  // column j times sqrt(max(value_j, 0))
    for (int j = 0; j < n; ++j) {
        const double r = std::sqrt(std::max(eig.values[static_cast<size_t>(j)], 0.0));
        for (int i = 0; i < n; ++i) scaled.at(i, j) *= r;
    }
    return matmul(scaled, eig.vectors, false, true);
}

GaussianFit fit_gaussian(const Matrix& rows) {
    SDAR_CHECK(rows.rows >= 2, "fit_gaussian: need at least two samples");
    const int n = rows.rows, d = rows.cols;
    GaussianFit fit;
    fit.mean.assign(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i) axpy(1.0, rows.row(i), fit.mean);
    for (double& v : fit.mean) v /= n;
    Matrix centered = rows;
    for (int i = 0; i < n; ++i) axpy(-1.0, fit.mean, centered.row(i));
    fit.cov = matmul(centered, centered, true, false);
    for (double& v : fit.cov.data) v /= (n - 1);
    return fit;
}

double gaussian_frechet(const GaussianFit& a, const GaussianFit& b) {
    SDAR_CHECK(a.mean.size() == b.mean.size() && a.cov.same_shape(b.cov),
               "gaussian_frechet: dimension mismatch");
    const Matrix ra = sym_sqrt(a.cov);
    Matrix inner = matmul(matmul(ra, b.cov), ra);
    // The product is symmetric in exact arithmetic; pin it before the root.
    for (int i = 0; i < inner.rows; ++i)
        for (int j = i + 1; j < inner.cols; ++j) {
            const double m = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.at(i, j) = m;
            inner.at(j, i) = m;
        }
    const Matrix cross = sym_sqrt(inner);
    double d2 = squared_distance(a.mean, b.mean);
    for (int i = 0; i < a.cov.rows; ++i)
        d2 += a.cov.at(i, i) + b.cov.at(i, i) - 2.0 * cross.at(i, i);
    return std::max(d2, 0.0);
}

double toy_fid(const Matrix& a, const Matrix& b) {
    SDAR_CHECK(a.cols == b.cols, "toy_fid: dimension mismatch");
    return gaussian_frechet(fit_gaussian(a), fit_gaussian(b));
}

}  // namespace sdar
