#pragma once

#include <span>
#include <vector>

#include "sdar/matrix.hpp"

namespace sdar {

/// Pearson correlation of two equal-length series. Returns 0 when either
/// series has zero variance (no association can be measured).
double pearson(std::span<const double> a, std::span<const double> b);

/// Spearman rank correlation: Pearson on ranks, ties given their average rank.
double spearman(std::span<const double> a, std::span<const double> b);

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations:
/// a = vectors * diag(values) * vectors^T with orthonormal columns.
struct SymEigen {
    std::vector<double> values;
    Matrix vectors;  // eigenvector j is column j
};
SymEigen sym_eigen(const Matrix& a);

/// Symmetric positive semidefinite square root; eigenvalues are clamped at
/// zero so roundoff-negative modes cannot poison the result.
Matrix sym_sqrt(const Matrix& a);

/// Mean vector and unbiased covariance of the rows of a sample matrix.
struct GaussianFit {
    std::vector<double> mean;
    Matrix cov;
};
GaussianFit fit_gaussian(const Matrix& rows);

/// Squared Frechet distance between two Gaussians:
/// |m1 - m2|^2 + tr(C1 + C2 - 2 (C1^{1/2} C2 C1^{1/2})^{1/2}).
double gaussian_frechet(const GaussianFit& a, const GaussianFit& b);

/// gaussian_frechet over Gaussian fits of two row-sample matrices. A crude
/// distributional distance for desk-scale evaluation; not comparable to
/// feature-space variants of the same formula.
double toy_fid(const Matrix& a, const Matrix& b);

}  // namespace sdar
