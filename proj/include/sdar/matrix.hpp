#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdar {

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

#define SDAR_CHECK(cond, msg)                                    \
    do {                                                         \
        if (!(cond)) ::sdar::fail(std::string("check failed: ") + (msg)); \
    } while (0)

/// Dense row-major f64 matrix. The single numeric container of the
/// project; vectors are 1xN or Nx1 matrices.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
        SDAR_CHECK(r >= 0 && c >= 0, "matrix dims must be nonnegative");
    }

    static Matrix from(std::initializer_list<std::initializer_list<double>> src) {
        Matrix m;
        m.rows = static_cast<int>(src.size());
        m.cols = m.rows ? static_cast<int>(src.begin()->size()) : 0;
        m.data.reserve(static_cast<size_t>(m.rows) * m.cols);
        for (const auto& r : src) {
            SDAR_CHECK(static_cast<int>(r.size()) == m.cols, "ragged initializer");
            m.data.insert(m.data.end(), r.begin(), r.end());
        }
        return m;
    }

    static Matrix row_vector(std::span<const double> v) {
        Matrix m(1, static_cast<int>(v.size()));
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    std::span<double> row(int r) { return {row_ptr(r), static_cast<size_t>(cols)}; }
    std::span<const double> row(int r) const { return {row_ptr(r), static_cast<size_t>(cols)}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

// ---------------------------------------------------------------------------
// Plain (non-differentiable) kernels shared by the whole project.
// ---------------------------------------------------------------------------

/// C (+)= op(A) * op(B) with optional transposes; "nn", "nt" and "tn" only.
Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false, bool trans_b = false);
void matmul_into(Matrix& c, const Matrix& a, const Matrix& b, bool trans_a, bool trans_b,
                 bool accumulate);

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// Numerically stable softmax of a logit vector. Rejects non-finite input.
std::vector<double> softmax(std::span<const double> logits);

/// log(sum(exp(x))) over a span, stabilized by the max.
double log_sum_exp(std::span<const double> x);

/// In-place row softmax, returns nothing; used by inference paths.
void softmax_rows_inplace(Matrix& m);

}  // namespace sdar
