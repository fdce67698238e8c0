#include "sdar/matrix.hpp"

#include <algorithm>

namespace sdar {

// ikj kernel for the "nn" case keeps writes streaming over C rows; "nt" is a
// row-dot kernel and "tn" streams over C rows with A read column-wise. All
// three are the shapes the autodiff backward passes need, so "tt" is not
// supported.
void matmul_into(Matrix& c, const Matrix& a, const Matrix& b, bool trans_a, bool trans_b,
                 bool accumulate) {
    SDAR_CHECK(!(trans_a && trans_b), "matmul: tt form not supported");
    const int m = trans_a ? a.cols : a.rows;
    const int k = trans_a ? a.rows : a.cols;
    const int kb = trans_b ? b.cols : b.rows;
    const int n = trans_b ? b.rows : b.cols;
    SDAR_CHECK(k == kb, "matmul: inner dims mismatch");
    if (c.rows != m || c.cols != n) {
        SDAR_CHECK(!accumulate, "matmul: accumulate into mismatched shape");
        c = Matrix(m, n);
    } else if (!accumulate) {
        c.fill(0.0);
    }

    if (!trans_a && !trans_b) {
        for (int i = 0; i < m; ++i) {
            const double* arow = a.row_ptr(i);
            double* crow = c.row_ptr(i);
            for (int p = 0; p < k; ++p) {
                const double av = arow[p];
                if (av == 0.0) continue;
                const double* brow = b.row_ptr(p);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (int i = 0; i < m; ++i) {
            const double* arow = a.row_ptr(i);
            double* crow = c.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                const double* brow = b.row_ptr(j);
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
                crow[j] += s;
            }
        }
    } else {  // tn
        for (int p = 0; p < k; ++p) {
            const double* arow = a.row_ptr(p);
            const double* brow = b.row_ptr(p);
            for (int i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c.row_ptr(i);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a, bool trans_b) {
    Matrix c;
    matmul_into(c, a, b, trans_a, trans_b, /*accumulate=*/false);
    return c;
}

std::vector<double> softmax(std::span<const double> logits) {
    SDAR_CHECK(!logits.empty(), "softmax: empty input");
    double mx = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) fail("softmax: non-finite logit");
        mx = std::max(mx, v);
    }
    std::vector<double> out(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

double log_sum_exp(std::span<const double> x) {
    SDAR_CHECK(!x.empty(), "log_sum_exp: empty input");
    double mx = x[0];
    for (double v : x) {
        if (!std::isfinite(v)) fail("log_sum_exp: non-finite input");
        mx = std::max(mx, v);
    }
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

void softmax_rows_inplace(Matrix& m) {
    for (int r = 0; r < m.rows; ++r) {
        auto probs = softmax(m.row(r));
        std::copy(probs.begin(), probs.end(), m.row_ptr(r));
    }
}

}  // namespace sdar
