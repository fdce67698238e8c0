#include "sdar/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sdar/io_util.hpp"

namespace sdar {

NearestResult nearest_code(const Codebook& book, std::span<const double> query) {
    SDAR_CHECK(book.count() > 0, "nearest_code: empty codebook");
    SDAR_CHECK(static_cast<int>(query.size()) == book.dim(), "nearest_code: dim mismatch");
    NearestResult best{0, squared_distance(book.code(0), query)};
    for (int i = 1; i < book.count(); ++i) {
        const double d = squared_distance(book.code(i), query);
        if (d < best.sq_dist) best = {i, d};
    }
    return best;
}

double code_distance(std::span<const double> a, std::span<const double> b) {
    return std::sqrt(squared_distance(a, b));
}

double code_distance(const Codebook& book, int i, int j) {
    return code_distance(book.code(i), book.code(j));
}

double clustering_objective(const Matrix& points, const Matrix& centers,
                            const std::vector<int>& assignment) {
    double s = 0.0;
    for (int i = 0; i < points.rows; ++i)
        s += squared_distance(points.row(i), centers.row(assignment[i]));
    return s;
}

namespace {

// Capacity-constrained assignment: repeatedly take the unassigned point
// closest to its nearest center that still has room. Strict < comparisons
// with ascending scans resolve all ties to the lowest index.
std::vector<int> greedy_assign(const Matrix& points, const Matrix& centers, int cap_per_cluster) {
    const int num_points = points.rows;
    const int num_centers = centers.rows;
    Matrix dist(num_points, num_centers);
    for (int i = 0; i < num_points; ++i)
        for (int c = 0; c < num_centers; ++c)
            dist.at(i, c) = squared_distance(points.row(i), centers.row(c));

    std::vector<int> cap(num_centers, cap_per_cluster);
    std::vector<int> assign(num_points, -1);
    std::vector<int> best(num_points, -1);
    std::vector<double> best_d(num_points, 0.0);

    auto recompute = [&](int i) {
        int arg = -1;
        double bd = std::numeric_limits<double>::infinity();
        for (int c = 0; c < num_centers; ++c) {
            if (cap[c] == 0) continue;
            if (dist.at(i, c) < bd) {
                bd = dist.at(i, c);
                arg = c;
            }
        }
        best[i] = arg;
        best_d[i] = bd;
    };
    for (int i = 0; i < num_points; ++i) recompute(i);

    for (int step = 0; step < num_points; ++step) {
        int pick = -1;
        for (int i = 0; i < num_points; ++i) {
            if (assign[i] >= 0) continue;
            if (pick < 0 || best_d[i] < best_d[pick]) pick = i;
        }
        const int c = best[pick];
        assign[pick] = c;
        if (--cap[c] == 0) {
            for (int i = 0; i < num_points; ++i)
                if (assign[i] < 0 && best[i] == c) recompute(i);
        }
    }
    return assign;
}

Matrix kmeanspp_seed(const Matrix& points, int n, Rng& rng) {
    const int num_points = points.rows;
    Matrix centers(n, points.cols);
    const int first = static_cast<int>(rng.range(num_points));
    std::copy(points.row_ptr(first), points.row_ptr(first) + points.cols, centers.row_ptr(0));
    std::vector<double> d2(num_points);
    for (int i = 0; i < num_points; ++i)
        d2[i] = squared_distance(points.row(i), centers.row(0));
    for (int c = 1; c < n; ++c) {
        double total = 0.0;
        for (double v : d2) total += v;
        int pick;
        if (total <= 0.0) {
            pick = c % num_points;  // degenerate input: all points coincide
        } else {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            pick = num_points - 1;
            for (int i = 0; i < num_points; ++i) {
                cum += d2[i];
                if (cum >= r) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy(points.row_ptr(pick), points.row_ptr(pick) + points.cols, centers.row_ptr(c));
        for (int i = 0; i < num_points; ++i)
            d2[i] = std::min(d2[i], squared_distance(points.row(i), centers.row(c)));
    }
    return centers;
}

}  // namespace

BalancedKMeansResult balanced_kmeans(const Matrix& points, int n, int max_iters, Rng& rng) {
    const int num_points = points.rows;
    SDAR_CHECK(n >= 1, "balanced_kmeans: cluster count must be positive");
    SDAR_CHECK(n <= num_points, "balanced_kmeans: more clusters than points");
    SDAR_CHECK(num_points % n == 0, "balanced_kmeans: cluster count must divide point count");
    SDAR_CHECK(max_iters >= 1, "balanced_kmeans: max_iters must be positive");
    const int m = num_points / n;

    BalancedKMeansResult res;
    res.centers = kmeanspp_seed(points, n, rng);
    for (int iter = 0; iter < max_iters; ++iter) {
        std::vector<int> proposed = greedy_assign(points, res.centers, m);
        if (!res.assignment.empty()) {
            // Accept only strict improvement at fixed centers; this keeps the
            // objective monotone and stops once the assignment stabilizes.
            const double j_new = clustering_objective(points, res.centers, proposed);
            const double j_old = clustering_objective(points, res.centers, res.assignment);
            if (j_new >= j_old) break;
        }
        res.assignment = std::move(proposed);
        res.centers.fill(0.0);
        for (int i = 0; i < num_points; ++i)
            axpy(1.0, points.row(i), res.centers.row(res.assignment[i]));
        for (double& v : res.centers.data) v /= m;
        res.objective.push_back(clustering_objective(points, res.centers, res.assignment));
        res.iterations = iter + 1;
    }
    return res;
}

RearrangeResult rearrange(const Codebook& book, int clusters, int max_iters, Rng& rng) {
    auto km = balanced_kmeans(book.codes, clusters, max_iters, rng);
    const int n = book.count();
    RearrangeResult out;
    out.cluster_of_old = km.assignment;
    out.perm.forward.assign(n, -1);
    out.perm.inverse.assign(n, -1);
    int pos = 0;
    for (int c = 0; c < clusters; ++c)
        for (int old = 0; old < n; ++old)
            if (km.assignment[old] == c) {
                out.perm.forward[old] = pos;
                out.perm.inverse[pos] = old;
                ++pos;
            }
    SDAR_CHECK(pos == n, "rearrange: permutation is not a bijection");
    out.book = apply_permutation(book, out.perm);
    return out;
}

Codebook apply_permutation(const Codebook& book, const Permutation& perm) {
    SDAR_CHECK(static_cast<int>(perm.forward.size()) == book.count(),
               "apply_permutation: size mismatch");
    Codebook out(book.count(), book.dim());
    for (int i = 0; i < book.count(); ++i) {
        const int to = perm.forward[i];
        SDAR_CHECK(to >= 0 && to < book.count(), "apply_permutation: index out of range");
        std::copy(book.codes.row_ptr(i), book.codes.row_ptr(i) + book.dim(),
                  out.codes.row_ptr(to));
    }
    return out;
}

void save_codebook(const Codebook& book, const std::string& path) {
    auto os = open_output(path);
    write_magic(os, "SDCB");
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(book.count()));
    write_u32_le(os, static_cast<uint32_t>(book.dim()));
    write_matrix_f32(os, book.codes);
}

Codebook load_codebook(const std::string& path) {
    auto is = open_input(path);
    expect_magic(is, "SDCB", "codebook");
    expect_version(is, 1, "codebook");
    const uint32_t count = read_u32_le(is, "codebook count");
    const uint32_t dim = read_u32_le(is, "codebook dim");
    SDAR_CHECK(count > 0 && dim > 0 && static_cast<uint64_t>(count) * dim < (1u << 28),
               "codebook: implausible header");
    Codebook book(static_cast<int>(count), static_cast<int>(dim));
    read_matrix_f32(is, book.codes, "codebook payload");
    expect_eof(is, "codebook");
    return book;
}

namespace {

void check_bijection(const Permutation& perm) {
    const size_t n = perm.forward.size();
    SDAR_CHECK(perm.inverse.size() == n && n > 0, "permutation: empty or ragged maps");
    for (size_t i = 0; i < n; ++i) {
        const int f = perm.forward[i];
        SDAR_CHECK(f >= 0 && static_cast<size_t>(f) < n, "permutation: index out of range");
        SDAR_CHECK(perm.inverse[static_cast<size_t>(f)] == static_cast<int>(i),
                   "permutation: maps are not mutually inverse");
    }
}

}  // namespace

void save_permutation(const Permutation& perm, const std::string& path) {
    check_bijection(perm);
    auto os = open_output(path);
    write_magic(os, "SDPM");
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(perm.forward.size()));
    for (int v : perm.forward) write_u32_le(os, static_cast<uint32_t>(v));
    for (int v : perm.inverse) write_u32_le(os, static_cast<uint32_t>(v));
}

Permutation load_permutation(const std::string& path) {
    auto is = open_input(path);
    expect_magic(is, "SDPM", "permutation");
    expect_version(is, 1, "permutation");
    const uint32_t n = read_u32_le(is, "permutation count");
    SDAR_CHECK(n > 0 && n < (1u << 24), "permutation: implausible count");
    Permutation perm;
    perm.forward.resize(n);
    perm.inverse.resize(n);
    for (int& v : perm.forward) v = static_cast<int>(read_u32_le(is, "forward map"));
    for (int& v : perm.inverse) v = static_cast<int>(read_u32_le(is, "inverse map"));
    expect_eof(is, "permutation");
    check_bijection(perm);
    return perm;
}

}  // namespace sdar
