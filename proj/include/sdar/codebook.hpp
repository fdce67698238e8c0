#pragma once

#include <span>
#include <string>
#include <vector>

#include "sdar/matrix.hpp"
#include "sdar/rng.hpp"

namespace sdar {

/// A table of code vectors. Compute is f64; the file payload is f32, so
/// values round-trip through f32 exactly once when saved.
struct Codebook {
    Matrix codes;  // [count, dim]

    Codebook() = default;
    Codebook(int count, int dim) : codes(count, dim) {}
    explicit Codebook(Matrix m) : codes(std::move(m)) {}

    int count() const { return codes.rows; }
    int dim() const { return codes.cols; }
    std::span<const double> code(int i) const { return codes.row(i); }
};

struct NearestResult {
    int index = -1;
    double sq_dist = 0.0;
};

/// Exact brute-force argmin over squared Euclidean distance.
/// Ties resolve to the lowest index.
NearestResult nearest_code(const Codebook& book, std::span<const double> query);

/// Euclidean distance between two code vectors.
double code_distance(std::span<const double> a, std::span<const double> b);
double code_distance(const Codebook& book, int i, int j);

struct BalancedKMeansResult {
    Matrix centers;                 // [n, dim]
    std::vector<int> assignment;    // [N], values in [0, n)
    std::vector<double> objective;  // within-cluster SSD after each accepted iteration
    int iterations = 0;
};

/// K-means constrained to clusters of exactly m = N/n points.
///
/// Seeding is k-means++ from `rng`. Each iteration assigns points greedily
/// in order of ascending distance to their nearest center with remaining
/// capacity, then moves centers to cluster means. A proposed assignment is
/// accepted only if it lowers the objective at fixed centers, which makes
/// the reported objective strictly decreasing until termination; iteration
/// stops when the assignment repeats, a proposal is rejected, or max_iters
/// is reached. All ties resolve to the lowest index.
BalancedKMeansResult balanced_kmeans(const Matrix& points, int n, int max_iters, Rng& rng);

/// Bijection between old and new code indices.
struct Permutation {
    std::vector<int> forward;  // old index -> new index
    std::vector<int> inverse;  // new index -> old index
};

struct RearrangeResult {
    Codebook book;      // rows permuted so cluster j occupies [j*m, (j+1)*m)
    Permutation perm;
    std::vector<int> cluster_of_old;  // balanced k-means assignment
};

/// Reorders a codebook so that cluster membership is recoverable from the
/// index alone: cluster(i) = i / m. Members keep ascending old-index order
/// inside each block.
RearrangeResult rearrange(const Codebook& book, int clusters, int max_iters, Rng& rng);

/// Applies a permutation: out[perm.forward[i]] = in[i].
Codebook apply_permutation(const Codebook& book, const Permutation& perm);

// Codebook file: magic "SDCB", u32 version = 1, u32 count, u32 dim,
// count*dim little-endian f32 values, row-major. No trailing bytes.
void save_codebook(const Codebook& book, const std::string& path);
Codebook load_codebook(const std::string& path);

// Permutation sidecar: magic "SDPM", u32 version = 1, u32 count, then the
// forward and inverse maps as u32 each. Loading verifies the two maps are
// mutually inverse bijections.
void save_permutation(const Permutation& perm, const std::string& path);
Permutation load_permutation(const std::string& path);

/// Within-cluster sum of squared distances for a given assignment.
double clustering_objective(const Matrix& points, const Matrix& centers,
                            const std::vector<int>& assignment);

}  // namespace sdar
