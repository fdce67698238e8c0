#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdar/matrix.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/rng.hpp"

namespace sdar {

/// Raster positions within Chebyshev distance floor(k/2) of `center` that
/// precede it in row-major order, listed in raster order themselves.
struct LocalWindow {
    int center = 0;
    int k = 0;
    std::vector<int> members;
};

/// Causal k x k neighborhood of a raster position on a side x side grid.
/// k must be odd; position 0 always gets an empty window.
LocalWindow raster_window(int center, int side, int k);

/// One synthetic sample: a side x side grid of patch embeddings in raster
/// order (row i of `patches` is raster position i) plus its class label.
struct LabeledGrid {
    int side = 0;
    int label = 0;
    Matrix patches;
};

/// The same grid after quantization: one dual code per raster position.
struct TokenGrid {
    int side = 0;
    int label = 0;
    std::vector<DualCode> codes;
};

struct WorldConfig {
    int n_classes = 8;
    int motifs_per_class = 4;
    int dim = 8;
    int side = 8;
    double rho = 0.5;    // causal 3x3 neighbor coupling, must stay below 1
    double sigma = 0.1;  // per-coordinate Gaussian noise scale
    // Class centres sit motif_scale from the origin (orthogonal directions
    // while n_classes <= dim); each class's motifs sit exactly motif_spread
    // from its centre. The defaults keep 2*scale - other-class distance far
    // above the within-class radius, so a nearest-motif classifier is exact
    // on noise-free data even with maximal coupling drift.
    double motif_scale = 2.0;
    double motif_spread = 0.12;
    uint64_t seed = 1;

    void validate() const;
};

/// Class-conditional patch-embedding generator. Each patch is a randomly
/// chosen class motif, pulled toward the mean of its already-placed causal
/// 3x3 neighbors by rho, plus isotropic noise. Deterministic given seeds;
/// samples use independent derived streams so generation order is free.
class SyntheticWorld {
public:
    explicit SyntheticWorld(const WorldConfig& cfg);

    const WorldConfig& config() const { return cfg_; }
    const Matrix& motifs() const { return motifs_; }  // class-major rows
    std::span<const double> motif(int cls, int j) const;

    std::vector<LabeledGrid> generate(int count, Rng& rng) const;
    LabeledGrid generate_one(int label, uint64_t sample_seed) const;

    /// Class owning the nearest motif; ties go to the lowest motif index.
    int classify_patch(std::span<const double> e) const;
    /// Majority vote of classify_patch over all rows; ties to the lowest class.
    int classify_grid(const Matrix& patches) const;

private:
    WorldConfig cfg_;
    Matrix motifs_;
};

/// Quantizes every patch of every grid, preserving geometry and labels.
std::vector<TokenGrid> tokenize_dataset(const VqModel& model,
                                        const std::vector<LabeledGrid>& grids);

struct Dataset {
    int n_classes = 0;
    std::vector<LabeledGrid> grids;
};

void save_dataset(const std::string& path, const std::vector<LabeledGrid>& grids,
                  int n_classes);
Dataset load_dataset(const std::string& path);

struct DistanceRow {
    int rank = 0;    // order statistic of combined-code distance, 0 = the code itself
    double mse = 0;  // decoder-space MSE against the unmodified reconstruction
};

/// Replaces each token's combined code with its rank-th nearest combined code
/// and measures how far the decoded patch moves. One row per requested rank.
std::vector<DistanceRow> code_distance_experiment(const VqModel& model,
                                                  const std::vector<LabeledGrid>& grids,
                                                  const std::vector<int>& ranks);

}  // namespace sdar
