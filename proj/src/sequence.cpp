#include "sdar/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sdar/io_util.hpp"

namespace sdar {

LocalWindow raster_window(int center, int side, int k) {
    SDAR_CHECK(side >= 1 && center >= 0 && center < side * side,
               "raster_window: center off the grid");
    SDAR_CHECK(k >= 1 && k % 2 == 1, "raster_window: window side must be odd");
    LocalWindow w{center, k, {}};
    const int r0 = center / side, c0 = center % side, rad = k / 2;
    for (int r = std::max(0, r0 - rad); r <= std::min(side - 1, r0 + rad); ++r)
        for (int c = std::max(0, c0 - rad); c <= std::min(side - 1, c0 + rad); ++c) {
            const int p = r * side + c;
            if (p < center) w.members.push_back(p);
        }
    return w;
}

void WorldConfig::validate() const {
    SDAR_CHECK(n_classes >= 1 && motifs_per_class >= 1, "world: need a class and a motif");
    SDAR_CHECK(dim >= 1 && side >= 1, "world: dim and side must be positive");
    SDAR_CHECK(rho >= 0.0 && rho < 1.0, "world: coupling must lie in [0, 1)");
    SDAR_CHECK(sigma >= 0.0, "world: noise scale must be non-negative");
    SDAR_CHECK(motif_scale > 0.0 && motif_spread >= 0.0, "world: bad motif geometry");
}

namespace {

constexpr uint64_t kMotifStream = 0x3d;
constexpr uint64_t kSampleStream = 0x5e;

std::vector<double> unit_direction(Rng& r, int dim) {
    std::vector<double> u(dim);
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (double& v : u) {
            v = r.normal();
            n2 += v * v;
        }
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    for (double& v : u) v *= inv;
    return u;
}

}  // namespace

SyntheticWorld::SyntheticWorld(const WorldConfig& cfg)
    : cfg_(cfg),
      motifs_(std::max(1, cfg.n_classes) * std::max(1, cfg.motifs_per_class),
              std::max(1, cfg.dim)) {
    cfg_.validate();
    Rng r(derive_seed(cfg_.seed, kMotifStream));
    std::vector<double> centre(cfg_.dim);
    for (int c = 0; c < cfg_.n_classes; ++c) {
        std::fill(centre.begin(), centre.end(), 0.0);
        if (c < cfg_.dim) {
            centre[c] = cfg_.motif_scale;  // orthogonal centres while classes fit
        } else {
            const auto u = unit_direction(r, cfg_.dim);
            for (int k = 0; k < cfg_.dim; ++k) centre[k] = cfg_.motif_scale * u[k];
        }
        for (int j = 0; j < cfg_.motifs_per_class; ++j) {
            const auto u = unit_direction(r, cfg_.dim);
            double* row = motifs_.row_ptr(c * cfg_.motifs_per_class + j);
            for (int k = 0; k < cfg_.dim; ++k)
                row[k] = centre[k] + cfg_.motif_spread * u[k];
        }
    }
}

std::span<const double> SyntheticWorld::motif(int cls, int j) const {
    SDAR_CHECK(cls >= 0 && cls < cfg_.n_classes && j >= 0 && j < cfg_.motifs_per_class,
               "motif: index out of range");
    return motifs_.row(cls * cfg_.motifs_per_class + j);
}

std::vector<LabeledGrid> SyntheticWorld::generate(int count, Rng& rng) const {
    SDAR_CHECK(count >= 1, "generate: count must be positive");
    const uint64_t tag = rng.next_u64();
    std::vector<LabeledGrid> out;
    out.reserve(count);
    for (int s = 0; s < count; ++s) {
        Rng r(derive_seed(tag, kSampleStream, static_cast<uint64_t>(s)));
        const int label = static_cast<int>(r.range(cfg_.n_classes));
        out.push_back(generate_one(label, r.next_u64()));
    }
    return out;
}

LabeledGrid SyntheticWorld::generate_one(int label, uint64_t sample_seed) const {
    SDAR_CHECK(label >= 0 && label < cfg_.n_classes, "generate_one: label out of range");
    Rng r(sample_seed);
    const int g = cfg_.side, d = cfg_.dim;
    LabeledGrid grid{g, label, Matrix(g * g, d)};
    std::vector<double> mix(d);
    for (int i = 0; i < g * g; ++i) {
        const auto m = motif(label, static_cast<int>(r.range(cfg_.motifs_per_class)));
        double* e = grid.patches.row_ptr(i);
        std::copy(m.begin(), m.end(), e);
        const auto win = raster_window(i, g, 3);
        if (!win.members.empty() && cfg_.rho != 0.0) {
            std::fill(mix.begin(), mix.end(), 0.0);
            for (int p : win.members) axpy(1.0, grid.patches.row(p), mix);
            axpy(cfg_.rho / static_cast<double>(win.members.size()), mix, {e, mix.size()});
        }
        // Noise is drawn even at sigma = 0 so the motif choices for a given
        // seed do not depend on sigma.
        for (int c = 0; c < d; ++c) e[c] += cfg_.sigma * r.normal();
    }
    return grid;
}

int SyntheticWorld::classify_patch(std::span<const double> e) const {
    SDAR_CHECK(static_cast<int>(e.size()) == cfg_.dim, "classify_patch: dimension mismatch");
    int best = 0;
    double best_d = squared_distance(e, motifs_.row(0));
    for (int j = 1; j < motifs_.rows; ++j) {
        const double dj = squared_distance(e, motifs_.row(j));
        if (dj < best_d) {
            best_d = dj;
            best = j;
        }
    }
    return best / cfg_.motifs_per_class;
}

int SyntheticWorld::classify_grid(const Matrix& patches) const {
    SDAR_CHECK(patches.rows >= 1, "classify_grid: empty grid");
    std::vector<int> votes(cfg_.n_classes, 0);
    for (int i = 0; i < patches.rows; ++i) ++votes[classify_patch(patches.row(i))];
    int best = 0;
    for (int c = 1; c < cfg_.n_classes; ++c)
        if (votes[c] > votes[best]) best = c;
    return best;
}

std::vector<TokenGrid> tokenize_dataset(const VqModel& model,
                                        const std::vector<LabeledGrid>& grids) {
    std::vector<TokenGrid> out;
    out.reserve(grids.size());
    for (const auto& g : grids) {
        SDAR_CHECK(g.patches.cols == model.config().dim, "tokenize: patch dimension mismatch");
        SDAR_CHECK(g.patches.rows == g.side * g.side, "tokenize: ragged grid");
        TokenGrid tg{g.side, g.label, {}};
        tg.codes.reserve(static_cast<size_t>(g.patches.rows));
        for (int i = 0; i < g.patches.rows; ++i) {
            const auto e = model.encode(g.patches.row(i));
            if (model.single_codebook()) {
                tg.codes.push_back(
                    {static_cast<uint16_t>(model.quantize_semantic(e).index), 0});
            } else {
                tg.codes.push_back(model.quantize_dual(e).code);
            }
        }
        out.push_back(std::move(tg));
    }
    return out;
}

void save_dataset(const std::string& path, const std::vector<LabeledGrid>& grids,
                  int n_classes) {
    SDAR_CHECK(!grids.empty(), "dataset: nothing to save");
    SDAR_CHECK(n_classes >= 1, "dataset: need at least one class");
    const int g = grids.front().side, d = grids.front().patches.cols;
    auto os = open_output(path);
    write_magic(os, "SDDS");
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(grids.size()));
    write_u32_le(os, static_cast<uint32_t>(g));
    write_u32_le(os, static_cast<uint32_t>(d));
    write_u32_le(os, static_cast<uint32_t>(n_classes));
    for (const auto& grid : grids) {
        SDAR_CHECK(grid.side == g && grid.patches.cols == d && grid.patches.rows == g * g,
                   "dataset: mixed geometry");
        SDAR_CHECK(grid.label >= 0 && grid.label < n_classes,
                   "dataset: label outside n_classes");
        write_u16_le(os, static_cast<uint16_t>(grid.label));
        write_matrix_f32(os, grid.patches);
    }
}

Dataset load_dataset(const std::string& path) {
    auto is = open_input(path);
    expect_magic(is, "SDDS", "dataset");
    expect_version(is, 1, "dataset");
    const uint32_t count = read_u32_le(is, "dataset count");
    const uint32_t g = read_u32_le(is, "dataset side");
    const uint32_t d = read_u32_le(is, "dataset dim");
    const uint32_t ncls = read_u32_le(is, "dataset classes");
    SDAR_CHECK(count >= 1 && g >= 1 && d >= 1 && ncls >= 1 &&
                   static_cast<uint64_t>(count) * g * g * d < (1ull << 30),
               "dataset: implausible header");
    Dataset ds;
    ds.n_classes = static_cast<int>(ncls);
    ds.grids.reserve(count);
    for (uint32_t s = 0; s < count; ++s) {
        LabeledGrid grid{static_cast<int>(g), read_u16_le(is, "dataset label"),
                         Matrix(static_cast<int>(g * g), static_cast<int>(d))};
        SDAR_CHECK(grid.label < ds.n_classes, "dataset: label outside n_classes");
        read_matrix_f32(is, grid.patches, "dataset payload");
        ds.grids.push_back(std::move(grid));
    }
    expect_eof(is, "dataset");
    return ds;
}

std::vector<DistanceRow> code_distance_experiment(const VqModel& model,
                                                  const std::vector<LabeledGrid>& grids,
                                                  const std::vector<int>& ranks) {
    const int n1 = model.config().n1;
    const int n2 = model.single_codebook() ? 1 : model.config().n2;
    const int total = n1 * n2, d = model.config().dim;
    SDAR_CHECK(!ranks.empty() && std::is_sorted(ranks.begin(), ranks.end()),
               "code distance: ranks must be sorted ascending");
    SDAR_CHECK(ranks.front() >= 0 && ranks.back() < total,
               "code distance: rank outside the combined codebook");
    SDAR_CHECK(!grids.empty(), "code distance: no grids");

    // Rows in (semantic, detail) lexicographic order so a token's combined
    // code lives at semantic * n2 + detail.
    Matrix combined(total, d);
    for (int a = 0; a < n1; ++a)
        for (int b = 0; b < n2; ++b) {
            double* row = combined.row_ptr(a * n2 + b);
            const auto cs = model.semantic_codes().row(a);
            std::copy(cs.begin(), cs.end(), row);
            if (!model.single_codebook())
                axpy(1.0, model.detail_codes().row(b), {row, static_cast<size_t>(d)});
        }
    Matrix decoded(total, d);
    for (int i = 0; i < total; ++i) {
        const auto dec = model.decode(combined.row(i));
        std::copy(dec.begin(), dec.end(), decoded.row_ptr(i));
    }

    std::vector<double> acc(ranks.size(), 0.0);
    int64_t tokens = 0;
    std::vector<int> order(total);
    std::vector<double> dist(total);
    const auto token_grids = tokenize_dataset(model, grids);
    for (const auto& tg : token_grids) {
        for (const DualCode code : tg.codes) {
            const int own = code.semantic * n2 + (model.single_codebook() ? 0 : code.detail);
            for (int i = 0; i < total; ++i)
                dist[i] = squared_distance(combined.row(own), combined.row(i));
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](int i, int j) {
                return dist[i] != dist[j] ? dist[i] < dist[j] : i < j;
            });
            for (size_t r = 0; r < ranks.size(); ++r)
                acc[r] += squared_distance(decoded.row(order[ranks[r]]), decoded.row(own)) / d;
            ++tokens;
        }
    }

    std::vector<DistanceRow> rows(ranks.size());
    for (size_t r = 0; r < ranks.size(); ++r)
        rows[r] = {ranks[r], acc[r] / static_cast<double>(tokens)};
    return rows;
}

}  // namespace sdar
