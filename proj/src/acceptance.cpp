#include "sdar/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdar/armodel.hpp"
#include "sdar/codebook.hpp"
#include "sdar/io_util.hpp"
#include "sdar/matrix.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/rng.hpp"
#include "sdar/sampling.hpp"
#include "sdar/sequence.hpp"
#include "sdar/stats.hpp"
#include "sdar/tape.hpp"

namespace sdar {
namespace {

std::string stamp(const char* fmt, ...) {
    char buf[768];
    va_list ap;
    va_start(ap, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, ap);
    va_end(ap);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = scale * rng.normal();
    return m;
}

Matrix flatten_grids(const std::vector<LabeledGrid>& grids) {
    const int per = grids.front().patches.rows, dim = grids.front().patches.cols;
    Matrix out(static_cast<int>(grids.size()) * per, dim);
    int r = 0;
    for (const auto& g : grids)
        for (int i = 0; i < per; ++i, ++r)
            std::copy(g.patches.row(i).begin(), g.patches.row(i).end(), out.row_ptr(r));
    return out;
}

std::vector<double> softmax_of(std::span<const double> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < p.size(); ++i) denom += (p[i] = std::exp(logits[i] - m));
    for (double& v : p) v /= denom;
    return p;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    SDAR_CHECK(a.size() == b.size(), "max_abs_diff: size mismatch");
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

std::vector<TokenGrid> random_token_grids(const ArConfig& c, int count, uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenGrid> out;
    for (int i = 0; i < count; ++i) {
        TokenGrid g;
        g.side = c.side;
        g.label = static_cast<int>(rng.range(c.n_classes));
        for (int p = 0; p < c.tokens(); ++p)
            g.codes.push_back({static_cast<uint16_t>(rng.range(c.n1)),
                               c.n2 > 0 ? static_cast<uint16_t>(rng.range(c.n2))
                                        : static_cast<uint16_t>(0)});
        out.push_back(std::move(g));
    }
    return out;
}

void redraw_params(ArModel& model, uint64_t seed) {
    // Generic-scale weights keep every gradient route above the resolution
    // of central differences and make head outputs respond visibly to their
    // inputs; the default init leaves deep routes near zero.
    Rng rng(seed);
    for (Parameter* p : model.params())
        for (double& v : p->value.data) v = 0.25 * rng.normal();
}

// --- 1: exhaustive argmin equivalence ---------------------------------------

Outcome crit_quantizer_oracle() {
    Rng rng(101);
    Codebook sem(random_matrix(16, 8, rng));
    Codebook det(random_matrix(64, 8, rng));
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> e(8);
        for (double& v : e) v = rng.normal();

        int best_s = -1;
        double best_sd = 0.0;
        for (int i = 0; i < sem.count(); ++i) {
            const double d = squared_distance(e, sem.code(i));
            if (best_s < 0 || d < best_sd) best_s = i, best_sd = d;
        }
        const SemanticQuant sq = quantize_semantic(sem, e);
        if (sq.index != best_s) return {false, stamp("semantic argmin mismatch at trial %d", trial)};
        for (int k = 0; k < 8; ++k)
            if (sq.residual[k] != e[k] - sem.code(best_s)[k])
                return {false, stamp("residual mismatch at trial %d", trial)};

        int best_d = -1;
        double best_dd = 0.0;
        for (int j = 0; j < det.count(); ++j) {
            const double d = squared_distance(sq.residual, det.code(j));
            if (best_d < 0 || d < best_dd) best_d = j, best_dd = d;
        }
        const DualQuant dq = quantize_dual(sem, det, e);
        if (dq.code.semantic != best_s || dq.code.detail != best_d)
            return {false, stamp("dual argmin mismatch at trial %d", trial)};
        for (int k = 0; k < 8; ++k)
            if (dq.reconstruction[k] != sem.code(best_s)[k] + det.code(best_d)[k])
                return {false, stamp("reconstruction mismatch at trial %d", trial)};
        ++checked;
    }
    return {true, stamp("%d/1000 embeddings: semantic and detail argmins match brute force exactly",
                        checked)};
}

// --- 2: balanced clustering -------------------------------------------------

Outcome crit_balanced_clustering() {
    Rng rng(202);
    const Matrix points = random_matrix(1024, 8, rng);
    const int n = 16, m = 1024 / n;
    const auto res = balanced_kmeans(points, n, 60, rng);

    std::vector<int> counts(n, 0);
    for (int a : res.assignment) ++counts[a];
    for (int c = 0; c < n; ++c)
        if (counts[c] != m) return {false, stamp("cluster %d holds %d points, want %d", c, counts[c], m)};

    for (size_t i = 1; i < res.objective.size(); ++i)
        if (res.objective[i] > res.objective[i - 1] + 1e-9)
            return {false, stamp("objective rose at iteration %zu: %.6f -> %.6f", i,
                                 res.objective[i - 1], res.objective[i])};
    const double cost = clustering_objective(points, res.centers, res.assignment);

    // Baseline: random balanced partitions with centers at cluster means.
    double total = 0.0;
    std::vector<int> order(points.rows);
    std::iota(order.begin(), order.end(), 0);
    for (int trial = 0; trial < 100; ++trial) {
        for (int i = points.rows - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<int>(rng.range(i + 1))]);
        std::vector<int> assign(points.rows);
        for (int i = 0; i < points.rows; ++i) assign[order[i]] = i / m;
        Matrix centers(n, points.cols);
        for (int i = 0; i < points.rows; ++i)
            axpy(1.0, points.row(i), centers.row(assign[i]));
        for (double& v : centers.data) v /= m;
        total += clustering_objective(points, centers, assign);
    }
    const double baseline = total / 100.0;
    if (cost > baseline)
        return {false, stamp("clustered cost %.4f exceeds random-partition mean %.4f", cost, baseline)};
    return {true, stamp("16 clusters of exactly %d; cost %.4f vs random-partition mean %.4f; "
                        "objective non-increasing over %d iterations",
                        m, cost, baseline, res.iterations)};
}

// --- 3: rearrangement block invariant ----------------------------------------

Outcome crit_rearrangement() {
    Rng rng(303);
    const Codebook book(random_matrix(256, 8, rng));
    const int clusters = 16, m = 256 / clusters;
    const auto res = rearrange(book, clusters, 50, rng);

    if (static_cast<int>(res.perm.forward.size()) != 256 ||
        static_cast<int>(res.perm.inverse.size()) != 256)
        return {false, "permutation maps have the wrong length"};
    std::vector<int> seen(256, 0);
    for (int i = 0; i < 256; ++i) {
        const int f = res.perm.forward[i];
        if (f < 0 || f >= 256 || seen[f]++) return {false, stamp("forward map not a bijection at %d", i)};
        if (res.perm.inverse[f] != i) return {false, stamp("inverse disagrees with forward at %d", i)};
    }
    for (int i = 0; i < 256; ++i)
        if (res.cluster_of_old[res.perm.inverse[i]] != i / m)
            return {false, stamp("new index %d landed outside its cluster block", i)};
    for (int i = 0; i < 256; ++i)
        for (int k = 0; k < 8; ++k)
            if (res.book.codes.at(res.perm.forward[i], k) != book.codes.at(i, k))
                return {false, stamp("code row %d did not move with its index", i)};
    return {true, "bijection verified; cluster(new index i) == i / 16 for all 256 codes; "
                  "rows moved intact"};
}

// --- 4: cluster-mass cross-entropy vs direct summation ----------------------

Outcome crit_cluster_ce() {
    Rng rng(404);
    const int N = 64, clusters = 8, block = N / clusters;
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Matrix row(1, N);
        for (double& v : row.data) v = 2.0 * rng.normal();
        const int target = static_cast<int>(rng.range(N));

        const double hi = *std::max_element(row.data.begin(), row.data.end());
        double denom = 0.0, mass = 0.0;
        for (int j = 0; j < N; ++j) {
            const double e = std::exp(row.at(0, j) - hi);
            denom += e;
            if (j / block == target / block) mass += e;
        }
        const double oracle = std::log(denom) - std::log(mass);

        Tape t;
        const Var logits = t.leaf(row);
        const double cce = t.value(t.cluster_cross_entropy(logits, {target}, clusters)).at(0, 0);
        const double tce = t.value(t.cross_entropy(logits, {target})).at(0, 0);
        worst = std::max(worst, std::abs(cce - oracle));
        if (std::abs(cce - oracle) > 1e-10)
            return {false, stamp("trial %d: cluster loss %.12f vs summed-mass oracle %.12f", trial,
                                 cce, oracle)};
        if (cce > tce + 1e-12)
            return {false, stamp("trial %d: cluster loss %.12f exceeds token loss %.12f", trial,
                                 cce, tce)};
    }
    return {true, stamp("1000 trials: max |cluster loss - summed-mass oracle| = %.2e; "
                        "cluster loss never exceeded token loss",
                        worst)};
}

// --- 5: finite-difference gradient verification ------------------------------

Outcome crit_gradients() {
    // Commitment losses, with the stop-gradient operands frozen so central
    // differences probe the same function the backward pass differentiates.
    VqConfig vc;
    vc.n1 = 8;
    vc.n2 = 16;
    vc.dim = 6;
    vc.batch = 10;
    vc.seed = 505;
    VqModel vq(vc);
    Rng rng(506);
    const Matrix batch = random_matrix(10, 6, rng);
    std::vector<int> sem_idx(batch.rows), det_idx(batch.rows);
    for (int b = 0; b < batch.rows; ++b) {
        sem_idx[b] = vq.quantize_semantic(vq.encode(batch.row(b))).index;
        det_idx[b] = static_cast<int>(rng.range(vc.n2));
    }
    const auto sv1 = vq.capture_stage1_stops(batch, sem_idx);
    const auto r1 = grad_check(
        [&](Tape& t) { return vq.build_stage1_loss(t, batch, sem_idx, &sv1); }, vq.params().all());
    const auto sv2 = vq.capture_stage2_stops(batch, sem_idx, det_idx);
    const auto r2 = grad_check(
        [&](Tape& t) { return vq.build_stage2_loss(t, batch, sem_idx, det_idx, &sv2); },
        vq.params().all());

    // Token cross-entropy plus the weighted cluster-mass term on a small
    // linear classifier.
    ParamStore store;
    Parameter& W = store.create("w", random_matrix(5, 12, rng, 0.3));
    Parameter& B = store.create("b", random_matrix(1, 12, rng, 0.1));
    const Matrix x = random_matrix(6, 5, rng);
    std::vector<int> targets(6);
    for (int& v : targets) v = static_cast<int>(rng.range(12));
    const auto r3 = grad_check(
        [&](Tape& t) {
            const Var logits = t.add_row(t.matmul(t.leaf(x), t.param(W)), t.param(B));
            const Var tce = t.mean_all(t.cross_entropy(logits, targets));
            const Var cce = t.mean_all(t.cluster_cross_entropy(logits, targets, 4));
            return t.add(tce, t.scale(cce, 0.5));
        },
        store.all());

    // Full training loss of a small two-layer model on a 4x4 grid, one
    // conditional and one unconditional row.
    ArConfig ac;
    ac.n1 = 5;
    ac.n2 = 6;
    ac.n_classes = 3;
    ac.side = 4;
    ac.d_model = 8;
    ac.n_layers = 2;
    ac.n_heads = 2;
    ac.head_layers = 1;
    ac.d_s = 4;
    ac.d_d = 4;
    ac.d_compress = 3;
    ac.batch = 2;
    ac.seed = 707;
    ArModel model(ac);
    redraw_params(model, 97);
    const auto grids = random_token_grids(ac, 2, 31);
    const std::vector<int> labels = {grids[0].label, ac.n_classes};
    const auto r4 = grad_check(
        [&](Tape& t) { return model.build_forward(t, grids, labels).loss; }, model.params(), 1e-5,
        7, 1e-5);

    const bool pass = r1.max_rel_err < 1e-4 && r2.max_rel_err < 1e-4 && r3.max_rel_err < 1e-4 &&
                      r4.max_rel_err < 1e-4 && r1.max_abs_grad > 0 && r2.max_abs_grad > 0 &&
                      r3.max_abs_grad > 0 && r4.max_abs_grad > 0;
    return {pass, stamp("max relative error vs central differences: coarse commitment %.2e, "
                        "refinement commitment %.2e, token+cluster loss %.2e, "
                        "sequence-model loss %.2e (bound 1e-4)",
                        r1.max_rel_err, r2.max_rel_err, r3.max_rel_err, r4.max_rel_err)};
}

// --- 6: two-stage factorization normalizes and reacts to the coarse choice ---

Outcome crit_hierarchical_normalization() {
    ArConfig ac;
    ac.n1 = 6;
    ac.n2 = 5;
    ac.n_classes = 4;
    ac.side = 3;
    ac.d_model = 8;
    ac.n_layers = 2;
    ac.n_heads = 2;
    ac.head_layers = 1;
    ac.d_s = 4;
    ac.d_d = 4;
    ac.d_compress = 3;
    ac.batch = 2;
    ac.seed = 606;
    ArModel model(ac);
    redraw_params(model, 607);

    ArInference inf(model, 1);
    Rng rng(608);
    double worst_total = 0.0, best_spread = 0.0;
    for (int p = 0; p < ac.tokens(); ++p) {
        const auto sem = inf.semantic_logits();
        const auto sem_p = softmax_of(sem);
        double total = 0.0;
        std::vector<double> first;
        for (int k = 0; k < ac.n1; ++k) {
            const auto det = inf.detail_logits(k);
            for (double v : det)
                if (!std::isfinite(v)) return {false, stamp("non-finite detail logit at position %d", p)};
            const auto det_p = softmax_of(det);
            total += sem_p[k] * std::accumulate(det_p.begin(), det_p.end(), 0.0);
            if (k == 0)
                first = det;
            else
                best_spread = std::max(best_spread, max_abs_diff(first, det));
        }
        worst_total = std::max(worst_total, std::abs(total - 1.0));
        if (std::abs(total - 1.0) > 1e-6)
            return {false, stamp("position %d: sum_k p(k) sum_j p(j|k) = %.9f", p, total)};
        inf.advance({static_cast<uint16_t>(rng.range(ac.n1)),
                     static_cast<uint16_t>(rng.range(ac.n2))});
    }
    if (best_spread <= 1e-9)
        return {false, "detail logits ignore the coarse index everywhere"};
    return {true, stamp("all %d positions: |sum_k p(k) sum_j p(j|k) - 1| <= %.1e; "
                        "detail logits move with the coarse index (max spread %.3f)",
                        ac.tokens(), worst_total, best_spread)};
}

// --- 7: guidance degeneracies -------------------------------------------------

Outcome crit_guidance_degeneracies() {
    const GuidanceSchedule ramp{1.75, 3.0, 576};
    const double lo = progressive_scale(ramp, 0), hi = progressive_scale(ramp, 576);
    if (lo != 1.75 || hi != 3.0)
        return {false, stamp("ramp endpoints %.17g / %.17g are not exact", lo, hi)};

    ArConfig ac;
    ac.n1 = 6;
    ac.n2 = 5;
    ac.n_classes = 4;
    ac.side = 3;
    ac.d_model = 8;
    ac.n_layers = 2;
    ac.n_heads = 2;
    ac.head_layers = 1;
    ac.d_s = 4;
    ac.d_d = 4;
    ac.d_compress = 3;
    ac.batch = 2;
    ac.seed = 717;
    ArModel model(ac);
    redraw_params(model, 718);

    // Flat schedule, guidance off: every step must equal a hand-computed
    // fixed-scale blend of the two branches.
    SamplerConfig flat;
    flat.seed = 5;
    flat.schedule = {2.25, 2.25, 1};
    GenTrace trace;
    const TokenGrid grid = generate(model, 1, flat, &trace);
    ArInference cond(model, 1), uncond(model, ac.n_classes);
    double worst = 0.0;
    for (int p = 0; p < ac.tokens(); ++p) {
        const auto blend_s = cfg_blend(uncond.semantic_logits(), cond.semantic_logits(), 2.25);
        worst = std::max(worst, max_abs_diff(blend_s, trace.sem_logits[p]));
        const int k = grid.codes[p].semantic;
        const auto blend_d = cfg_blend(uncond.detail_logits(k), cond.detail_logits(k), 2.25);
        worst = std::max(worst, max_abs_diff(blend_d, trace.det_logits[p]));
        cond.advance(grid.codes[p]);
        uncond.advance(grid.codes[p]);
    }
    if (worst > 1e-12)
        return {false, stamp("flat-schedule blend deviates from fixed scale by %.2e", worst)};

    // Attention multiplier saturated at its floor of 1: identical to the
    // unguided run, step by step.
    SamplerConfig guided = flat;
    guided.attention_guided = true;
    guided.alpha_floor = 1.0;
    GenTrace gtrace;
    const TokenGrid ggrid = generate(model, 1, guided, &gtrace);
    double worst_g = 0.0;
    for (int p = 0; p < ac.tokens(); ++p) {
        if (!(ggrid.codes[p] == grid.codes[p]))
            return {false, stamp("saturated guidance changed the sampled code at position %d", p)};
        if (gtrace.scales[p] != trace.scales[p])
            return {false, stamp("saturated guidance changed the scale at position %d", p)};
        worst_g = std::max(worst_g, max_abs_diff(gtrace.sem_logits[p], trace.sem_logits[p]));
        worst_g = std::max(worst_g, max_abs_diff(gtrace.det_logits[p], trace.det_logits[p]));
    }
    if (worst_g > 1e-12)
        return {false, stamp("saturated guidance deviates from fixed scale by %.2e", worst_g)};
    return {true, stamp("ramp endpoints exact at 1.75 / 3.0; flat schedule matches fixed blend "
                        "within %.1e; floor-saturated guidance matches within %.1e",
                        worst, worst_g)};
}

// --- 8: reconstruction improves with capacity and with the second book --------

Outcome crit_capacity_trend() {
    SyntheticWorld world{WorldConfig{}};
    Rng rng(808);
    const auto grids = world.generate(96, rng);
    const Matrix patches = flatten_grids(grids);

    const int sizes[] = {16, 64, 256, 1024};
    double mse[4];
    for (int i = 0; i < 4; ++i) {
        VqConfig c;
        c.n1 = sizes[i];
        c.n2 = 0;
        c.dim = 8;
        c.seed = 11;
        VqModel m(c);
        m.train_stage1(patches, 800);
        mse[i] = m.recon_mse(patches);
    }
    for (int i = 1; i < 4; ++i)
        if (mse[i] > 0.98 * mse[i - 1])
            return {false, stamp("size %d -> %d did not improve by 2%%: %.6f -> %.6f", sizes[i - 1],
                                 sizes[i], mse[i - 1], mse[i])};

    VqConfig dc;
    dc.n1 = 16;
    dc.n2 = 64;
    dc.dim = 8;
    dc.seed = 11;
    VqModel dual(dc);
    dual.train_stage1(patches, 400);
    dual.train_stage2(patches, 400);
    const double dual_mse = dual.recon_mse(patches);

    VqConfig sc;
    sc.n1 = 80;
    sc.n2 = 0;
    sc.dim = 8;
    sc.seed = 11;
    VqModel single(sc);
    single.train_stage1(patches, 800);
    const double single_mse = single.recon_mse(patches);

    if (dual_mse > 0.98 * single_mse)
        return {false, stamp("two-book (16,64) %.6f not 2%% under one-book (80) %.6f", dual_mse,
                             single_mse)};
    return {true, stamp("one-book MSE %.4f / %.4f / %.4f / %.4f for sizes 16/64/256/1024 "
                        "(every step >= 2%% better); two-book (16,64) %.4f vs one-book (80) %.4f "
                        "at matched budget",
                        mse[0], mse[1], mse[2], mse[3], dual_mse, single_mse)};
}

// --- 9: decoded error grows with replacement-code distance --------------------

Outcome crit_code_distance() {
    SyntheticWorld world{WorldConfig{}};
    Rng rng(29);
    const auto grids = world.generate(20, rng);
    VqConfig c;
    c.n1 = 8;
    c.n2 = 16;
    c.seed = 21;
    VqModel model(c);
    const Matrix patches = flatten_grids(grids);
    model.train_stage1(patches, 150);
    model.train_stage2(patches, 90);

    const std::vector<int> ranks = {0, 1, 2, 4, 8, 16, 32, 64, 127};
    const auto rows = code_distance_experiment(model, grids, ranks);
    std::vector<double> xs, ys;
    for (const auto& row : rows) {
        xs.push_back(static_cast<double>(row.rank));
        ys.push_back(row.mse);
    }
    const double rho = spearman(xs, ys);
    const int64_t trials = static_cast<int64_t>(grids.size()) * grids.front().patches.rows;
    if (rho < 0.9)
        return {false, stamp("rank/error Spearman correlation %.3f < 0.9", rho)};
    return {true, stamp("Spearman(rank, decoded MSE) = %.3f over %lld replacements per rank "
                        "(9 ranks, 0..127)",
                        rho, static_cast<long long>(trials))};
}

// --- 10: end-to-end smoke ------------------------------------------------------

Outcome crit_end_to_end() {
    SyntheticWorld world{WorldConfig{}};
    Rng rng(5);
    const auto grids = world.generate(512, rng);
    const Matrix patches = flatten_grids(grids);

    VqConfig vc;
    vc.n1 = 16;
    vc.n2 = 64;
    vc.dim = 8;
    vc.seed = 11;
    VqModel vq(vc);
    vq.train_stage1(patches, 400);
    vq.train_stage2(patches, 400);

    const auto tokens = tokenize_dataset(vq, grids);
    const std::vector<TokenGrid> train_set(tokens.begin(), tokens.begin() + 448);
    const std::vector<TokenGrid> val_set(tokens.begin() + 448, tokens.end());

    ArConfig ac;
    ac.n1 = 16;
    ac.n2 = 64;
    ac.n_classes = 8;
    ac.side = 8;
    ac.d_model = 88;
    ac.n_layers = 3;
    ac.n_heads = 4;
    ac.head_layers = 2;
    ac.d_s = 44;
    ac.d_d = 44;
    ac.d_compress = 22;
    ac.batch = 4;
    ac.seed = 3;
    ac.opt.lr = 3e-4;
    ac.opt.weight_decay = 0.01;
    ArModel model(ac);
    const size_t n_params = model.param_scalars();

    const ArEval init = model.evaluate(val_set);
    model.train(train_set, val_set, 2000, 2000);
    const ArEval fin = model.evaluate(val_set);
    const double drop = 1.0 - fin.nll / init.nll;

    SamplerConfig sc;
    sc.seed = 1;
    sc.schedule = {1.75, 3.0, 1};
    std::vector<int> labels(512);
    for (int i = 0; i < 512; ++i) labels[i] = i % 8;
    const auto fixed = generate_many(model, labels, sc);
    int fixed_hits = 0;
    for (size_t i = 0; i < fixed.size(); ++i)
        if (world.classify_grid(decode_grid(vq, fixed[i])) == labels[i]) ++fixed_hits;
    const double fixed_acc = fixed_hits / 512.0;

    SamplerConfig pg = sc;
    pg.attention_guided = true;
    const auto guided = generate_many(model, labels, pg);
    int guided_hits = 0;
    for (size_t i = 0; i < guided.size(); ++i)
        if (world.classify_grid(decode_grid(vq, guided[i])) == labels[i]) ++guided_hits;
    const double guided_acc = guided_hits / 512.0;

    // Class accuracy of guided sampling is reported alongside, not gated:
    // the two schemes are expected to be close at this scale.
    const bool pass = drop >= 0.20 && fin.sem_acc > 5.0 / 16.0 && fixed_acc > 5.0 / 8.0;
    return {pass, stamp("%zu params, 2000 steps: val NLL %.3f -> %.3f (drop %.1f%%, need >= 20%%); "
                        "coarse top-1 %.3f (need > 0.3125); generated class accuracy %.3f fixed "
                        "(need > 0.625) / %.3f attention-guided (reported)",
                        n_params, init.nll, fin.nll, 100.0 * drop, fin.sem_acc, fixed_acc,
                        guided_acc)};
}

// --- 11: refinement-stage update interleave ------------------------------------

Outcome crit_stage_interleave() {
    Rng rng(1101);
    const Matrix patches = random_matrix(256, 8, rng);
    VqConfig c;
    c.n1 = 8;
    c.n2 = 16;
    c.dim = 8;
    c.seed = 1102;
    VqModel model(c);
    model.train_stage1(patches, 30);

    model.train_stage2(patches, 9);
    const auto check = [&](int expect) -> std::string {
        const auto& log = model.schedule().log;
        if (static_cast<int>(log.size()) != expect)
            return stamp("schedule logged %zu updates, want %d", log.size(), expect);
        for (int i = 0; i < expect; ++i) {
            const VqUpdateKind want =
                i % 3 == 2 ? VqUpdateKind::semantic_only : VqUpdateKind::joint;
            if (log[i] != want) return stamp("update %d has the wrong kind", i);
        }
        return {};
    };
    if (auto err = check(9); !err.empty()) return {false, err};
    if (model.schedule().joint_count() != 6 || model.schedule().semantic_count() != 3)
        return {false, stamp("counts %d joint / %d semantic after 9 updates, want 6 / 3",
                             model.schedule().joint_count(), model.schedule().semantic_count())};

    // A second call continues the same cycle position instead of restarting.
    model.train_stage2(patches, 5);
    if (auto err = check(14); !err.empty()) return {false, err};
    return {true, "9 then 14 logged updates follow joint, joint, semantic-only exactly; "
                  "counts 6/3 after three full cycles"};
}

// --- 12: byte-stable artifacts and reproducible dumps ---------------------------

Outcome crit_determinism(const std::string& work_dir) {
    const auto resave_equal = [&](const std::string& a, const std::string& b) {
        return fnv1a_file(a) == fnv1a_file(b);
    };
    const auto path = [&](const char* name) { return work_dir + "/" + name; };

    SyntheticWorld world{WorldConfig{}};
    Rng rng(1201);
    const auto grids = world.generate(8, rng);
    save_dataset(path("c12_data_a.bin"), grids, world.config().n_classes);
    const Dataset ds = load_dataset(path("c12_data_a.bin"));
    save_dataset(path("c12_data_b.bin"), ds.grids, ds.n_classes);
    if (!resave_equal(path("c12_data_a.bin"), path("c12_data_b.bin")))
        return {false, "dataset bytes changed across save/load/save"};

    const Codebook book(random_matrix(12, 5, rng));
    save_codebook(book, path("c12_book_a.bin"));
    save_codebook(load_codebook(path("c12_book_a.bin")), path("c12_book_b.bin"));
    if (!resave_equal(path("c12_book_a.bin"), path("c12_book_b.bin")))
        return {false, "codebook bytes changed across save/load/save"};

    const Permutation perm{{2, 0, 3, 1}, {1, 3, 0, 2}};
    save_permutation(perm, path("c12_perm_a.bin"));
    save_permutation(load_permutation(path("c12_perm_a.bin")), path("c12_perm_b.bin"));
    if (!resave_equal(path("c12_perm_a.bin"), path("c12_perm_b.bin")))
        return {false, "permutation bytes changed across save/load/save"};

    VqConfig vc;
    vc.n1 = 8;
    vc.n2 = 16;
    vc.dim = 8;
    vc.seed = 77;
    VqModel vq(vc);
    const Matrix patches = random_matrix(128, 8, rng);
    vq.train_stage1(patches, 12);
    vq.train_stage2(patches, 6);
    vq.save(path("c12_vq_a.bin"));
    VqModel vq2 = VqModel::load(path("c12_vq_a.bin"));
    vq2.save(path("c12_vq_b.bin"));
    if (!resave_equal(path("c12_vq_a.bin"), path("c12_vq_b.bin")))
        return {false, "quantizer checkpoint bytes changed across save/load/save"};

    ArConfig ac;
    ac.n1 = 6;
    ac.n2 = 5;
    ac.n_classes = 4;
    ac.side = 3;
    ac.d_model = 8;
    ac.n_layers = 2;
    ac.n_heads = 2;
    ac.head_layers = 1;
    ac.d_s = 4;
    ac.d_d = 4;
    ac.d_compress = 3;
    ac.batch = 2;
    ac.seed = 99;
    ArModel model(ac);
    const auto token_grids = random_token_grids(ac, 4, 1203);
    model.train(std::span(token_grids).first(3), std::span(token_grids).last(1), 3, 3);
    model.save(path("c12_ar_a.bin"));
    ArModel model2 = ArModel::load(path("c12_ar_a.bin"));
    model2.save(path("c12_ar_b.bin"));
    if (!resave_equal(path("c12_ar_a.bin"), path("c12_ar_b.bin")))
        return {false, "sequence-model checkpoint bytes changed across save/load/save"};

    // Same seed and config through a checkpoint round trip: identical dumps.
    SamplerConfig sc;
    sc.seed = 9;
    sc.schedule = {1.75, 3.0, 1};
    const std::vector<int> labels = {0, 1, 2};
    SampleDump dump_a{ac.side, 0, generate_many(model, labels, sc), {}};
    SampleDump dump_b{ac.side, 0, generate_many(model2, labels, sc), {}};
    save_samples(path("c12_dump_a.bin"), dump_a);
    save_samples(path("c12_dump_b.bin"), dump_b);
    if (!resave_equal(path("c12_dump_a.bin"), path("c12_dump_b.bin")))
        return {false, "identical seed and config produced different sample dumps"};
    const SampleDump reloaded = load_samples(path("c12_dump_a.bin"));
    save_samples(path("c12_dump_c.bin"), reloaded);
    if (!resave_equal(path("c12_dump_a.bin"), path("c12_dump_c.bin")))
        return {false, "sample dump bytes changed across save/load/save"};

    return {true, "dataset, codebook, permutation, both checkpoints and sample dumps are "
                  "byte-stable; same seed+config reproduces the dump through a checkpoint "
                  "round trip"};
}

const char* criterion_name(int id) {
    switch (id) {
        case 1: return "quantizer-argmin-oracle";
        case 2: return "balanced-clustering";
        case 3: return "rearrangement-block-invariant";
        case 4: return "cluster-ce-oracle";
        case 5: return "gradient-checks";
        case 6: return "hierarchical-normalization";
        case 7: return "guidance-degeneracies";
        case 8: return "capacity-trend";
        case 9: return "code-distance-robustness";
        case 10: return "end-to-end-smoke";
        case 11: return "stage-interleave";
        case 12: return "determinism-and-formats";
        default: return nullptr;
    }
}

}  // namespace

CriterionResult run_criterion(int id, const std::string& work_dir) {
    const char* name = criterion_name(id);
    SDAR_CHECK(name != nullptr, "acceptance: criterion id out of range");
    CriterionResult r;
    r.id = id;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        Outcome o;
        switch (id) {
            case 1: o = crit_quantizer_oracle(); break;
            case 2: o = crit_balanced_clustering(); break;
            case 3: o = crit_rearrangement(); break;
            case 4: o = crit_cluster_ce(); break;
            case 5: o = crit_gradients(); break;
            case 6: o = crit_hierarchical_normalization(); break;
            case 7: o = crit_guidance_degeneracies(); break;
            case 8: o = crit_capacity_trend(); break;
            case 9: o = crit_code_distance(); break;
            case 10: o = crit_end_to_end(); break;
            case 11: o = crit_stage_interleave(); break;
            case 12: o = crit_determinism(work_dir); break;
        }
        r.pass = o.pass;
        r.detail = std::move(o.detail);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = stamp("exception: %s", e.what());
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

std::vector<CriterionResult> run_criteria(std::span<const int> ids, const std::string& work_dir) {
    std::vector<CriterionResult> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(run_criterion(id, work_dir));
    return out;
}

std::vector<int> selftest_ids() { return {1, 2, 3, 4, 5, 6, 7, 11, 12}; }

std::string format_criterion(const CriterionResult& r) {
    return stamp("[%s] %2d %-30s %6.1fs  %s", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str(),
                 r.seconds, r.detail.c_str());
}

}  // namespace sdar
