#include "sdar/armodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sdar/rng.hpp"
#include "sdar/tensor_file.hpp"

namespace sdar {

namespace {

constexpr uint64_t kArInitStream = 0xA1;
constexpr uint64_t kArStepStream = 0xA2;

// Must match the tape kernels bit for bit; the incremental decoder is pinned
// to the teacher-forced path by test.
constexpr double kRmsEps = 1e-6;
constexpr double kInvSqrt2 = 0.70710678118654752440;

Var mlp2(Tape& t, Var x, Var w1, Var b1, Var w2, Var b2) {
    return t.add_row(t.matmul(t.gelu(t.add_row(t.matmul(x, w1), b1)), w2), b2);
}

std::vector<double> vec_matmul(std::span<const double> x, const Matrix& w) {
    SDAR_CHECK(static_cast<int>(x.size()) == w.rows, "vec_matmul: width mismatch");
    std::vector<double> out(static_cast<size_t>(w.cols), 0.0);
    for (int r = 0; r < w.rows; ++r) axpy(x[static_cast<size_t>(r)], w.row(r), out);
    return out;
}

void add_in(std::span<double> y, std::span<const double> x) { axpy(1.0, x, y); }

std::vector<double> rmsnorm_vec(std::span<const double> x, const Matrix& gain) {
    const int c = static_cast<int>(x.size());
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double rms = std::sqrt(ss / c + kRmsEps);
    std::vector<double> out(x.size());
    for (int i = 0; i < c; ++i) out[i] = x[i] / rms * gain.at(0, i);
    return out;
}

void gelu_in(std::span<double> x) {
    for (double& v : x) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
}

std::vector<double> mlp2_vec(std::span<const double> x, const Matrix& w1, const Matrix& b1,
                             const Matrix& w2, const Matrix& b2) {
    std::vector<double> h = vec_matmul(x, w1);
    add_in(h, b1.row(0));
    gelu_in(h);
    std::vector<double> out = vec_matmul(h, w2);
    add_in(out, b2.row(0));
    return out;
}

}  // namespace

int ArConfig::seq_len() const {
    return fused() ? l_c + tokens() - 1 : l_c + 2 * tokens() - 1;
}

void ArConfig::validate() const {
    SDAR_CHECK(n1 > 0 && n2 >= 0 && n_classes > 0, "vocabulary sizes must be positive");
    SDAR_CHECK(side >= 2, "token grid side must be at least 2");
    SDAR_CHECK(l_c > 0, "condition prefix must be non-empty");
    SDAR_CHECK(d_model > 0 && n_layers > 0 && n_heads > 0 && head_layers > 0,
               "backbone dimensions must be positive");
    SDAR_CHECK(d_model % n_heads == 0, "d_model must divide into heads");
    SDAR_CHECK(d_model % 4 == 0, "2D position encoding needs d_model divisible by 4");
    SDAR_CHECK(d_s > 0 && d_compress > 0, "embedding widths must be positive");
    SDAR_CHECK(n2 == 0 || d_d > 0, "detail embedding width must be positive");
    SDAR_CHECK(k >= 3 && k % 2 == 1, "window side must be odd and at least 3");
    SDAR_CHECK(lambda_s >= 0.0 && lambda_cce >= 0.0, "loss weights must be nonnegative");
    SDAR_CHECK(n_clusters == 0 || (n_clusters > 0 && n1 % n_clusters == 0),
               "cluster count must divide the vocabulary");
    SDAR_CHECK(lambda_cce == 0.0 || (n2 == 0 && n_clusters > 0),
               "cluster-level loss applies to the single-codebook path only");
    SDAR_CHECK(class_dropout >= 0.0 && class_dropout < 1.0, "class dropout must be in [0, 1)");
    SDAR_CHECK(fused() || n2 > 0, "split token layouts need a detail vocabulary");
    SDAR_CHECK(batch > 0, "batch must be positive");
    SDAR_CHECK(opt.lr > 0.0, "learning rate must be positive");
}

std::vector<int> window_slots(int center, int side, int k) {
    SDAR_CHECK(k >= 1 && k % 2 == 1, "window side must be odd");
    SDAR_CHECK(center >= 0 && center < side * side, "window center off the grid");
    const int h = k / 2;
    const int r0 = center / side;
    const int c0 = center % side;
    std::vector<int> slots;
    slots.reserve(static_cast<size_t>(k) * k - 1);
    for (int dr = -h; dr <= h; ++dr) {
        for (int dc = -h; dc <= h; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const int r = r0 + dr;
            const int c = c0 + dc;
            const int p = r * side + c;
            const bool causal = r >= 0 && r < side && c >= 0 && c < side && p < center;
            slots.push_back(causal ? p : -1);
        }
    }
    return slots;
}

Matrix grid_position_encoding(int side, int d_model) {
    SDAR_CHECK(side > 0, "grid side must be positive");
    SDAR_CHECK(d_model > 0 && d_model % 4 == 0, "d_model must be divisible by 4");
    const int half = d_model / 2;
    Matrix out(side * side, d_model);
    for (int p = 0; p < out.rows; ++p) {
        const double coord[2] = {static_cast<double>(p / side), static_cast<double>(p % side)};
        for (int axis = 0; axis < 2; ++axis) {
            double* row = out.row_ptr(p) + axis * half;
            for (int t = 0; t < half / 2; ++t) {
                const double w = std::pow(10000.0, -2.0 * t / half);
                row[2 * t] = std::sin(coord[axis] * w);
                row[2 * t + 1] = std::cos(coord[axis] * w);
            }
        }
    }
    return out;
}

ArModel::ArModel(const ArConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng init(derive_seed(cfg_.seed, kArInitStream));
    const int d = cfg_.d_model;
    const bool dual = cfg_.n2 > 0;

    auto wmat = [&](const std::string& name, int r, int c) {
        Matrix m(r, c);
        for (double& v : m.data) v = 0.02 * init.normal();
        params_.create(name, std::move(m));
    };
    auto bias = [&](const std::string& name, int c) { params_.create(name, Matrix(1, c), false); };
    auto gain = [&](const std::string& name) { params_.create(name, Matrix(1, d, 1.0), false); };
    auto block = [&](const std::string& p) {
        gain(p + ".norm1.g");
        wmat(p + ".attn.wq", d, d);
        wmat(p + ".attn.wk", d, d);
        wmat(p + ".attn.wv", d, d);
        wmat(p + ".attn.wo", d, d);
        gain(p + ".norm2.g");
        wmat(p + ".ffn.w1", d, 4 * d);
        bias(p + ".ffn.b1", 4 * d);
        wmat(p + ".ffn.w2", 4 * d, d);
        bias(p + ".ffn.b2", d);
    };

    // Every paradigm's parameters exist in every model so the checkpoint
    // manifest depends only on the vocabulary/shape fields; parameters a
    // layout never touches keep empty gradients and the optimizer skips
    // them.
    wmat("emb.semantic", cfg_.n1, cfg_.d_s);
    if (dual) wmat("emb.detail", cfg_.n2, cfg_.d_d);
    wmat("fuse.w1", cfg_.d_s + (dual ? cfg_.d_d : 0), d);
    bias("fuse.b1", d);
    wmat("fuse.w2", d, d);
    bias("fuse.b2", d);
    wmat("cond.table", cfg_.n_classes + 1, d);  // last row drives unconditional passes
    wmat("prefix.pos", cfg_.l_c, d);
    wmat("stream.pos", 2, d);
    wmat("alt.proj_s", cfg_.d_s, d);
    if (dual) wmat("alt.proj_d", cfg_.d_d, d);
    for (int i = 0; i < cfg_.n_layers; ++i) block("bb" + std::to_string(i));
    gain("bb.final.g");
    wmat("ctx.pad", 1, d);
    wmat("ctx.compress.w", d, cfg_.d_compress);
    bias("ctx.compress.b", cfg_.d_compress);
    wmat("ctx.ffn.w1", cfg_.slots() * cfg_.d_compress, d);
    bias("ctx.ffn.b1", d);
    wmat("ctx.ffn.w2", d, d);
    bias("ctx.ffn.b2", d);
    wmat("head.inject.w", cfg_.d_s, d);
    wmat("head.pos", 3, d);
    for (int i = 0; i < cfg_.head_layers; ++i) block("hd" + std::to_string(i));
    gain("hd.final.g");
    wmat("smlp.w1", d, d);
    bias("smlp.b1", d);
    wmat("smlp.w2", d, cfg_.n1);
    bias("smlp.b2", cfg_.n1);
    if (dual) {
        wmat("dmlp.w1", d, d);
        bias("dmlp.b1", d);
        wmat("dmlp.w2", d, cfg_.n2);
        bias("dmlp.b2", cfg_.n2);
    }

    opt_ = std::make_unique<AdamW>(cfg_.opt);
    grid_pos_ = grid_position_encoding(cfg_.side, d);
}

Var ArModel::pv(Tape& t, const std::string& name) {
    Parameter* p = params_.find(name);
    SDAR_CHECK(p != nullptr, "unknown parameter " + name);
    return t.param(*p);
}

const Matrix& ArModel::weight(const std::string& name) const {
    const Parameter* p = params_.find(name);
    SDAR_CHECK(p != nullptr, "unknown parameter " + name);
    return p->value;
}

Var ArModel::transformer_stack(Tape& t, Var x, int group_len, const std::string& prefix,
                               int layers, std::vector<AttentionRecord>* attn) {
    if (attn) attn->reserve(attn->size() + static_cast<size_t>(layers));
    for (int i = 0; i < layers; ++i) {
        const std::string p = prefix + std::to_string(i);
        Var n1 = t.rmsnorm(x, pv(t, p + ".norm1.g"));
        Var q = t.matmul(n1, pv(t, p + ".attn.wq"));
        Var k = t.matmul(n1, pv(t, p + ".attn.wk"));
        Var v = t.matmul(n1, pv(t, p + ".attn.wv"));
        AttentionRecord* rec = nullptr;
        if (attn) {
            attn->emplace_back();
            rec = &attn->back();
        }
        Var a = t.attention(q, k, v, group_len, cfg_.n_heads, rec);
        x = t.add(x, t.matmul(a, pv(t, p + ".attn.wo")));
        Var n2 = t.rmsnorm(x, pv(t, p + ".norm2.g"));
        Var f = mlp2(t, n2, pv(t, p + ".ffn.w1"), pv(t, p + ".ffn.b1"),
                     pv(t, p + ".ffn.w2"), pv(t, p + ".ffn.b2"));
        x = t.add(x, f);
    }
    return x;
}

ArForward ArModel::build_forward(Tape& t, std::span<const TokenGrid> grids,
                                 std::span<const int> labels,
                                 std::vector<AttentionRecord>* attn) {
    SDAR_CHECK(!grids.empty(), "empty batch");
    SDAR_CHECK(grids.size() == labels.size(), "one label per grid");
    const int m = cfg_.tokens();
    for (size_t i = 0; i < grids.size(); ++i) {
        SDAR_CHECK(grids[i].side == cfg_.side, "grid side mismatch");
        SDAR_CHECK(static_cast<int>(grids[i].codes.size()) == m, "token count mismatch");
        SDAR_CHECK(labels[i] >= 0 && labels[i] <= cfg_.n_classes, "label out of range");
        for (const DualCode& c : grids[i].codes) {
            SDAR_CHECK(c.semantic < cfg_.n1, "semantic code out of range");
            SDAR_CHECK(cfg_.n2 == 0 ? c.detail == 0 : c.detail < cfg_.n2,
                       "detail code out of range");
        }
    }
    return cfg_.fused() ? forward_fused(t, grids, labels, attn)
                        : forward_split(t, grids, labels, attn);
}

ArForward ArModel::forward_fused(Tape& t, std::span<const TokenGrid> grids,
                                 std::span<const int> labels,
                                 std::vector<AttentionRecord>* attn) {
    const int B = static_cast<int>(grids.size());
    const int m = cfg_.tokens();
    const int L = cfg_.seq_len();
    const int S = cfg_.slots();
    const int lc = cfg_.l_c;
    const bool dual = cfg_.n2 > 0;

    ArForward f;
    f.sem_targets.resize(static_cast<size_t>(B) * m);
    if (dual) f.det_targets.resize(static_cast<size_t>(B) * m);
    for (int s = 0; s < B; ++s)
        for (int p = 0; p < m; ++p) {
            f.sem_targets[static_cast<size_t>(s) * m + p] = grids[s].codes[p].semantic;
            if (dual) f.det_targets[static_cast<size_t>(s) * m + p] = grids[s].codes[p].detail;
        }

    // Fused embeddings for the input tokens 0..m-2; the last token is only
    // ever a target.
    std::vector<int> in_sem(static_cast<size_t>(B) * (m - 1));
    std::vector<int> in_det(dual ? in_sem.size() : 0);
    for (int s = 0; s < B; ++s)
        for (int q = 0; q + 1 < m; ++q) {
            in_sem[static_cast<size_t>(s) * (m - 1) + q] = grids[s].codes[q].semantic;
            if (dual) in_det[static_cast<size_t>(s) * (m - 1) + q] = grids[s].codes[q].detail;
        }
    Var fin = t.gather_rows(pv(t, "emb.semantic"), in_sem);
    if (dual) fin = t.concat_cols(fin, t.gather_rows(pv(t, "emb.detail"), in_det));
    Var fused = mlp2(t, fin, pv(t, "fuse.w1"), pv(t, "fuse.b1"), pv(t, "fuse.w2"),
                     pv(t, "fuse.b2"));

    std::vector<int> cidx(static_cast<size_t>(B) * lc);
    for (int s = 0; s < B; ++s)
        for (int j = 0; j < lc; ++j) cidx[static_cast<size_t>(s) * lc + j] = labels[s];
    Var cond = t.gather_rows(pv(t, "cond.table"), cidx);

    // Interleave [cond | tokens] blocks into sample-major sequence order.
    std::vector<int> order(static_cast<size_t>(B) * L);
    for (int s = 0; s < B; ++s)
        for (int pos = 0; pos < L; ++pos)
            order[static_cast<size_t>(s) * L + pos] =
                pos < lc ? s * lc + pos : B * lc + s * (m - 1) + (pos - lc);
    Var seq = t.gather_rows(t.concat_rows(cond, fused), order);

    Matrix tokpos(m - 1, cfg_.d_model);
    for (int q = 0; q + 1 < m; ++q)
        std::copy(grid_pos_.row_ptr(q), grid_pos_.row_ptr(q) + cfg_.d_model, tokpos.row_ptr(q));
    Var pos_table = t.concat_rows(pv(t, "prefix.pos"), t.leaf(std::move(tokpos)));
    Var x = t.add_tiled(seq, pos_table);

    Var hidden = t.rmsnorm(transformer_stack(t, x, L, "bb", cfg_.n_layers, attn),
                           pv(t, "bb.final.g"));

    // The state that predicts token p sits one position earlier.
    std::vector<int> pred(static_cast<size_t>(B) * m);
    for (int s = 0; s < B; ++s)
        for (int p = 0; p < m; ++p)
            pred[static_cast<size_t>(s) * m + p] = s * L + lc - 1 + p;
    Var query = t.gather_rows(hidden, pred);

    // Causal window context: unavailable neighbours read the learned pad
    // row stacked after the hidden states.
    Var padded = t.concat_rows(hidden, pv(t, "ctx.pad"));
    const int pad_row = B * L;
    std::vector<int> slot_idx(static_cast<size_t>(B) * m * S);
    for (int p = 0; p < m; ++p) {
        const std::vector<int> slots = window_slots(p, cfg_.side, cfg_.k);
        for (int s = 0; s < B; ++s)
            for (int ti = 0; ti < S; ++ti)
                slot_idx[(static_cast<size_t>(s) * m + p) * S + ti] =
                    slots[ti] >= 0 ? s * L + lc + slots[ti] : pad_row;
    }
    Var comp = t.gelu(t.add_row(t.matmul(t.gather_rows(padded, slot_idx),
                                         pv(t, "ctx.compress.w")),
                                pv(t, "ctx.compress.b")));
    Var ctx = mlp2(t, t.fold_rows(comp, S), pv(t, "ctx.ffn.w1"), pv(t, "ctx.ffn.b1"),
                   pv(t, "ctx.ffn.w2"), pv(t, "ctx.ffn.b2"));

    // Head sequence per position: [context, state] plus, on the
    // hierarchical path, the true semantic code's embedding whose output
    // carries the detail stage.
    const bool inject = dual && cfg_.paradigm == Paradigm::fused_hierarchical;
    const int hl = inject ? 3 : 2;
    Var stack = t.concat_rows(ctx, query);
    if (inject) {
        Var inj = t.matmul(t.gather_rows(pv(t, "emb.semantic"), f.sem_targets),
                           pv(t, "head.inject.w"));
        stack = t.concat_rows(stack, inj);
    }
    const int n_pos = B * m;
    std::vector<int> horder(static_cast<size_t>(n_pos) * hl);
    for (int i = 0; i < n_pos; ++i)
        for (int slot = 0; slot < hl; ++slot)
            horder[static_cast<size_t>(i) * hl + slot] = slot * n_pos + i;
    Var hpos = pv(t, "head.pos");
    if (hl == 2) hpos = t.gather_rows(hpos, {0, 1});
    Var hx = t.add_tiled(t.gather_rows(stack, horder), hpos);
    Var hh = t.rmsnorm(transformer_stack(t, hx, hl, "hd", cfg_.head_layers, nullptr),
                       pv(t, "hd.final.g"));

    std::vector<int> sidx(static_cast<size_t>(n_pos));
    for (int i = 0; i < n_pos; ++i) sidx[static_cast<size_t>(i)] = i * hl + 1;
    f.sem_logits = mlp2(t, t.gather_rows(hh, sidx), pv(t, "smlp.w1"), pv(t, "smlp.b1"),
                        pv(t, "smlp.w2"), pv(t, "smlp.b2"));
    if (dual) {
        std::vector<int> didx(static_cast<size_t>(n_pos));
        for (int i = 0; i < n_pos; ++i) didx[static_cast<size_t>(i)] = i * hl + (hl - 1);
        f.det_logits = mlp2(t, t.gather_rows(hh, didx), pv(t, "dmlp.w1"), pv(t, "dmlp.b1"),
                            pv(t, "dmlp.w2"), pv(t, "dmlp.b2"));
    }
    return finish_losses(t, std::move(f));
}

ArForward ArModel::forward_split(Tape& t, std::span<const TokenGrid> grids,
                                 std::span<const int> labels,
                                 std::vector<AttentionRecord>* attn) {
    const int B = static_cast<int>(grids.size());
    const int m = cfg_.tokens();
    const int L = cfg_.seq_len();
    const int lc = cfg_.l_c;
    const int d = cfg_.d_model;
    const bool alt = cfg_.paradigm == Paradigm::alternating;

    ArForward f;
    f.sem_targets.resize(static_cast<size_t>(B) * m);
    f.det_targets.resize(static_cast<size_t>(B) * m);
    for (int s = 0; s < B; ++s)
        for (int p = 0; p < m; ++p) {
            f.sem_targets[static_cast<size_t>(s) * m + p] = grids[s].codes[p].semantic;
            f.det_targets[static_cast<size_t>(s) * m + p] = grids[s].codes[p].detail;
        }

    // Inputs: every semantic code plus details 0..m-2; the final detail is
    // only a target in both split layouts.
    std::vector<int> in_sem(static_cast<size_t>(B) * m);
    std::vector<int> in_det(static_cast<size_t>(B) * (m - 1));
    for (int s = 0; s < B; ++s) {
        for (int p = 0; p < m; ++p)
            in_sem[static_cast<size_t>(s) * m + p] = grids[s].codes[p].semantic;
        for (int p = 0; p + 1 < m; ++p)
            in_det[static_cast<size_t>(s) * (m - 1) + p] = grids[s].codes[p].detail;
    }
    Var srows = t.matmul(t.gather_rows(pv(t, "emb.semantic"), in_sem), pv(t, "alt.proj_s"));
    Var drows = t.matmul(t.gather_rows(pv(t, "emb.detail"), in_det), pv(t, "alt.proj_d"));

    std::vector<int> cidx(static_cast<size_t>(B) * lc);
    for (int s = 0; s < B; ++s)
        for (int j = 0; j < lc; ++j) cidx[static_cast<size_t>(s) * lc + j] = labels[s];
    Var cond = t.gather_rows(pv(t, "cond.table"), cidx);

    // Pool rows: [cond | semantic inputs | detail inputs].
    const int sem_base = B * lc;
    const int det_base = sem_base + B * m;
    std::vector<int> order(static_cast<size_t>(B) * L);
    for (int s = 0; s < B; ++s) {
        int* row = order.data() + static_cast<size_t>(s) * L;
        for (int j = 0; j < lc; ++j) row[j] = s * lc + j;
        if (alt) {
            for (int p = 0; p < m; ++p) row[lc + 2 * p] = sem_base + s * m + p;
            for (int p = 0; p + 1 < m; ++p) row[lc + 2 * p + 1] = det_base + s * (m - 1) + p;
        } else {
            for (int p = 0; p < m; ++p) row[lc + p] = sem_base + s * m + p;
            for (int p = 0; p + 1 < m; ++p) row[lc + m + p] = det_base + s * (m - 1) + p;
        }
    }
    Var seq = t.gather_rows(t.concat_rows(cond, t.concat_rows(srows, drows)), order);

    // Each grid cell's fixed encoding appears once per stream; a learned
    // stream row keeps the two occurrences distinguishable.
    Matrix tokpos(2 * m - 1, d);
    std::vector<int> parity(static_cast<size_t>(2 * m - 1));
    for (int pos = lc; pos < L; ++pos) {
        int cell;
        int stream;
        if (alt) {
            cell = (pos - lc) / 2;
            stream = (pos - lc) % 2;
        } else {
            const bool in_sem_block = pos - lc < m;
            cell = in_sem_block ? pos - lc : pos - lc - m;
            stream = in_sem_block ? 0 : 1;
        }
        std::copy(grid_pos_.row_ptr(cell), grid_pos_.row_ptr(cell) + d,
                  tokpos.row_ptr(pos - lc));
        parity[static_cast<size_t>(pos - lc)] = stream;
    }
    Var table1 = t.concat_rows(pv(t, "prefix.pos"), t.leaf(std::move(tokpos)));
    Var table2 = t.concat_rows(t.leaf(Matrix(lc, d)),
                               t.gather_rows(pv(t, "stream.pos"), parity));
    Var x = t.add_tiled(t.add_tiled(seq, table1), table2);

    Var hidden = t.rmsnorm(transformer_stack(t, x, L, "bb", cfg_.n_layers, attn),
                           pv(t, "bb.final.g"));

    std::vector<int> spred(static_cast<size_t>(B) * m);
    std::vector<int> dpred(static_cast<size_t>(B) * m);
    for (int s = 0; s < B; ++s)
        for (int p = 0; p < m; ++p) {
            const size_t i = static_cast<size_t>(s) * m + p;
            if (alt) {
                spred[i] = s * L + lc - 1 + 2 * p;
                dpred[i] = s * L + lc + 2 * p;
            } else {
                spred[i] = s * L + lc - 1 + p;
                dpred[i] = s * L + lc + m - 1 + p;
            }
        }
    f.sem_logits = mlp2(t, t.gather_rows(hidden, spred), pv(t, "smlp.w1"), pv(t, "smlp.b1"),
                        pv(t, "smlp.w2"), pv(t, "smlp.b2"));
    f.det_logits = mlp2(t, t.gather_rows(hidden, dpred), pv(t, "dmlp.w1"), pv(t, "dmlp.b1"),
                        pv(t, "dmlp.w2"), pv(t, "dmlp.b2"));
    return finish_losses(t, std::move(f));
}

ArForward ArModel::finish_losses(Tape& t, ArForward f) {
    Var ce_s = t.cross_entropy(f.sem_logits, f.sem_targets);
    if (cfg_.n2 > 0) {
        Var ce_d = t.cross_entropy(f.det_logits, f.det_targets);
        // The stage weight is uniform across paradigms so ablation gaps
        // come from structure, not loss scale.
        f.loss = t.mean_all(t.add(t.scale(ce_s, cfg_.lambda_s), ce_d));
        f.nll = t.mean_all(t.add(ce_s, ce_d));
    } else {
        f.nll = t.mean_all(ce_s);
        f.loss = f.nll;
        if (cfg_.lambda_cce > 0.0) {
            Var cce = t.cluster_cross_entropy(f.sem_logits, f.sem_targets, cfg_.n_clusters);
            f.loss = t.add(f.nll, t.scale(t.mean_all(cce), cfg_.lambda_cce));
        }
    }
    return f;
}

void ArModel::train(std::span<const TokenGrid> train_set, std::span<const TokenGrid> val_set,
                    int steps, int eval_every, ArTrainLog* log) {
    SDAR_CHECK(!train_set.empty(), "empty training set");
    SDAR_CHECK(steps >= 0, "negative step count");
    SDAR_CHECK(eval_every > 0, "eval interval must be positive");
    std::vector<TokenGrid> batch;
    std::vector<int> labels;
    for (int s = 0; s < steps; ++s) {
        Rng r(derive_seed(cfg_.seed, kArStepStream, static_cast<uint64_t>(train_steps_)));
        batch.clear();
        labels.clear();
        for (int b = 0; b < cfg_.batch; ++b) {
            const auto& g = train_set[static_cast<size_t>(
                r.range(static_cast<int64_t>(train_set.size())))];
            SDAR_CHECK(g.label >= 0 && g.label < cfg_.n_classes, "grid label out of range");
            batch.push_back(g);
            labels.push_back(r.uniform() < cfg_.class_dropout ? cfg_.n_classes : g.label);
        }
        Tape t;
        params_.zero_grads();
        ArForward f = build_forward(t, batch, labels);
        t.backward(f.loss);
        opt_->step(params_.all());
        ++train_steps_;
        if (log) {
            ArTrainPoint pt;
            pt.step = train_steps_;
            pt.train_loss = t.value(f.loss).at(0, 0);
            if (!val_set.empty() && (train_steps_ % eval_every == 0 || s == steps - 1)) {
                const ArEval ev = evaluate(val_set);
                pt.val_nll = ev.nll;
                pt.sem_acc = ev.sem_acc;
                pt.det_acc = ev.det_acc;
            }
            log->points.push_back(pt);
        }
    }
}

ArEval ArModel::evaluate(std::span<const TokenGrid> grids) {
    SDAR_CHECK(!grids.empty(), "empty evaluation set");
    const int m = cfg_.tokens();
    const bool dual = cfg_.n2 > 0;
    double nll_sum = 0.0;
    long sem_hit = 0;
    long det_hit = 0;
    long count = 0;
    std::vector<int> labels;
    for (size_t start = 0; start < grids.size(); start += static_cast<size_t>(cfg_.batch)) {
        const size_t n = std::min(static_cast<size_t>(cfg_.batch), grids.size() - start);
        auto chunk = grids.subspan(start, n);
        labels.clear();
        for (const TokenGrid& g : chunk) labels.push_back(g.label);
        Tape t;
        ArForward f = build_forward(t, chunk, labels);
        const long rows = static_cast<long>(n) * m;
        nll_sum += t.value(f.nll).at(0, 0) * static_cast<double>(rows);
        auto count_hits = [&](Var logits, const std::vector<int>& targets) {
            const Matrix& lv = t.value(logits);
            long hits = 0;
            for (int r = 0; r < lv.rows; ++r) {
                const auto row = lv.row(r);
                const int best = static_cast<int>(
                    std::max_element(row.begin(), row.end()) - row.begin());
                hits += best == targets[static_cast<size_t>(r)];
            }
            return hits;
        };
        sem_hit += count_hits(f.sem_logits, f.sem_targets);
        if (dual) det_hit += count_hits(f.det_logits, f.det_targets);
        count += rows;
    }
    ArEval ev;
    ev.nll = nll_sum / static_cast<double>(count);
    ev.sem_acc = static_cast<double>(sem_hit) / static_cast<double>(count);
    if (dual) ev.det_acc = static_cast<double>(det_hit) / static_cast<double>(count);
    return ev;
}

void ArModel::save(const std::string& path) {
    // Live state is rounded at the boundary so a run that saved and a run
    // that resumed continue from bit-identical values.
    round_state_to_f32(params_.all());
    std::vector<NamedTensor> ts;
    ts.push_back({"meta.kind", Matrix(1, 1, 2.0)});
    Matrix layout(1, 16);
    layout.at(0, 0) = cfg_.n1;
    layout.at(0, 1) = cfg_.n2;
    layout.at(0, 2) = cfg_.n_classes;
    layout.at(0, 3) = cfg_.side;
    layout.at(0, 4) = cfg_.l_c;
    layout.at(0, 5) = cfg_.d_model;
    layout.at(0, 6) = cfg_.n_layers;
    layout.at(0, 7) = cfg_.n_heads;
    layout.at(0, 8) = cfg_.head_layers;
    layout.at(0, 9) = cfg_.d_s;
    layout.at(0, 10) = cfg_.d_d;
    layout.at(0, 11) = cfg_.d_compress;
    layout.at(0, 12) = cfg_.k;
    layout.at(0, 13) = static_cast<double>(cfg_.paradigm);
    layout.at(0, 14) = cfg_.batch;
    layout.at(0, 15) = cfg_.n_clusters;
    ts.push_back({"meta.layout", layout});
    // Bit patterns, not values: the payload is f32 and would round these.
    Matrix hyper(8, 4);
    const double hs[8] = {cfg_.lambda_s,  cfg_.lambda_cce, cfg_.class_dropout,
                          cfg_.opt.lr,    cfg_.opt.beta1,  cfg_.opt.beta2,
                          cfg_.opt.eps,   cfg_.opt.weight_decay};
    for (int i = 0; i < 8; ++i) {
        const auto limbs = encode_f64(hs[i]);
        std::copy(limbs.begin(), limbs.end(), hyper.row_ptr(i));
    }
    ts.push_back({"meta.hyper", hyper});
    ts.push_back({"meta.seed", Matrix::row_vector(encode_u64(cfg_.seed))});
    Matrix progress(1, 2);
    progress.at(0, 0) = static_cast<double>(train_steps_);
    progress.at(0, 1) = static_cast<double>(opt_->steps_taken());
    ts.push_back({"meta.progress", progress});
    append_param_state(ts, params_);
    save_tensors(path, ts);
}

ArModel ArModel::load(const std::string& path) {
    auto ts = load_tensors(path);
    SDAR_CHECK(has_tensor(ts, "meta.kind") && find_tensor(ts, "meta.kind").at(0, 0) == 2.0,
               "not a sequence-model checkpoint");
    const Matrix& layout = find_tensor(ts, "meta.layout");
    const Matrix& hyper = find_tensor(ts, "meta.hyper");
    ArConfig cfg;
    cfg.n1 = static_cast<int>(layout.at(0, 0));
    cfg.n2 = static_cast<int>(layout.at(0, 1));
    cfg.n_classes = static_cast<int>(layout.at(0, 2));
    cfg.side = static_cast<int>(layout.at(0, 3));
    cfg.l_c = static_cast<int>(layout.at(0, 4));
    cfg.d_model = static_cast<int>(layout.at(0, 5));
    cfg.n_layers = static_cast<int>(layout.at(0, 6));
    cfg.n_heads = static_cast<int>(layout.at(0, 7));
    cfg.head_layers = static_cast<int>(layout.at(0, 8));
    cfg.d_s = static_cast<int>(layout.at(0, 9));
    cfg.d_d = static_cast<int>(layout.at(0, 10));
    cfg.d_compress = static_cast<int>(layout.at(0, 11));
    cfg.k = static_cast<int>(layout.at(0, 12));
    cfg.paradigm = static_cast<Paradigm>(static_cast<int>(layout.at(0, 13)));
    cfg.batch = static_cast<int>(layout.at(0, 14));
    cfg.n_clusters = static_cast<int>(layout.at(0, 15));
    cfg.lambda_s = decode_f64(hyper.row(0));
    cfg.lambda_cce = decode_f64(hyper.row(1));
    cfg.class_dropout = decode_f64(hyper.row(2));
    cfg.opt.lr = decode_f64(hyper.row(3));
    cfg.opt.beta1 = decode_f64(hyper.row(4));
    cfg.opt.beta2 = decode_f64(hyper.row(5));
    cfg.opt.eps = decode_f64(hyper.row(6));
    cfg.opt.weight_decay = decode_f64(hyper.row(7));
    cfg.seed = decode_u64(find_tensor(ts, "meta.seed").row(0));
    ArModel model(cfg);
    const Matrix& progress = find_tensor(ts, "meta.progress");
    model.train_steps_ = static_cast<int64_t>(progress.at(0, 0));
    model.opt_->set_steps_taken(static_cast<int64_t>(progress.at(0, 1)));
    restore_param_state(model.params_, ts);
    return model;
}

std::vector<double> ArModel::fuse_embedding(DualCode code) const {
    SDAR_CHECK(code.semantic < cfg_.n1, "semantic code out of range");
    SDAR_CHECK(cfg_.n2 == 0 ? code.detail == 0 : code.detail < cfg_.n2,
               "detail code out of range");
    const Matrix& es = weight("emb.semantic");
    std::vector<double> cat(es.row(code.semantic).begin(), es.row(code.semantic).end());
    if (cfg_.n2 > 0) {
        const Matrix& ed = weight("emb.detail");
        cat.insert(cat.end(), ed.row(code.detail).begin(), ed.row(code.detail).end());
    }
    return mlp2_vec(cat, weight("fuse.w1"), weight("fuse.b1"), weight("fuse.w2"),
                    weight("fuse.b2"));
}

std::vector<double> ArModel::compress_context(
    std::span<const std::vector<double>> slots) const {
    SDAR_CHECK(static_cast<int>(slots.size()) == cfg_.slots(), "wrong slot count");
    const Matrix& cw = weight("ctx.compress.w");
    const Matrix& cb = weight("ctx.compress.b");
    const Matrix& pad = weight("ctx.pad");
    std::vector<double> cat;
    cat.reserve(static_cast<size_t>(cfg_.slots()) * cfg_.d_compress);
    for (const std::vector<double>& s : slots) {
        SDAR_CHECK(s.empty() || static_cast<int>(s.size()) == cfg_.d_model,
                   "slot state width mismatch");
        std::vector<double> comp = vec_matmul(s.empty() ? pad.row(0) : std::span(s), cw);
        add_in(comp, cb.row(0));
        gelu_in(comp);
        cat.insert(cat.end(), comp.begin(), comp.end());
    }
    return mlp2_vec(cat, weight("ctx.ffn.w1"), weight("ctx.ffn.b1"), weight("ctx.ffn.w2"),
                    weight("ctx.ffn.b2"));
}

double PrefixAttention::mean_final_layer() const {
    SDAR_CHECK(mass.rows > 0 && mass.cols > 0, "no attention recorded");
    const auto row = mass.row(mass.rows - 1);
    double sum = 0.0;
    for (double v : row) sum += v;
    return sum / static_cast<double>(mass.cols);
}

ArInference::ArInference(const ArModel& model, int label) : model_(&model) {
    const ArConfig& c = model_->cfg_;
    SDAR_CHECK(c.fused(), "incremental decoding supports the fused layouts");
    SDAR_CHECK(label >= 0 && label <= c.n_classes, "label out of range");
    const int cap = c.l_c + c.tokens();
    kcache_.assign(static_cast<size_t>(c.n_layers), Matrix(cap, c.d_model));
    vcache_ = kcache_;
    outputs_ = Matrix(cap, c.d_model);
    attn_.mass = Matrix(c.n_layers, c.n_heads);
    const Matrix& cond = model_->weight("cond.table");
    const Matrix& ppos = model_->weight("prefix.pos");
    for (int j = 0; j < c.l_c; ++j) {
        std::vector<double> x(cond.row(label).begin(), cond.row(label).end());
        add_in(x, ppos.row(j));
        feed_row(std::move(x));
    }
}

void ArInference::feed_row(std::vector<double> x) {
    const ArConfig& c = model_->cfg_;
    const int d = c.d_model;
    const int heads = c.n_heads;
    const int dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const int row = fed_;
    SDAR_CHECK(row < outputs_.rows, "sequence already complete");
    std::vector<double> scores(static_cast<size_t>(row) + 1);
    for (int li = 0; li < c.n_layers; ++li) {
        const std::string p = "bb" + std::to_string(li);
        const std::vector<double> xn = rmsnorm_vec(x, model_->weight(p + ".norm1.g"));
        const std::vector<double> q = vec_matmul(xn, model_->weight(p + ".attn.wq"));
        Matrix& kc = kcache_[static_cast<size_t>(li)];
        Matrix& vc = vcache_[static_cast<size_t>(li)];
        {
            const std::vector<double> kv = vec_matmul(xn, model_->weight(p + ".attn.wk"));
            const std::vector<double> vv = vec_matmul(xn, model_->weight(p + ".attn.wv"));
            std::copy(kv.begin(), kv.end(), kc.row_ptr(row));
            std::copy(vv.begin(), vv.end(), vc.row_ptr(row));
        }
        std::vector<double> ao(static_cast<size_t>(d), 0.0);
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            double mx = -1e300;
            for (int j = 0; j <= row; ++j) {
                double dot = 0.0;
                const double* kr = kc.row_ptr(j) + off;
                for (int e = 0; e < dh; ++e) dot += q[static_cast<size_t>(off + e)] * kr[e];
                scores[static_cast<size_t>(j)] = dot * sc;
                mx = std::max(mx, scores[static_cast<size_t>(j)]);
            }
            double denom = 0.0;
            for (int j = 0; j <= row; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            double prefix_mass = 0.0;
            for (int j = 0; j <= row; ++j) {
                const double pij = scores[static_cast<size_t>(j)] / denom;
                if (j < c.l_c) prefix_mass += pij;
                const double* vr = vc.row_ptr(j) + off;
                for (int e = 0; e < dh; ++e) ao[static_cast<size_t>(off + e)] += pij * vr[e];
            }
            attn_.mass.at(li, h) = prefix_mass;
        }
        add_in(x, vec_matmul(ao, model_->weight(p + ".attn.wo")));
        const std::vector<double> f =
            mlp2_vec(rmsnorm_vec(x, model_->weight(p + ".norm2.g")),
                     model_->weight(p + ".ffn.w1"), model_->weight(p + ".ffn.b1"),
                     model_->weight(p + ".ffn.w2"), model_->weight(p + ".ffn.b2"));
        add_in(x, f);
    }
    const std::vector<double> out = rmsnorm_vec(x, model_->weight("bb.final.g"));
    std::copy(out.begin(), out.end(), outputs_.row_ptr(row));
    ++fed_;
}

std::vector<double> ArInference::context_vector(int p) const {
    const ArConfig& c = model_->cfg_;
    std::vector<std::vector<double>> slots;
    slots.reserve(static_cast<size_t>(c.slots()));
    for (int q : window_slots(p, c.side, c.k)) {
        if (q >= 0)
            slots.emplace_back(outputs_.row(c.l_c + q).begin(), outputs_.row(c.l_c + q).end());
        else
            slots.emplace_back();
    }
    return model_->compress_context(slots);
}

std::vector<double> ArInference::run_head(const std::vector<double>& ctx,
                                          const std::vector<double>& query,
                                          const std::vector<double>* inject) const {
    const ArConfig& c = model_->cfg_;
    const int d = c.d_model;
    const int heads = c.n_heads;
    const int dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const Matrix& hpos = model_->weight("head.pos");

    std::vector<std::vector<double>> rows;
    rows.push_back(ctx);
    add_in(rows[0], hpos.row(0));
    rows.push_back(query);
    add_in(rows[1], hpos.row(1));
    if (inject) {
        rows.push_back(*inject);
        add_in(rows[2], hpos.row(2));
    }
    const int n = static_cast<int>(rows.size());

    std::vector<double> scores(static_cast<size_t>(n));
    for (int li = 0; li < c.head_layers; ++li) {
        const std::string p = "hd" + std::to_string(li);
        std::vector<std::vector<double>> qs(rows.size()), ks(rows.size()), vs(rows.size());
        for (int i = 0; i < n; ++i) {
            const std::vector<double> xn =
                rmsnorm_vec(rows[static_cast<size_t>(i)], model_->weight(p + ".norm1.g"));
            qs[static_cast<size_t>(i)] = vec_matmul(xn, model_->weight(p + ".attn.wq"));
            ks[static_cast<size_t>(i)] = vec_matmul(xn, model_->weight(p + ".attn.wk"));
            vs[static_cast<size_t>(i)] = vec_matmul(xn, model_->weight(p + ".attn.wv"));
        }
        for (int i = 0; i < n; ++i) {
            std::vector<double> ao(static_cast<size_t>(d), 0.0);
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (int e = 0; e < dh; ++e)
                        dot += qs[static_cast<size_t>(i)][static_cast<size_t>(off + e)] *
                               ks[static_cast<size_t>(j)][static_cast<size_t>(off + e)];
                    scores[static_cast<size_t>(j)] = dot * sc;
                    mx = std::max(mx, scores[static_cast<size_t>(j)]);
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    scores[static_cast<size_t>(j)] =
                        std::exp(scores[static_cast<size_t>(j)] - mx);
                    denom += scores[static_cast<size_t>(j)];
                }
                for (int j = 0; j <= i; ++j) {
                    const double pij = scores[static_cast<size_t>(j)] / denom;
                    for (int e = 0; e < dh; ++e)
                        ao[static_cast<size_t>(off + e)] +=
                            pij * vs[static_cast<size_t>(j)][static_cast<size_t>(off + e)];
                }
            }
            add_in(rows[static_cast<size_t>(i)],
                   vec_matmul(ao, model_->weight(p + ".attn.wo")));
        }
        for (int i = 0; i < n; ++i) {
            const std::vector<double> f =
                mlp2_vec(rmsnorm_vec(rows[static_cast<size_t>(i)],
                                     model_->weight(p + ".norm2.g")),
                         model_->weight(p + ".ffn.w1"), model_->weight(p + ".ffn.b1"),
                         model_->weight(p + ".ffn.w2"), model_->weight(p + ".ffn.b2"));
            add_in(rows[static_cast<size_t>(i)], f);
        }
    }
    return rmsnorm_vec(rows[static_cast<size_t>(n - 1)], model_->weight("hd.final.g"));
}

std::vector<double> ArInference::semantic_logits() {
    const ArConfig& c = model_->cfg_;
    const int p = position();
    SDAR_CHECK(p >= 0 && p < c.tokens(), "sequence already complete");
    const std::vector<double> ctx = context_vector(p);
    const std::vector<double> query(outputs_.row(fed_ - 1).begin(),
                                    outputs_.row(fed_ - 1).end());
    const std::vector<double> hs = run_head(ctx, query, nullptr);
    return mlp2_vec(hs, model_->weight("smlp.w1"), model_->weight("smlp.b1"),
                    model_->weight("smlp.w2"), model_->weight("smlp.b2"));
}

std::vector<double> ArInference::detail_logits(int k) {
    const ArConfig& c = model_->cfg_;
    SDAR_CHECK(c.n2 > 0, "single-codebook model has no detail stage");
    SDAR_CHECK(k >= 0 && k < c.n1, "semantic code out of range");
    const int p = position();
    SDAR_CHECK(p >= 0 && p < c.tokens(), "sequence already complete");
    const std::vector<double> ctx = context_vector(p);
    const std::vector<double> query(outputs_.row(fed_ - 1).begin(),
                                    outputs_.row(fed_ - 1).end());
    std::vector<double> hd;
    if (c.paradigm == Paradigm::fused_hierarchical) {
        const std::vector<double> inj =
            vec_matmul(model_->weight("emb.semantic").row(k), model_->weight("head.inject.w"));
        hd = run_head(ctx, query, &inj);
    } else {
        hd = run_head(ctx, query, nullptr);
    }
    return mlp2_vec(hd, model_->weight("dmlp.w1"), model_->weight("dmlp.b1"),
                    model_->weight("dmlp.w2"), model_->weight("dmlp.b2"));
}

void ArInference::advance(DualCode code) {
    const ArConfig& c = model_->cfg_;
    const int p = position();
    SDAR_CHECK(p >= 0 && p < c.tokens(), "sequence already complete");
    SDAR_CHECK(code.semantic < c.n1, "semantic code out of range");
    SDAR_CHECK(c.n2 == 0 ? code.detail == 0 : code.detail < c.n2, "detail code out of range");
    std::vector<double> x = model_->fuse_embedding(code);
    add_in(x, model_->grid_pos_.row(p));
    feed_row(std::move(x));
}

}  // namespace sdar
