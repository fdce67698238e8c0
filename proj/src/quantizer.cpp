#include "sdar/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "sdar/tensor_file.hpp"

namespace sdar {

namespace {
constexpr uint64_t kInitStream = 0x10;
constexpr uint64_t kStage1Stream = 0x51;
constexpr uint64_t kStage2Stream = 0x52;

NearestResult nearest_row(const Matrix& codes, std::span<const double> query) {
    NearestResult best{0, squared_distance(codes.row(0), query)};
    for (int i = 1; i < codes.rows; ++i) {
        const double d = squared_distance(codes.row(i), query);
        if (d < best.sq_dist) best = {i, d};
    }
    return best;
}

Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}
}  // namespace

SemanticQuant quantize_semantic(const Codebook& semantic, std::span<const double> e) {
    const auto near = nearest_code(semantic, e);
    SemanticQuant out;
    out.index = near.index;
    out.residual.assign(e.begin(), e.end());
    axpy(-1.0, semantic.code(near.index), out.residual);
    return out;
}

DualQuant quantize_dual(const Codebook& semantic, const Codebook& detail,
                        std::span<const double> e) {
    auto s = quantize_semantic(semantic, e);
    const auto d = nearest_code(detail, s.residual);
    DualQuant out;
    out.code = {static_cast<uint16_t>(s.index), static_cast<uint16_t>(d.index)};
    out.reconstruction.assign(semantic.code(s.index).begin(), semantic.code(s.index).end());
    axpy(1.0, detail.code(d.index), out.reconstruction);
    return out;
}

std::vector<double> dequantize(const Codebook& semantic, const Codebook& detail, DualCode c) {
    SDAR_CHECK(c.semantic < semantic.count() && c.detail < detail.count(),
               "dequantize: code out of range");
    std::vector<double> e(semantic.code(c.semantic).begin(), semantic.code(c.semantic).end());
    axpy(1.0, detail.code(c.detail), e);
    return e;
}

void VqConfig::validate() const {
    SDAR_CHECK(n1 >= 1 && n1 <= 65536, "vq: n1 out of range");
    SDAR_CHECK(n2 >= 0 && n2 <= 65536, "vq: n2 out of range");
    SDAR_CHECK(dim >= 1, "vq: dim must be positive");
    SDAR_CHECK(beta >= 0.0, "vq: beta must be nonnegative");
    SDAR_CHECK(lambda_rec >= 0.0, "vq: lambda_rec must be nonnegative");
    SDAR_CHECK(lr > 0.0, "vq: lr must be positive");
    SDAR_CHECK(batch >= 1, "vq: batch must be positive");
    SDAR_CHECK(dead_code_steps >= 1, "vq: dead_code_steps must be positive");
}

int StageSchedule::joint_count() const {
    return static_cast<int>(std::count(log.begin(), log.end(), VqUpdateKind::joint));
}

int StageSchedule::semantic_count() const {
    return static_cast<int>(log.size()) - joint_count();
}

VqModel::VqModel(const VqConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng init(derive_seed(cfg_.seed, kInitStream));
    if (cfg_.learn_maps) {
        encoder_ = &store_.create("encoder.w", identity(cfg_.dim));
        decoder_ = &store_.create("decoder.w", identity(cfg_.dim));
    }
    Matrix sem(cfg_.n1, cfg_.dim);
    for (double& v : sem.data) v = 0.01 * init.normal();
    semantic_ = &store_.create("codebook.semantic", std::move(sem));
    if (cfg_.n2 > 0) {
        Matrix det(cfg_.n2, cfg_.dim);
        for (double& v : det.data) v = 0.01 * init.normal();
        detail_ = &store_.create("codebook.detail", std::move(det));
        detail_unused_.assign(cfg_.n2, 0);
    }
    opt_ = std::make_unique<AdamW>(AdamWConfig{
        .lr = cfg_.lr, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8, .weight_decay = 0.0});
}

const Matrix& VqModel::detail_codes() const {
    SDAR_CHECK(detail_, "single-codebook model has no detail codebook");
    return detail_->value;
}

Codebook VqModel::detail_book() const { return Codebook(detail_codes()); }

Parameter& VqModel::detail_param() {
    SDAR_CHECK(detail_, "single-codebook model has no detail codebook");
    return *detail_;
}

std::vector<double> VqModel::encode(std::span<const double> x) const {
    SDAR_CHECK(static_cast<int>(x.size()) == cfg_.dim, "encode: dim mismatch");
    if (!encoder_) return {x.begin(), x.end()};
    std::vector<double> e(cfg_.dim, 0.0);
    for (int i = 0; i < cfg_.dim; ++i) axpy(x[i], encoder_->value.row(i), e);
    return e;
}

std::vector<double> VqModel::decode(std::span<const double> e) const {
    SDAR_CHECK(static_cast<int>(e.size()) == cfg_.dim, "decode: dim mismatch");
    if (!decoder_) return {e.begin(), e.end()};
    std::vector<double> x(cfg_.dim, 0.0);
    for (int i = 0; i < cfg_.dim; ++i) axpy(e[i], decoder_->value.row(i), x);
    return x;
}

SemanticQuant VqModel::quantize_semantic(std::span<const double> e) const {
    const auto near = nearest_row(semantic_->value, e);
    SemanticQuant out;
    out.index = near.index;
    out.residual.assign(e.begin(), e.end());
    axpy(-1.0, semantic_->value.row(near.index), out.residual);
    return out;
}

DualQuant VqModel::quantize_dual(std::span<const double> e) const {
    auto s = quantize_semantic(e);
    const auto d = nearest_row(detail_codes(), s.residual);
    DualQuant out;
    out.code = {static_cast<uint16_t>(s.index), static_cast<uint16_t>(d.index)};
    out.reconstruction.assign(semantic_->value.row(s.index).begin(),
                              semantic_->value.row(s.index).end());
    axpy(1.0, detail_codes().row(d.index), out.reconstruction);
    return out;
}

std::vector<double> VqModel::dequantize(DualCode c) const {
    SDAR_CHECK(c.semantic < cfg_.n1, "dequantize: semantic code out of range");
    std::vector<double> e(semantic_->value.row(c.semantic).begin(),
                          semantic_->value.row(c.semantic).end());
    if (detail_) {
        SDAR_CHECK(c.detail < cfg_.n2, "dequantize: detail code out of range");
        axpy(1.0, detail_codes().row(c.detail), e);
    }
    return e;
}

std::vector<double> VqModel::reconstruct(std::span<const double> x) const {
    const auto e = encode(x);
    // The detail book only becomes meaningful once stage two has seeded it.
    if (detail_ && stage2_steps_ > 0) return decode(quantize_dual(e).reconstruction);
    const auto s = quantize_semantic(e);
    return decode(semantic_->value.row(s.index));
}

double VqModel::recon_mse(const Matrix& patches) const {
    SDAR_CHECK(patches.cols == cfg_.dim && patches.rows > 0, "recon_mse: bad patch matrix");
    double s = 0.0;
    for (int r = 0; r < patches.rows; ++r) {
        const auto xhat = reconstruct(patches.row(r));
        s += squared_distance(patches.row(r), xhat);
    }
    return s / static_cast<double>(patches.size());
}

Matrix VqModel::sample_batch(const Matrix& patches, Rng& rng) const {
    Matrix batch(cfg_.batch, cfg_.dim);
    for (int b = 0; b < cfg_.batch; ++b) {
        const int row = static_cast<int>(rng.range(patches.rows));
        std::copy(patches.row_ptr(row), patches.row_ptr(row) + cfg_.dim, batch.row_ptr(b));
    }
    return batch;
}

namespace {

// Shared tail of both stage losses: commitment terms plus the straight-through
// reconstruction. `sg_e`/`sg_q` are either stop_gradient nodes or frozen
// constant leaves with the same values; the gradients agree either way.
Var commit_and_reconstruct(Tape& t, Var x, Var e, Var q, Var sg_e, Var sg_q,
                           Parameter* decoder, double beta, double lambda_rec,
                           double inv_b) {
    Var to_book = t.sub(q, sg_e);  // moves codes toward the encoder
    Var to_enc = t.sub(e, sg_q);   // commits the encoder to its code
    Var commit = t.add(t.scale(t.sum_all(t.mul(to_book, to_book)), inv_b),
                       t.scale(t.sum_all(t.mul(to_enc, to_enc)), beta * inv_b));
    Var st = t.add(e, t.sub(sg_q, sg_e));  // straight-through code, value q
    Var xhat = decoder ? t.matmul(st, t.param(*decoder)) : st;
    Var diff = t.sub(xhat, x);
    Var rec = t.scale(t.sum_all(t.mul(diff, diff)), inv_b);
    return t.add(commit, t.scale(rec, lambda_rec));
}

}  // namespace

VqModel::StopValues VqModel::capture_stage1_stops(const Matrix& batch,
                                                  const std::vector<int>& sem_idx) const {
    StopValues sv;
    sv.e = encoder_ ? matmul(batch, encoder_->value) : batch;
    sv.q = Matrix(batch.rows, cfg_.dim);
    for (int b = 0; b < batch.rows; ++b) {
        const auto row = semantic_->value.row(sem_idx[b]);
        std::copy(row.begin(), row.end(), sv.q.row_ptr(b));
    }
    return sv;
}

VqModel::StopValues VqModel::capture_stage2_stops(const Matrix& batch,
                                                  const std::vector<int>& sem_idx,
                                                  const std::vector<int>& det_idx) const {
    SDAR_CHECK(detail_, "stage 2 loss needs a detail codebook");
    StopValues sv = capture_stage1_stops(batch, sem_idx);
    for (int b = 0; b < batch.rows; ++b)
        axpy(1.0, detail_->value.row(det_idx[b]), sv.q.row(b));
    return sv;
}

Var VqModel::build_stage1_loss(Tape& t, const Matrix& batch, const std::vector<int>& sem_idx,
                               const StopValues* freeze) const {
    const double inv_b = 1.0 / batch.rows;
    Var x = t.leaf(batch);
    Var e = encoder_ ? t.matmul(x, t.param(*encoder_)) : x;
    Var q = t.gather_rows(t.param(*semantic_), sem_idx);
    Var sg_e = freeze ? t.leaf(freeze->e) : t.stop_gradient(e);
    Var sg_q = freeze ? t.leaf(freeze->q) : t.stop_gradient(q);
    return commit_and_reconstruct(t, x, e, q, sg_e, sg_q, decoder_, cfg_.beta,
                                  cfg_.lambda_rec, inv_b);
}

Var VqModel::build_stage2_loss(Tape& t, const Matrix& batch, const std::vector<int>& sem_idx,
                               const std::vector<int>& det_idx,
                               const StopValues* freeze) const {
    SDAR_CHECK(detail_, "stage 2 loss needs a detail codebook");
    const double inv_b = 1.0 / batch.rows;
    Var x = t.leaf(batch);
    Var e = encoder_ ? t.matmul(x, t.param(*encoder_)) : x;
    Var qs = t.gather_rows(t.param(*semantic_), sem_idx);
    Var qd = t.gather_rows(t.param(*detail_), det_idx);
    Var qc = t.add(qs, qd);
    Var sg_e = freeze ? t.leaf(freeze->e) : t.stop_gradient(e);
    Var sg_q = freeze ? t.leaf(freeze->q) : t.stop_gradient(qc);
    return commit_and_reconstruct(t, x, e, qc, sg_e, sg_q, decoder_, cfg_.beta,
                                  cfg_.lambda_rec, inv_b);
}

void VqModel::train_stage1(const Matrix& patches, int steps, VqTrainLog* log) {
    SDAR_CHECK(patches.cols == cfg_.dim && patches.rows >= 1, "train_stage1: bad patches");
    for (int s = 0; s < steps; ++s) {
        Rng rng(derive_seed(cfg_.seed, kStage1Stream, static_cast<uint64_t>(stage1_steps_)));
        if (stage1_steps_ == 0) {
            // Seed semantic codes from encoded data points.
            for (int i = 0; i < cfg_.n1; ++i) {
                const int row = static_cast<int>(rng.range(patches.rows));
                const auto e = encode(patches.row(row));
                std::copy(e.begin(), e.end(), semantic_->value.row_ptr(i));
            }
        }
        const Matrix batch = sample_batch(patches, rng);
        std::vector<int> sem_idx(batch.rows);
        for (int b = 0; b < batch.rows; ++b)
            sem_idx[b] = nearest_row(semantic_->value, encode(batch.row(b))).index;
        store_.zero_grads();
        Tape t;
        Var loss = build_stage1_loss(t, batch, sem_idx);
        if (log) log->losses.push_back(t.value(loss).at(0, 0));
        t.backward(loss);
        opt_->step(store_.all());
        ++stage1_steps_;
    }
}

void VqModel::joint_update(const Matrix& patches, int64_t step_index, VqTrainLog* log) {
    Rng rng(derive_seed(cfg_.seed, kStage2Stream, static_cast<uint64_t>(step_index)));
    const Matrix batch = sample_batch(patches, rng);
    std::vector<int> sem_idx(batch.rows), det_idx(batch.rows);
    Matrix residuals(batch.rows, cfg_.dim);
    for (int b = 0; b < batch.rows; ++b) {
        const auto sq = quantize_semantic(encode(batch.row(b)));
        sem_idx[b] = sq.index;
        std::copy(sq.residual.begin(), sq.residual.end(), residuals.row_ptr(b));
        det_idx[b] = nearest_row(detail_->value, sq.residual).index;
    }

    // Dead-code bookkeeping: a detail code unused for cfg_.dead_code_steps
    // consecutive joint updates is reseeded to a random current residual.
    std::vector<char> used(cfg_.n2, 0);
    for (int idx : det_idx) used[idx] = 1;
    for (int j = 0; j < cfg_.n2; ++j) {
        if (used[j]) {
            detail_unused_[j] = 0;
            continue;
        }
        if (++detail_unused_[j] >= cfg_.dead_code_steps) {
            const int row = static_cast<int>(rng.range(batch.rows));
            std::copy(residuals.row_ptr(row), residuals.row_ptr(row) + cfg_.dim,
                      detail_->value.row_ptr(j));
            if (!detail_->m.empty())
                for (int c = 0; c < cfg_.dim; ++c) detail_->m.at(j, c) = detail_->v.at(j, c) = 0.0;
            detail_unused_[j] = 0;
        }
    }

    store_.zero_grads();
    Tape t;
    Var loss = build_stage2_loss(t, batch, sem_idx, det_idx);
    if (log) log->losses.push_back(t.value(loss).at(0, 0));
    t.backward(loss);
    opt_->step(store_.all());
}

void VqModel::semantic_update(const Matrix& patches, int64_t step_index, VqTrainLog* log) {
    Rng rng(derive_seed(cfg_.seed, kStage2Stream, static_cast<uint64_t>(step_index)));
    const Matrix batch = sample_batch(patches, rng);
    std::vector<int> sem_idx(batch.rows);
    for (int b = 0; b < batch.rows; ++b)
        sem_idx[b] = nearest_row(semantic_->value, encode(batch.row(b))).index;
    store_.zero_grads();
    Tape t;
    Var loss = build_stage1_loss(t, batch, sem_idx);
    if (log) log->losses.push_back(t.value(loss).at(0, 0));
    t.backward(loss);
    opt_->step(store_.all());
}

void VqModel::train_stage2(const Matrix& patches, int steps, VqTrainLog* log) {
    SDAR_CHECK(detail_, "train_stage2: single-codebook model has no refinement stage");
    SDAR_CHECK(stage1_done(),
               "train_stage2: detail codebook is uninitialized, run stage 1 first");
    SDAR_CHECK(patches.cols == cfg_.dim && patches.rows >= 1, "train_stage2: bad patches");
    for (int s = 0; s < steps; ++s) {
        if (stage2_steps_ == 0) {
            // Seed detail codes from residuals of the stage-one model.
            Rng rng(derive_seed(cfg_.seed, kStage2Stream, 0xFFFFFFFFULL));
            const Matrix warm = sample_batch(patches, rng);
            Matrix residuals(warm.rows, cfg_.dim);
            for (int b = 0; b < warm.rows; ++b) {
                const auto sq = quantize_semantic(encode(warm.row(b)));
                std::copy(sq.residual.begin(), sq.residual.end(), residuals.row_ptr(b));
            }
            for (int j = 0; j < cfg_.n2; ++j) {
                const int row = static_cast<int>(rng.range(warm.rows));
                std::copy(residuals.row_ptr(row), residuals.row_ptr(row) + cfg_.dim,
                          detail_->value.row_ptr(j));
            }
        }
        const VqUpdateKind kind = StageSchedule::kind_for_step(stage2_steps_);
        if (kind == VqUpdateKind::joint)
            joint_update(patches, stage2_steps_, log);
        else
            semantic_update(patches, stage2_steps_, log);
        schedule_.log.push_back(kind);
        ++stage2_steps_;
    }
}

void VqModel::save(const std::string& path) {
    round_state_to_f32(store_.all());
    std::vector<NamedTensor> ts;
    ts.push_back({"meta.kind", Matrix(1, 1, 1.0)});
    Matrix layout(1, 6);
    layout.at(0, 0) = cfg_.n1;
    layout.at(0, 1) = cfg_.n2;
    layout.at(0, 2) = cfg_.dim;
    layout.at(0, 3) = cfg_.learn_maps ? 1.0 : 0.0;
    layout.at(0, 4) = cfg_.batch;
    layout.at(0, 5) = cfg_.dead_code_steps;
    ts.push_back({"meta.layout", layout});
    // Bit patterns, not values: the payload is f32 and would round these.
    Matrix hyper(3, 4);
    const double vals[3] = {cfg_.beta, cfg_.lambda_rec, cfg_.lr};
    for (int r = 0; r < 3; ++r) {
        const auto limbs = encode_f64(vals[r]);
        std::copy(limbs.begin(), limbs.end(), hyper.row_ptr(r));
    }
    ts.push_back({"meta.hyper", hyper});
    ts.push_back({"meta.seed", Matrix::row_vector(encode_u64(cfg_.seed))});
    Matrix progress(1, 3);
    progress.at(0, 0) = static_cast<double>(stage1_steps_);
    progress.at(0, 1) = static_cast<double>(stage2_steps_);
    progress.at(0, 2) = static_cast<double>(opt_->steps_taken());
    ts.push_back({"meta.progress", progress});
    if (detail_) {
        Matrix unused(1, cfg_.n2);
        for (int j = 0; j < cfg_.n2; ++j) unused.at(0, j) = detail_unused_[j];
        ts.push_back({"detail.unused", unused});
    }
    append_param_state(ts, store_);
    save_tensors(path, ts);
}

VqModel VqModel::load(const std::string& path) {
    auto ts = load_tensors(path);
    SDAR_CHECK(has_tensor(ts, "meta.kind") && find_tensor(ts, "meta.kind").at(0, 0) == 1.0,
               "not a quantizer checkpoint: " + path);
    const Matrix& layout = find_tensor(ts, "meta.layout");
    const Matrix& hyper = find_tensor(ts, "meta.hyper");
    VqConfig cfg;
    cfg.n1 = static_cast<int>(layout.at(0, 0));
    cfg.n2 = static_cast<int>(layout.at(0, 1));
    cfg.dim = static_cast<int>(layout.at(0, 2));
    cfg.learn_maps = layout.at(0, 3) != 0.0;
    cfg.batch = static_cast<int>(layout.at(0, 4));
    cfg.dead_code_steps = static_cast<int>(layout.at(0, 5));
    cfg.beta = decode_f64(hyper.row(0));
    cfg.lambda_rec = decode_f64(hyper.row(1));
    cfg.lr = decode_f64(hyper.row(2));
    cfg.seed = decode_u64(find_tensor(ts, "meta.seed").row(0));
    VqModel model(cfg);
    restore_param_state(model.store_, ts);
    const Matrix& progress = find_tensor(ts, "meta.progress");
    model.stage1_steps_ = static_cast<int64_t>(progress.at(0, 0));
    model.stage2_steps_ = static_cast<int64_t>(progress.at(0, 1));
    model.opt_->set_steps_taken(static_cast<int64_t>(progress.at(0, 2)));
    if (model.detail_) {
        const Matrix& unused = find_tensor(ts, "detail.unused");
        for (int j = 0; j < cfg.n2; ++j) model.detail_unused_[j] = static_cast<int>(unused.at(0, j));
    }
    for (int64_t s = 0; s < model.stage2_steps_; ++s)
        model.schedule_.log.push_back(StageSchedule::kind_for_step(s));
    return model;
}

}  // namespace sdar
