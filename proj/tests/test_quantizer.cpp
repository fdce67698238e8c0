#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "sdar/io_util.hpp"
#include "sdar/quantizer.hpp"

using namespace sdar;

namespace {

Matrix random_patches(int n, int d, Rng& rng, double scale = 1.0) {
    Matrix m(n, d);
    for (double& v : m.data) v = scale * rng.normal();
    return m;
}

Codebook random_book(int n, int d, Rng& rng, double scale = 1.0) {
    return Codebook(random_patches(n, d, rng, scale));
}

}  // namespace

TEST_CASE("quantize_semantic picks the nearest code and returns its residual") {
    Codebook book(Matrix::from({{0.0, 0.0}, {1.0, 0.0}}));
    std::vector<double> e = {0.9, 0.2};
    auto q = quantize_semantic(book, e);
    CHECK(q.index == 1);
    CHECK(q.residual[0] == doctest::Approx(-0.1).epsilon(1e-12));
    CHECK(q.residual[1] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("quantize_dual: residual optimality and the reconstruction identity") {
    Rng rng(3);
    Codebook sem = random_book(16, 8, rng);
    Codebook det = random_book(64, 8, rng, 0.3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> e(8);
        for (double& v : e) v = rng.normal();
        auto q = quantize_dual(sem, det, e);

        std::vector<double> err(e.begin(), e.end());
        axpy(-1.0, q.reconstruction, err);
        auto sq = quantize_semantic(sem, e);
        std::vector<double> res_err(sq.residual.begin(), sq.residual.end());
        axpy(-1.0, det.code(q.code.detail), res_err);
        const double lhs = dot(err, err);
        CHECK(lhs == doctest::Approx(dot(res_err, res_err)).epsilon(1e-12));

        for (int j = 0; j < det.count(); ++j)
            CHECK(lhs <= squared_distance(sq.residual, det.code(j)) + 1e-12);

        auto deq = dequantize(sem, det, q.code);
        for (int k = 0; k < 8; ++k)
            CHECK(deq[k] == doctest::Approx(q.reconstruction[k]).epsilon(1e-15));
    }
    CHECK_THROWS_AS((void)dequantize(sem, det, DualCode{200, 0}), std::runtime_error);
}

TEST_CASE("dual codebooks span n1*n2 distinct reconstructions") {
    Rng rng(11);
    Codebook sem = random_book(4, 8, rng);
    Codebook det = random_book(16, 8, rng);
    std::vector<std::vector<double>> recon;
    for (uint16_t a = 0; a < 4; ++a)
        for (uint16_t b = 0; b < 16; ++b) recon.push_back(dequantize(sem, det, {a, b}));
    CHECK(recon.size() == 64);
    double min_gap = 1e300;
    for (size_t i = 0; i < recon.size(); ++i)
        for (size_t j = i + 1; j < recon.size(); ++j)
            min_gap = std::min(min_gap, squared_distance(recon[i], recon[j]));
    CHECK(min_gap > 1e-12);  // all pairs distinct for continuous random books
}

// The straight-through estimator makes the backward pass differ from the true
// derivative on purpose (gradients skip the frozen quantization step), so a
// finite-difference check of the whole loss would reject correct code. The
// codebook and encoder gradients are instead compared against closed-form
// expressions; the decoder sits after every gradient stop, so it alone also
// gets a finite-difference check.
TEST_CASE("training losses match the hand-derived straight-through gradients") {
    VqConfig cfg;
    cfg.n1 = 8;
    cfg.n2 = 16;
    cfg.dim = 4;
    cfg.batch = 8;
    cfg.seed = 5;
    VqModel model(cfg);
    Rng rng(17);
    Matrix batch = random_patches(8, 4, rng);
    const int B = batch.rows, d = cfg.dim;
    std::vector<int> sem_idx(B), det_idx(B);
    for (int b = 0; b < B; ++b) {
        auto q = model.quantize_semantic(model.encode(batch.row(b)));
        sem_idx[b] = q.index;
        det_idx[b] = static_cast<int>(rng.range(16));
    }

    auto expect_close = [](const Matrix& got, const Matrix& want) {
        REQUIRE(got.rows == want.rows);
        REQUIRE(got.cols == want.cols);
        for (size_t i = 0; i < got.size(); ++i)
            CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-9));
    };

    // Shared oracle: with codes Q fixed by the stop-gradients, the loss is an
    // ordinary quadratic in E = x We, Q, and Wd.
    auto oracle = [&](const Matrix& q_rows, Matrix& g_we, Matrix& g_wd, Matrix& g_code) {
        const Matrix& we = model.encoder_param().value;
        const Matrix& wd = model.decoder_param().value;
        const Matrix e = matmul(batch, we);
        Matrix diff = matmul(q_rows, wd);  // straight-through value equals the code
        for (size_t i = 0; i < diff.size(); ++i) diff.data[i] -= batch.data[i];
        Matrix g_e(B, d);
        const Matrix rec_to_e = matmul(diff, wd, false, true);
        for (size_t i = 0; i < g_e.size(); ++i)
            g_e.data[i] = (2.0 * cfg.beta * (e.data[i] - q_rows.data[i]) +
                           2.0 * cfg.lambda_rec * rec_to_e.data[i]) /
                          B;
        g_we = matmul(batch, g_e, true, false);
        Matrix scaled_diff = diff;
        for (double& v : scaled_diff.data) v *= 2.0 * cfg.lambda_rec / B;
        g_wd = matmul(q_rows, scaled_diff, true, false);
        g_code = Matrix(B, d);
        for (size_t i = 0; i < g_code.size(); ++i)
            g_code.data[i] = 2.0 * (q_rows.data[i] - e.data[i]) / B;
    };

    SUBCASE("stage 1") {
        model.params().zero_grads();
        Tape t;
        t.backward(model.build_stage1_loss(t, batch, sem_idx));

        Matrix q_rows(B, d);
        for (int b = 0; b < B; ++b) {
            const double* row = model.semantic_param().value.row_ptr(sem_idx[b]);
            std::copy(row, row + d, q_rows.row_ptr(b));
        }
        Matrix g_we, g_wd, g_code;
        oracle(q_rows, g_we, g_wd, g_code);
        Matrix g_sem(cfg.n1, d);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < d; ++k) g_sem.at(sem_idx[b], k) += g_code.at(b, k);

        expect_close(model.encoder_param().grad, g_we);
        expect_close(model.decoder_param().grad, g_wd);
        expect_close(model.semantic_param().grad, g_sem);
        CHECK(model.detail_param().grad.empty());  // stage 1 never touches it
    }

    SUBCASE("stage 2 spreads the combined-code gradient over both books") {
        model.params().zero_grads();
        Tape t;
        t.backward(model.build_stage2_loss(t, batch, sem_idx, det_idx));

        Matrix q_rows(B, d);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < d; ++k)
                q_rows.at(b, k) = model.semantic_param().value.at(sem_idx[b], k) +
                                  model.detail_param().value.at(det_idx[b], k);
        Matrix g_we, g_wd, g_code;
        oracle(q_rows, g_we, g_wd, g_code);
        Matrix g_sem(cfg.n1, d), g_det(cfg.n2, d);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < d; ++k) {
                g_sem.at(sem_idx[b], k) += g_code.at(b, k);
                g_det.at(det_idx[b], k) += g_code.at(b, k);
            }

        expect_close(model.encoder_param().grad, g_we);
        expect_close(model.decoder_param().grad, g_wd);
        expect_close(model.semantic_param().grad, g_sem);
        expect_close(model.detail_param().grad, g_det);
    }

    SUBCASE("decoder finite differences agree (no gradient stop on its path)") {
        std::vector<Parameter*> only_dec = {&model.decoder_param()};
        auto r = grad_check(
            [&](Tape& t) { return model.build_stage1_loss(t, batch, sem_idx); },
            only_dec);
        CHECK(r.max_rel_err < 1e-6);
        CHECK(r.max_abs_grad > 0.0);
    }

    SUBCASE("freezing the stopped operands makes the full losses FD-checkable") {
        // The frozen builder must leave the analytic gradient untouched...
        const auto sv1 = model.capture_stage1_stops(batch, sem_idx);
        model.params().zero_grads();
        {
            Tape t;
            t.backward(model.build_stage1_loss(t, batch, sem_idx));
        }
        Matrix live_grad = model.encoder_param().grad;
        model.params().zero_grads();
        {
            Tape t;
            t.backward(model.build_stage1_loss(t, batch, sem_idx, &sv1));
        }
        for (size_t i = 0; i < live_grad.size(); ++i)
            CHECK(model.encoder_param().grad.data[i] == live_grad.data[i]);

        // ...and then finite differences validate it end to end.
        auto r1 = grad_check(
            [&](Tape& t) { return model.build_stage1_loss(t, batch, sem_idx, &sv1); },
            model.params().all());
        CHECK(r1.max_rel_err < 1e-4);
        CHECK(r1.max_abs_grad > 0.0);

        const auto sv2 = model.capture_stage2_stops(batch, sem_idx, det_idx);
        auto r2 = grad_check(
            [&](Tape& t) {
                return model.build_stage2_loss(t, batch, sem_idx, det_idx, &sv2);
            },
            model.params().all());
        CHECK(r2.max_rel_err < 1e-4);
    }
}

TEST_CASE("with beta = 0 the commitment terms send no gradient to the encoder") {
    VqConfig cfg;
    cfg.n1 = 4;
    cfg.n2 = 8;
    cfg.dim = 4;
    cfg.batch = 6;
    cfg.beta = 0.0;
    cfg.lambda_rec = 0.0;  // isolate the commitment terms
    VqModel model(cfg);
    Rng rng(19);
    Matrix batch = random_patches(6, 4, rng);
    std::vector<int> sem_idx(6, 0), det_idx(6, 1);
    model.params().zero_grads();
    Tape t;
    Var loss = model.build_stage2_loss(t, batch, sem_idx, det_idx);
    t.backward(loss);
    const Matrix& ge = model.encoder_param().grad;
    if (!ge.empty())
        for (double v : ge.data) CHECK(v == 0.0);
    REQUIRE(!model.semantic_param().grad.empty());  // codebooks still learn
}

TEST_CASE("a codebook that matches the data exactly reconstructs with zero error") {
    VqConfig cfg;
    cfg.n1 = 4;
    cfg.n2 = 0;
    cfg.dim = 3;
    cfg.learn_maps = false;
    VqModel model(cfg);
    Matrix motifs = Matrix::from({{1.0, 0.0, 0.0}, {0.0, 2.0, 0.0}, {0.0, 0.0, 3.0}, {4.0, 4.0, 4.0}});
    model.semantic_param().value = motifs;
    Matrix patches(32, 3);
    Rng rng(23);
    for (int r = 0; r < 32; ++r) {
        const int k = static_cast<int>(rng.range(4));
        std::copy(motifs.row_ptr(k), motifs.row_ptr(k) + 3, patches.row_ptr(r));
    }
    CHECK(model.recon_mse(patches) < 1e-6);
}

TEST_CASE("stage 1 improves held-out reconstruction and freezes the detail book") {
    Rng rng(31);
    Matrix train = random_patches(512, 8, rng, 2.0);
    Matrix val = random_patches(128, 8, rng, 2.0);
    VqConfig cfg;
    cfg.seed = 1;
    VqModel model(cfg);

    const Matrix detail_before = model.detail_codes();
    const double mse_before = model.recon_mse(val);
    model.train_stage1(train, 200);
    const double mse_after = model.recon_mse(val);
    CHECK(mse_after < mse_before);

    const Matrix& detail_after = model.detail_codes();
    REQUIRE(detail_before.size() == detail_after.size());
    for (size_t i = 0; i < detail_before.size(); ++i)
        CHECK(detail_before.data[i] == detail_after.data[i]);  // bitwise frozen
}

TEST_CASE("stage 2 rejects models without a completed stage 1") {
    Rng rng(37);
    Matrix train = random_patches(64, 8, rng);
    VqConfig cfg;
    VqModel fresh(cfg);
    CHECK_THROWS_WITH_AS(fresh.train_stage2(train, 1), doctest::Contains("uninitialized"),
                         std::runtime_error);

    VqConfig single = cfg;
    single.n2 = 0;
    VqModel sm(single);
    sm.train_stage1(train, 2);
    CHECK_THROWS_AS(sm.train_stage2(train, 1), std::runtime_error);
}

TEST_CASE("stage 2 interleaves exactly two joint updates per semantic-only update") {
    Rng rng(41);
    Matrix train = random_patches(256, 8, rng, 2.0);
    VqConfig cfg;
    cfg.seed = 2;
    VqModel model(cfg);
    model.train_stage1(train, 30);
    model.train_stage2(train, 30);

    const auto& log = model.schedule().log;
    REQUIRE(log.size() == 30);
    CHECK(model.schedule().joint_count() == 20);
    CHECK(model.schedule().semantic_count() == 10);
    for (size_t c = 0; c + 3 <= log.size(); c += 3) {
        CHECK(log[c] == VqUpdateKind::joint);
        CHECK(log[c + 1] == VqUpdateKind::joint);
        CHECK(log[c + 2] == VqUpdateKind::semantic_only);
    }
}

TEST_CASE("stage 2 lowers reconstruction error below the stage 1 model") {
    Rng rng(43);
    Matrix train = random_patches(1024, 8, rng, 2.0);
    Matrix val = random_patches(256, 8, rng, 2.0);
    VqConfig cfg;
    cfg.seed = 3;
    VqModel model(cfg);
    model.train_stage1(train, 300);
    const double stage1_mse = model.recon_mse(val);
    model.train_stage2(train, 300);
    const double stage2_mse = model.recon_mse(val);
    CHECK(stage2_mse < stage1_mse);
}

TEST_CASE("an unused detail code is reseeded after the configured patience") {
    Rng rng(47);
    Matrix train = random_patches(256, 8, rng);
    VqConfig cfg;
    cfg.n1 = 8;
    cfg.n2 = 8;
    cfg.dead_code_steps = 2;
    cfg.seed = 4;
    VqModel model(cfg);
    model.train_stage1(train, 20);
    model.train_stage2(train, 1);  // seeds the detail book
    for (int c = 0; c < 8; ++c) model.detail_param().value.at(5, c) = 1e6;  // never nearest
    model.train_stage2(train, 5);  // contains >= 2 further joint updates
    double norm = 0.0;
    for (int c = 0; c < 8; ++c) norm += std::abs(model.detail_param().value.at(5, c));
    CHECK(norm < 1e3);  // reseeded to a residual-scale vector
}

TEST_CASE("checkpoints resume bit-exactly and round-trip byte-identically") {
    Rng rng(53);
    Matrix train = random_patches(512, 8, rng, 2.0);
    VqConfig cfg;
    cfg.seed = 9;

    VqModel a(cfg);
    a.train_stage1(train, 40);
    a.train_stage2(train, 20);
    const std::string p1 = "vq_ckpt_a.sdtc", p2 = "vq_ckpt_b.sdtc";
    a.save(p1);
    a.train_stage2(train, 20);  // continue in-process after the rounding save

    VqModel b = VqModel::load(p1);
    b.save(p2);
    CHECK(fnv1a_file(p1) == fnv1a_file(p2));  // save(load(f)) == f
    b.train_stage2(train, 20);

    const Matrix& wa = a.semantic_codes();
    const Matrix& wb = b.semantic_codes();
    for (size_t i = 0; i < wa.size(); ++i) CHECK(wa.data[i] == wb.data[i]);
    const Matrix& da = a.detail_codes();
    const Matrix& db = b.detail_codes();
    for (size_t i = 0; i < da.size(); ++i) CHECK(da.data[i] == db.data[i]);

    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("identical seed and config give identical training trajectories") {
    Rng rng(59);
    Matrix train = random_patches(256, 8, rng);
    VqConfig cfg;
    cfg.seed = 77;
    VqModel a(cfg), b(cfg);
    a.train_stage1(train, 25);
    b.train_stage1(train, 25);
    a.train_stage2(train, 10);
    b.train_stage2(train, 10);
    const Matrix& wa = a.semantic_codes();
    const Matrix& wb = b.semantic_codes();
    for (size_t i = 0; i < wa.size(); ++i) CHECK(wa.data[i] == wb.data[i]);
}
