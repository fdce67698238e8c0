#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "sdar/armodel.hpp"
#include "sdar/io_util.hpp"
#include "sdar/matrix.hpp"
#include "sdar/rng.hpp"
#include "sdar/sampling.hpp"

using namespace sdar;

namespace {

ArConfig tiny_config() {
    ArConfig c;
    c.n1 = 5;
    c.n2 = 6;
    c.n_classes = 3;
    c.side = 3;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.head_layers = 1;
    c.d_s = 4;
    c.d_d = 4;
    c.d_compress = 3;
    c.batch = 2;
    c.seed = 7;
    return c;
}

TokenGrid random_grid(const ArConfig& c, uint64_t seed) {
    Rng r(seed);
    TokenGrid g;
    g.side = c.side;
    g.label = static_cast<int>(r.range(c.n_classes));
    for (int p = 0; p < c.tokens(); ++p)
        g.codes.push_back({static_cast<uint16_t>(r.range(c.n1)),
                           c.n2 > 0 ? static_cast<uint16_t>(r.range(c.n2))
                                    : static_cast<uint16_t>(0)});
    return g;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

std::vector<double> random_logits(Rng& r, int n, double spread = 2.0) {
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = spread * r.normal();
    return v;
}

}  // namespace

TEST_CASE("cfg_blend is affine with exact endpoints") {
    Rng r(11);
    const std::vector<double> u = random_logits(r, 9);
    const std::vector<double> c = random_logits(r, 9);

    const auto at0 = cfg_blend(u, c, 0.0);
    const auto at1 = cfg_blend(u, c, 1.0);
    for (size_t i = 0; i < u.size(); ++i) {
        CHECK(at0[i] == u[i]);
        CHECK(at1[i] == c[i]);
    }

    // Collapsed branches are a fixed point for any scale.
    const auto same = cfg_blend(u, u, 2.7);
    for (size_t i = 0; i < u.size(); ++i) CHECK(same[i] == u[i]);

    const std::vector<double> zero{0.0};
    const std::vector<double> one{1.0};
    CHECK(cfg_blend(zero, one, 2.0)[0] == 2.0);

    const auto mid = cfg_blend(u, c, 1.5);
    for (size_t i = 0; i < u.size(); ++i)
        CHECK(mid[i] == doctest::Approx(u[i] + 1.5 * (c[i] - u[i])).epsilon(1e-14));

    CHECK_THROWS(cfg_blend(zero, c, 1.0));
    CHECK_THROWS(cfg_blend(u, c, std::numeric_limits<double>::infinity()));
}

TEST_CASE("progressive_scale hits its endpoints exactly and ramps monotonically") {
    const GuidanceSchedule sch{1.75, 3.0, 576};
    CHECK(progressive_scale(sch, 0) == 1.75);
    CHECK(progressive_scale(sch, 576) == 3.0);
    CHECK(progressive_scale(sch, 288) == 2.375);

    double prev = progressive_scale(sch, 0);
    for (int i = 1; i <= 576; ++i) {
        const double s = progressive_scale(sch, i);
        CHECK(s >= prev);
        prev = s;
    }

    CHECK_THROWS(progressive_scale(sch, -1));
    CHECK_THROWS(progressive_scale(sch, 577));
    CHECK_THROWS(progressive_scale(GuidanceSchedule{1.0, 2.0, 0}, 0));
    CHECK_THROWS(progressive_scale(GuidanceSchedule{-0.5, 2.0, 4}, 1));

    // A flat schedule returns the same scale everywhere.
    const GuidanceSchedule flat{2.25, 2.25, 10};
    for (int i = 0; i <= 10; ++i) CHECK(progressive_scale(flat, i) == 2.25);
}

TEST_CASE("aggregate_attention reductions match hand sums") {
    PrefixAttention attn;
    attn.mass = Matrix::from({{0.2, 0.4, 0.6}, {0.1, 0.9, 0.5}});
    CHECK(aggregate_attention(attn, AttentionReduce::final_mean) == doctest::Approx(0.5));
    CHECK(aggregate_attention(attn, AttentionReduce::final_max) == doctest::Approx(0.9));
    CHECK(aggregate_attention(attn, AttentionReduce::all_mean) == doctest::Approx(0.45));

    PrefixAttention empty;
    CHECK_THROWS(aggregate_attention(empty, AttentionReduce::final_mean));
}

TEST_CASE("prefix mass from captured maps matches the incremental decoder") {
    ArConfig c = tiny_config();
    ArModel model(c);
    const TokenGrid g = random_grid(c, 31);
    const std::vector<TokenGrid> grids{g};
    const std::vector<int> labels{g.label};

    Tape t;
    std::vector<AttentionRecord> records;
    model.build_forward(t, grids, labels, &records);
    REQUIRE(static_cast<int>(records.size()) >= c.n_layers);
    const std::vector<AttentionRecord> backbone(records.begin(), records.begin() + c.n_layers);

    ArInference inf(model, g.label);
    // The last condition row attends only to the prefix, so its mass is one.
    CHECK(aggregate_attention(inf.prefix_attention(), AttentionReduce::final_mean) ==
          doctest::Approx(1.0).epsilon(1e-12));
    PrefixAttention oracle = prefix_mass_from_records(backbone, 0, c.l_c - 1, c.l_c);
    CHECK(max_abs_diff(inf.prefix_attention().mass.data, oracle.mass.data) < 1e-9);

    for (int p = 0; p + 1 < c.tokens(); ++p) {
        inf.advance(g.codes[static_cast<size_t>(p)]);
        oracle = prefix_mass_from_records(backbone, 0, c.l_c + p, c.l_c);
        CHECK(max_abs_diff(inf.prefix_attention().mass.data, oracle.mass.data) < 1e-9);
        for (double v : oracle.mass.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0 + 1e-12);
        }
    }

    CHECK_THROWS(prefix_mass_from_records({}, 0, 0, 1));
    CHECK_THROWS(prefix_mass_from_records(backbone, 5, 0, 1));
    CHECK_THROWS(prefix_mass_from_records(backbone, 0, 99, 1));
}

TEST_CASE("pag_scale degeneracies") {
    const GuidanceSchedule sch{1.75, 3.0, 8};
    const double base = progressive_scale(sch, 3);

    // Relevance equal to its prefix mean stays on the ramp even with floor 0.
    CHECK(pag_scale(sch, 3, 0.4, 0.4, 0.0) == doctest::Approx(base).epsilon(1e-15));
    // Floor one ignores relevance entirely.
    CHECK(pag_scale(sch, 3, 0.05, 0.9, 1.0) == base);
    // Above-mean relevance is capped at the ramp value.
    CHECK(pag_scale(sch, 3, 0.8, 0.4, 0.0) == doctest::Approx(base));
    CHECK(pag_scale(sch, 3, 0.8, 0.4, 0.5) == doctest::Approx(base));
    // Below-mean relevance interpolates between floor * base and base.
    CHECK(pag_scale(sch, 3, 0.2, 0.4, 0.0) == doctest::Approx(0.5 * base));
    CHECK(pag_scale(sch, 3, 0.2, 0.4, 0.5) == doctest::Approx(0.75 * base));
    // The floor bounds the scale from below for any relevance.
    for (double a : {0.0, 0.1, 0.37, 1.0})
        CHECK(pag_scale(sch, 3, a, 0.6, 0.5) >= 0.5 * base - 1e-15);
    // A zero prefix mean carries no signal and falls back to the ramp.
    CHECK(pag_scale(sch, 3, 0.0, 0.0, 0.0) == base);

    CHECK_THROWS(pag_scale(sch, 3, 1.5, 0.5, 0.5));
    CHECK_THROWS(pag_scale(sch, 3, 0.5, 0.5, 1.5));
    CHECK_THROWS(pag_scale(sch, 99, 0.5, 0.5, 0.5));
}

TEST_CASE("filter_logits truncates and renormalizes") {
    SUBCASE("defaults reproduce the softmax") {
        Rng r(3);
        const auto logits = random_logits(r, 12);
        const auto probs = filter_logits(logits, 1.0, 0, 1.0);
        const auto ref = softmax(logits);
        CHECK(max_abs_diff(probs, ref) < 1e-12);
    }

    SUBCASE("nucleus keeps the smallest prefix reaching the mass") {
        const std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.2)};
        const auto probs = filter_logits(logits, 1.0, 0, 0.7);
        CHECK(probs[0] == doctest::Approx(0.625).epsilon(1e-12));
        CHECK(probs[1] == doctest::Approx(0.375).epsilon(1e-12));
        CHECK(probs[2] == 0.0);
    }

    SUBCASE("top-k one is a one-hot at the argmax") {
        const std::vector<double> logits{0.3, 1.9, -0.2, 1.1};
        const auto probs = filter_logits(logits, 1.0, 1, 1.0);
        CHECK(probs[1] == 1.0);
        CHECK(probs[0] == 0.0);
        CHECK(probs[2] == 0.0);
        CHECK(probs[3] == 0.0);
    }

    SUBCASE("freezing temperature approaches the argmax one-hot") {
        const std::vector<double> logits{0.3, 1.9, -0.2, 1.1};
        const auto probs = filter_logits(logits, 0.01, 0, 1.0);
        CHECK(probs[1] == doctest::Approx(1.0).epsilon(1e-9));
    }

    SUBCASE("raising temperature flattens the distribution") {
        const std::vector<double> logits{0.3, 1.9, -0.2, 1.1};
        const auto probs = filter_logits(logits, 1000.0, 0, 1.0);
        const auto [lo, hi] = std::minmax_element(probs.begin(), probs.end());
        CHECK(*hi - *lo < 0.01);
    }

    SUBCASE("always a proper distribution that keeps the argmax") {
        Rng r(5);
        for (int trial = 0; trial < 60; ++trial) {
            const auto logits = random_logits(r, 7, 3.0);
            const double temps[] = {0.5, 1.0, 2.0};
            const int ks[] = {0, 1, 3, 7};
            const double ps[] = {0.3, 0.7, 1.0};
            const double T = temps[trial % 3];
            const int k = ks[trial % 4];
            const double p = ps[trial % 3];
            const auto probs = filter_logits(logits, T, k, p);
            double sum = 0.0;
            int live = 0;
            for (double v : probs) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0 + 1e-12);
                sum += v;
                if (v > 0.0) ++live;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            if (k > 0) CHECK(live <= k);
            const auto arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
            CHECK(probs[static_cast<size_t>(arg)] > 0.0);
        }
    }

    SUBCASE("rejects bad controls") {
        const std::vector<double> logits{0.0, 1.0};
        CHECK_THROWS(filter_logits(logits, 0.0, 0, 1.0));
        CHECK_THROWS(filter_logits(logits, 1.0, -1, 1.0));
        CHECK_THROWS(filter_logits(logits, 1.0, 0, 0.0));
        CHECK_THROWS(filter_logits(logits, 1.0, 0, 1.5));
        CHECK_THROWS(filter_logits({}, 1.0, 0, 1.0));
    }
}

TEST_CASE("sample_index follows the distribution deterministically") {
    const std::vector<double> probs{0.2, 0.5, 0.3};

    Rng a(123);
    Rng b(123);
    for (int i = 0; i < 50; ++i) CHECK(sample_index(probs, a) == sample_index(probs, b));

    Rng r(99);
    std::vector<int> counts(3, 0);
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) ++counts[static_cast<size_t>(sample_index(probs, r))];
    for (int i = 0; i < 3; ++i)
        CHECK(std::abs(counts[static_cast<size_t>(i)] / double(draws) - probs[static_cast<size_t>(i)]) <
              0.015);

    const std::vector<double> hot{0.0, 1.0, 0.0};
    for (int i = 0; i < 20; ++i) CHECK(sample_index(hot, r) == 1);

    CHECK_THROWS(sample_index({}, r));
    const std::vector<double> neg{0.5, -0.5, 1.0};
    CHECK_THROWS(sample_index(neg, r));
}

TEST_CASE("generate is deterministic per seed and in range") {
    ArConfig c = tiny_config();
    ArModel model(c);
    SamplerConfig sc;
    sc.schedule = {1.0, 3.0, 1};
    sc.seed = 42;

    GenTrace trace;
    const TokenGrid g1 = generate(model, 1, sc, &trace);
    const TokenGrid g2 = generate(model, 1, sc);
    CHECK(g1.side == c.side);
    CHECK(g1.label == 1);
    REQUIRE(g1.codes.size() == static_cast<size_t>(c.tokens()));
    CHECK(g1.codes == g2.codes);
    for (const DualCode& code : g1.codes) {
        CHECK(code.semantic < c.n1);
        CHECK(code.detail < c.n2);
    }

    SamplerConfig other = sc;
    other.seed = 43;
    CHECK(generate(model, 1, other).codes != g1.codes);

    // Off-guidance traces sit exactly on the ramp over the raster.
    REQUIRE(trace.scales.size() == static_cast<size_t>(c.tokens()));
    REQUIRE(trace.sem_logits.size() == static_cast<size_t>(c.tokens()));
    REQUIRE(trace.det_logits.size() == static_cast<size_t>(c.tokens()));
    GuidanceSchedule ramp = sc.schedule;
    ramp.total_tokens = c.tokens();
    for (int p = 0; p < c.tokens(); ++p) {
        CHECK(trace.scales[static_cast<size_t>(p)] == progressive_scale(ramp, p));
        CHECK(trace.alphas[static_cast<size_t>(p)] == 1.0);
        CHECK(trace.sem_logits[static_cast<size_t>(p)].size() == static_cast<size_t>(c.n1));
        CHECK(trace.det_logits[static_cast<size_t>(p)].size() == static_cast<size_t>(c.n2));
    }

    CHECK_THROWS(generate(model, c.n_classes, sc));
    CHECK_THROWS(generate(model, -1, sc));

    ArConfig split = tiny_config();
    split.paradigm = Paradigm::alternating;
    ArModel sm(split);
    CHECK_THROWS(generate(sm, 0, sc));
}

TEST_CASE("attention guidance with unit floor equals fixed-scale guidance") {
    ArConfig c = tiny_config();
    ArModel model(c);

    SamplerConfig fixed;
    fixed.schedule = {2.25, 2.25, 1};
    fixed.seed = 17;

    SamplerConfig pag = fixed;
    pag.attention_guided = true;
    pag.alpha_floor = 1.0;

    GenTrace tf, tp;
    const TokenGrid gf = generate(model, 2, fixed, &tf);
    const TokenGrid gp = generate(model, 2, pag, &tp);

    CHECK(gf.codes == gp.codes);
    REQUIRE(tf.scales.size() == tp.scales.size());
    for (size_t p = 0; p < tf.scales.size(); ++p) {
        CHECK(tf.scales[p] == 2.25);
        CHECK(std::abs(tp.scales[p] - tf.scales[p]) <= 1e-12);
        CHECK(max_abs_diff(tf.sem_logits[p], tp.sem_logits[p]) <= 1e-12);
        CHECK(max_abs_diff(tf.det_logits[p], tp.det_logits[p]) <= 1e-12);
    }

    // The first position reads the condition row, whose mass is all prefix.
    CHECK(tp.alphas[0] == doctest::Approx(1.0).epsilon(1e-12));
    for (double a : tp.alphas) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0 + 1e-12);
    }
}

TEST_CASE("raw relevance mode multiplies the ramp directly") {
    ArConfig c = tiny_config();
    ArModel model(c);

    SamplerConfig sc;
    sc.schedule = {1.5, 3.0, 1};
    sc.attention_guided = true;
    sc.raw_alpha = true;
    sc.seed = 5;

    GenTrace trace;
    generate(model, 0, sc, &trace);
    GuidanceSchedule ramp = sc.schedule;
    ramp.total_tokens = c.tokens();
    for (int p = 0; p < c.tokens(); ++p)
        CHECK(trace.scales[static_cast<size_t>(p)] ==
              trace.alphas[static_cast<size_t>(p)] * progressive_scale(ramp, p));
}

TEST_CASE("single-codebook generation skips the detail stage") {
    ArConfig c = tiny_config();
    c.n2 = 0;
    ArModel model(c);
    SamplerConfig sc;
    sc.seed = 9;

    GenTrace trace;
    const TokenGrid g = generate(model, 0, sc, &trace);
    for (const DualCode& code : g.codes) {
        CHECK(code.semantic < c.n1);
        CHECK(code.detail == 0);
    }
    CHECK(trace.det_logits.empty());
    CHECK(trace.sem_logits.size() == static_cast<size_t>(c.tokens()));
}

TEST_CASE("generate_many derives independent per-sample seeds") {
    ArConfig c = tiny_config();
    ArModel model(c);
    SamplerConfig sc;
    sc.seed = 1234;

    const std::vector<int> labels{0, 1, 0, 2};
    const auto batch1 = generate_many(model, labels, sc);
    const auto batch2 = generate_many(model, labels, sc);
    REQUIRE(batch1.size() == labels.size());
    for (size_t s = 0; s < labels.size(); ++s) {
        CHECK(batch1[s].label == labels[s]);
        CHECK(batch1[s].codes == batch2[s].codes);
    }
    // Same label at different positions still draws distinct randomness.
    CHECK(batch1[0].codes != batch1[2].codes);

    SamplerConfig other = sc;
    other.seed = 1235;
    CHECK(generate_many(model, labels, other)[0].codes != batch1[0].codes);
}

TEST_CASE("decode_grid maps every cell through the quantizer decoder") {
    VqConfig vc;
    vc.n1 = 5;
    vc.n2 = 6;
    vc.dim = 4;
    vc.seed = 3;
    VqModel vq(vc);

    TokenGrid g;
    g.side = 2;
    g.label = 0;
    Rng r(8);
    for (int i = 0; i < 4; ++i)
        g.codes.push_back({static_cast<uint16_t>(r.range(vc.n1)),
                           static_cast<uint16_t>(r.range(vc.n2))});

    const Matrix dec = decode_grid(vq, g);
    REQUIRE(dec.rows == 4);
    REQUIRE(dec.cols == vc.dim);
    for (int i = 0; i < 4; ++i) {
        const auto want = vq.decode(vq.dequantize(g.codes[static_cast<size_t>(i)]));
        CHECK(max_abs_diff(dec.row(i), want) == 0.0);
    }

    TokenGrid bad = g;
    bad.codes.pop_back();
    CHECK_THROWS(decode_grid(vq, bad));

    VqConfig single = vc;
    single.n2 = 0;
    VqModel svq(single);
    TokenGrid sg = g;
    for (DualCode& code : sg.codes) code.detail = 0;
    CHECK(decode_grid(svq, sg).rows == 4);
}

TEST_CASE("sample dumps round-trip bytes and values") {
    SampleDump dump;
    dump.side = 3;
    dump.dim = 4;
    Rng r(21);
    for (int s = 0; s < 2; ++s) {
        TokenGrid g;
        g.side = 3;
        g.label = s + 1;
        for (int i = 0; i < 9; ++i)
            g.codes.push_back({static_cast<uint16_t>(r.range(40000)),
                               static_cast<uint16_t>(r.range(40000))});
        dump.grids.push_back(std::move(g));
        Matrix e(9, 4);
        // f32-representable values so the payload round-trips exactly.
        for (double& v : e.data) v = static_cast<double>(static_cast<float>(r.normal()));
        dump.embeddings.push_back(std::move(e));
    }

    const char* path = "sample_dump_test.sdsm";
    save_samples(path, dump);
    const SampleDump back = load_samples(path);
    CHECK(back.side == dump.side);
    CHECK(back.dim == dump.dim);
    REQUIRE(back.grids.size() == dump.grids.size());
    for (size_t s = 0; s < dump.grids.size(); ++s) {
        CHECK(back.grids[s].label == dump.grids[s].label);
        CHECK(back.grids[s].codes == dump.grids[s].codes);
        CHECK(max_abs_diff(back.embeddings[s].data, dump.embeddings[s].data) == 0.0);
    }

    // Rewriting the same dump yields byte-identical files.
    const uint64_t h1 = fnv1a_file(path);
    save_samples(path, dump);
    CHECK(fnv1a_file(path) == h1);

    SUBCASE("token-only dumps carry no payload") {
        SampleDump lean = dump;
        lean.dim = 0;
        lean.embeddings.clear();
        save_samples(path, lean);
        const SampleDump lb = load_samples(path);
        CHECK(lb.dim == 0);
        CHECK(lb.embeddings.empty());
        CHECK(lb.grids[1].codes == dump.grids[1].codes);
    }

    SUBCASE("corruption is rejected") {
        save_samples(path, dump);
        std::ifstream is(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        is.close();

        {
            std::ofstream os("sample_dump_trunc.sdsm", std::ios::binary);
            os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
        }
        CHECK_THROWS(load_samples("sample_dump_trunc.sdsm"));

        {
            std::ofstream os("sample_dump_tail.sdsm", std::ios::binary);
            os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
            os.put('x');
        }
        CHECK_THROWS(load_samples("sample_dump_tail.sdsm"));

        {
            std::string bad = bytes;
            bad[0] = 'X';
            std::ofstream os("sample_dump_magic.sdsm", std::ios::binary);
            os.write(bad.data(), static_cast<std::streamsize>(bad.size()));
        }
        CHECK_THROWS(load_samples("sample_dump_magic.sdsm"));

        std::remove("sample_dump_trunc.sdsm");
        std::remove("sample_dump_tail.sdsm");
        std::remove("sample_dump_magic.sdsm");
    }

    SUBCASE("invalid dumps are rejected before writing") {
        SampleDump bad = dump;
        bad.grids[0].side = 2;
        CHECK_THROWS(save_samples(path, bad));

        bad = dump;
        bad.embeddings[0] = Matrix(9, 3);
        CHECK_THROWS(save_samples(path, bad));

        bad = dump;
        bad.grids[0].label = 70000;
        CHECK_THROWS(save_samples(path, bad));

        bad = dump;
        bad.dim = 0;
        CHECK_THROWS(save_samples(path, bad));
    }

    std::remove(path);
}

TEST_CASE("generated grids decode and dump end to end") {
    ArConfig c = tiny_config();
    ArModel model(c);
    VqConfig vc;
    vc.n1 = c.n1;
    vc.n2 = c.n2;
    vc.dim = 4;
    vc.seed = 2;
    VqModel vq(vc);

    SamplerConfig sc;
    sc.seed = 77;
    const std::vector<int> labels{0, 1, 2};
    const auto grids = generate_many(model, labels, sc);

    SampleDump dump;
    dump.side = c.side;
    dump.dim = vc.dim;
    dump.grids = grids;
    for (const TokenGrid& g : grids) {
        Matrix e = decode_grid(vq, g);
        // Store what the f32 payload will hold so the comparison is exact.
        for (double& v : e.data) v = static_cast<double>(static_cast<float>(v));
        dump.embeddings.push_back(std::move(e));
    }

    const char* path = "sample_dump_e2e.sdsm";
    save_samples(path, dump);
    const SampleDump back = load_samples(path);
    REQUIRE(back.grids.size() == grids.size());
    for (size_t s = 0; s < grids.size(); ++s) {
        CHECK(back.grids[s].codes == grids[s].codes);
        CHECK(max_abs_diff(back.embeddings[s].data, dump.embeddings[s].data) == 0.0);
    }
    std::remove(path);
}
