#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "sdar/codebook.hpp"
#include "sdar/io_util.hpp"
#include "sdar/rng.hpp"

using namespace sdar;

namespace {

Codebook random_book(int count, int dim, Rng& rng, double scale = 1.0) {
    Codebook b(count, dim);
    for (double& v : b.codes.data) v = scale * rng.normal();
    return b;
}

}  // namespace

TEST_CASE("nearest_code matches an exhaustive reference and breaks ties low") {
    Rng rng(101);
    Codebook book = random_book(32, 6, rng);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> q(6);
        for (double& v : q) v = rng.normal();
        auto r = nearest_code(book, q);
        int ref = 0;
        double refd = squared_distance(book.code(0), q);
        for (int i = 1; i < book.count(); ++i) {
            const double d = squared_distance(book.code(i), q);
            if (d < refd) {
                refd = d;
                ref = i;
            }
        }
        CHECK(r.index == ref);
        CHECK(r.sq_dist == doctest::Approx(refd).epsilon(1e-12));
    }

    Codebook dup(3, 2);
    dup.codes = Matrix::from({{1.0, 1.0}, {0.0, 0.0}, {0.0, 0.0}});
    std::vector<double> q = {0.1, -0.1};
    CHECK(nearest_code(dup, q).index == 1);  // rows 1 and 2 tie
}

TEST_CASE("nearest_code on a two-code book gives index 1 and the right distance") {
    Codebook book(2, 2);
    book.codes = Matrix::from({{0.0, 0.0}, {1.0, 0.0}});
    std::vector<double> e = {0.9, 0.2};
    auto r = nearest_code(book, e);
    CHECK(r.index == 1);
    CHECK(r.sq_dist == doctest::Approx(0.01 + 0.04).epsilon(1e-12));
}

TEST_CASE("code_distance is a metric on code vectors") {
    std::vector<double> a = {0.0, 0.0}, b = {3.0, 4.0}, c = {1.0, 1.0};
    CHECK(code_distance(a, b) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(code_distance(a, b) == code_distance(b, a));
    CHECK(code_distance(a, a) == 0.0);
    CHECK(code_distance(a, b) <= code_distance(a, c) + code_distance(c, b) + 1e-12);
}

TEST_CASE("balanced_kmeans recovers the optimal balanced bipartition of 4 points") {
    Matrix pts = Matrix::from({{0.0, 0.0}, {0.0, 1.0}, {10.0, 0.0}, {10.0, 1.0}});
    Rng rng(7);
    auto res = balanced_kmeans(pts, 2, 100, rng);
    REQUIRE(res.assignment.size() == 4);
    CHECK(res.assignment[0] == res.assignment[1]);
    CHECK(res.assignment[2] == res.assignment[3]);
    CHECK(res.assignment[0] != res.assignment[2]);

    // Reference: enumerate all three balanced bipartitions and keep the best.
    const int parts[3][4] = {{0, 0, 1, 1}, {0, 1, 0, 1}, {0, 1, 1, 0}};
    double best = 1e300;
    for (const auto& p : parts) {
        Matrix centers(2, 2);
        std::vector<int> a(p, p + 4);
        for (int i = 0; i < 4; ++i) axpy(0.5, pts.row(i), centers.row(a[i]));
        best = std::min(best, clustering_objective(pts, centers, a));
    }
    Matrix centers(2, 2);
    for (int i = 0; i < 4; ++i) axpy(0.5, pts.row(i), centers.row(res.assignment[i]));
    CHECK(clustering_objective(pts, centers, res.assignment) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("balanced_kmeans: exact cluster sizes, monotone objective, determinism") {
    Rng data_rng(55);
    Matrix pts(96, 5);
    for (double& v : pts.data) v = data_rng.normal();

    Rng rng_a(9), rng_b(9);
    auto a = balanced_kmeans(pts, 8, 100, rng_a);
    auto b = balanced_kmeans(pts, 8, 100, rng_b);
    CHECK(a.assignment == b.assignment);

    std::vector<int> counts(8, 0);
    for (int c : a.assignment) counts[c]++;
    for (int c = 0; c < 8; ++c) CHECK(counts[c] == 12);

    REQUIRE(!a.objective.empty());
    for (size_t i = 1; i < a.objective.size(); ++i) CHECK(a.objective[i] <= a.objective[i - 1]);

    // centers equal the mean of their assigned points at termination
    Matrix means(8, 5);
    for (int i = 0; i < 96; ++i) axpy(1.0 / 12.0, pts.row(i), means.row(a.assignment[i]));
    for (size_t i = 0; i < means.size(); ++i)
        CHECK(a.centers.data[i] == doctest::Approx(means.data[i]).epsilon(1e-9));
}

TEST_CASE("balanced_kmeans degenerate shapes and rejections") {
    Rng rng(3);
    Matrix pts(6, 2);
    for (double& v : pts.data) v = rng.normal();

    Rng r1(1);
    auto one = balanced_kmeans(pts, 1, 10, r1);
    for (int c : one.assignment) CHECK(c == 0);
    for (int j = 0; j < 2; ++j) {
        double mean = 0.0;
        for (int i = 0; i < 6; ++i) mean += pts.at(i, j) / 6.0;
        CHECK(one.centers.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
    }

    Rng r2(1);
    auto all = balanced_kmeans(pts, 6, 10, r2);
    std::vector<int> seen(6, 0);
    for (int c : all.assignment) seen[c]++;
    for (int c : seen) CHECK(c == 1);

    Rng r3(1);
    CHECK_THROWS_AS((void)balanced_kmeans(pts, 4, 10, r3), std::runtime_error);   // 6 % 4 != 0
    CHECK_THROWS_AS((void)balanced_kmeans(pts, 12, 10, r3), std::runtime_error);  // n > N
}

TEST_CASE("rearrange satisfies the block invariant with a verified bijection") {
    Rng rng(77);
    Codebook book = random_book(64, 4, rng);
    Rng km_rng(5);
    auto r = rearrange(book, 8, 100, km_rng);
    const int m = 64 / 8;

    std::vector<int> hits(64, 0);
    for (int old = 0; old < 64; ++old) {
        const int neu = r.perm.forward[old];
        CHECK(r.perm.inverse[neu] == old);
        hits[neu]++;
        // cluster is recoverable from the new index alone
        CHECK(r.cluster_of_old[old] == neu / m);
    }
    for (int h : hits) CHECK(h == 1);

    // block members keep ascending old-index order
    for (int blk = 0; blk < 8; ++blk)
        for (int i = 1; i < m; ++i)
            CHECK(r.perm.inverse[blk * m + i] > r.perm.inverse[blk * m + i - 1]);

    // permuted rows carry the original vectors; undoing the permutation
    // restores the original order
    for (int old = 0; old < 64; ++old)
        for (int j = 0; j < 4; ++j)
            CHECK(r.book.codes.at(r.perm.forward[old], j) == book.codes.at(old, j));
    Permutation undo{r.perm.inverse, r.perm.forward};
    Codebook restored = apply_permutation(r.book, undo);
    for (size_t i = 0; i < restored.codes.size(); ++i)
        CHECK(restored.codes.data[i] == book.codes.data[i]);
}

TEST_CASE("codebook file round-trips bit-exactly and rejects corruption") {
    Rng rng(13);
    Codebook book = random_book(16, 8, rng);
    const std::string path = "test_book.sdcb";
    save_codebook(book, path);
    const uint64_t h1 = fnv1a_file(path);

    Codebook loaded = load_codebook(path);
    CHECK(loaded.count() == 16);
    CHECK(loaded.dim() == 8);
    save_codebook(loaded, path);
    CHECK(fnv1a_file(path) == h1);  // save(load(f)) is byte-identical

    // loaded values equal the f32 rounding of the originals
    for (size_t i = 0; i < book.codes.size(); ++i)
        CHECK(loaded.codes.data[i] == static_cast<double>(static_cast<float>(book.codes.data[i])));

    SUBCASE("bad magic") {
        std::ofstream os(path, std::ios::binary);
        os.write("NOPE", 4);
        os.close();
        CHECK_THROWS_WITH_AS((void)load_codebook(path),
                             doctest::Contains("bad magic"), std::runtime_error);
    }
    SUBCASE("bad version") {
        auto os = open_output(path);
        write_magic(os, "SDCB");
        write_u32_le(os, 9);
        os.close();
        CHECK_THROWS_WITH_AS((void)load_codebook(path),
                             doctest::Contains("unsupported version"), std::runtime_error);
    }
    SUBCASE("truncated payload") {
        auto os = open_output(path);
        write_magic(os, "SDCB");
        write_u32_le(os, 1);
        write_u32_le(os, 4);
        write_u32_le(os, 4);
        write_f32_le(os, 1.0f);  // 15 floats short
        os.close();
        CHECK_THROWS_WITH_AS((void)load_codebook(path),
                             doctest::Contains("truncated"), std::runtime_error);
    }
    SUBCASE("trailing bytes") {
        save_codebook(book, path);
        std::ofstream os(path, std::ios::binary | std::ios::app);
        os.put('x');
        os.close();
        CHECK_THROWS_WITH_AS((void)load_codebook(path),
                             doctest::Contains("trailing"), std::runtime_error);
    }
    std::remove(path.c_str());
}

TEST_CASE("permutation sidecars round-trip and reject corruption") {
    Permutation perm;
    perm.forward = {2, 0, 3, 1};
    perm.inverse = {1, 3, 0, 2};
    const char* path = "perm_test.sdpm";
    save_permutation(perm, path);
    const Permutation back = load_permutation(path);
    CHECK(back.forward == perm.forward);
    CHECK(back.inverse == perm.inverse);

    Permutation broken = perm;
    broken.inverse = {0, 1, 2, 3};
    CHECK_THROWS(save_permutation(broken, path));

    // Flip one stored index so the maps stop being mutually inverse.
    save_permutation(perm, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(12);
        const char zero[4] = {0, 0, 0, 0};
        f.write(zero, 4);
    }
    CHECK_THROWS(load_permutation(path));
    std::remove(path);
}
