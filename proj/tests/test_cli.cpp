#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sdar/armodel.hpp"
#include "sdar/codebook.hpp"
#include "sdar/config.hpp"
#include "sdar/io_util.hpp"
#include "sdar/metrics.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/sampling.hpp"
#include "sdar/sequence.hpp"
#include "sdar/stats.hpp"

namespace fs = std::filesystem;
using namespace sdar;

namespace {

const std::string kOut = "cli_test_out";

int run_cli(const std::string& args) {
    const std::string cmd =
        std::string(SDAR_CLI_PATH) + " " + args + " >> " + kOut + "/exec.log 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("config text parses, preserves order, and round-trips") {
    const std::string text =
        "# experiment setup\n"
        "out.dir = runs/a\n"
        "\n"
        "vq.n1=16\n"
        "note-key_x.y = spaced value here\n";
    const ConfigMap cfg = parse_config_text(text);
    CHECK(cfg.get("out.dir") == "runs/a");
    CHECK(cfg.get("vq.n1") == "16");
    CHECK(cfg.get("note-key_x.y") == "spaced value here");
    CHECK(cfg.entries().size() == 3);
    CHECK(cfg.entries()[0].first == "out.dir");  // file order kept

    const ConfigMap again = parse_config_text(serialize_config(cfg));
    REQUIRE(again.entries().size() == cfg.entries().size());
    for (size_t i = 0; i < cfg.entries().size(); ++i) {
        CHECK(again.entries()[i].first == cfg.entries()[i].first);
        CHECK(again.entries()[i].second == cfg.entries()[i].second);
    }

    CHECK_THROWS_AS((void)parse_config_text("a=1\na=2\n"), ConfigError);   // duplicate
    CHECK_THROWS_AS((void)parse_config_text("just some words\n"), ConfigError);
    CHECK_THROWS_AS((void)parse_config_text("=value\n"), ConfigError);     // empty key
    CHECK_THROWS_AS((void)parse_config_text("bad key=1\n"), ConfigError);  // space in key
    CHECK_THROWS_AS((void)ConfigMap{}.get("absent"), ConfigError);

    ConfigMap override_check = cfg;
    override_check.set("vq.n1", "64");
    CHECK(override_check.get("vq.n1") == "64");
    CHECK(override_check.entries()[1].first == "vq.n1");  // replacement keeps position
}

TEST_CASE("config reader types every value and rejects strays") {
    ConfigMap cfg;
    cfg.set("a.int", "42");
    cfg.set("a.neg", "-7");
    cfg.set("a.float", "2.5e-3");
    cfg.set("a.yes", "true");
    cfg.set("a.no", "0");
    cfg.set("a.seed", "18446744073709551615");
    cfg.set("a.junk", "12abc");
    cfg.set("a.stray", "x");

    ConfigReader r(cfg);
    CHECK(r.get_int("a.int", 0) == 42);
    CHECK(r.get_int("a.neg", 0) == -7);
    CHECK(r.get_int("a.missing", 9) == 9);
    CHECK(r.get_double("a.float", 0) == 2.5e-3);
    CHECK(r.get_bool("a.yes", false));
    CHECK_FALSE(r.get_bool("a.no", true));
    CHECK(r.get_u64("a.seed", 0) == 18446744073709551615ull);
    CHECK(r.require_string("a.int") == "42");
    CHECK_THROWS_AS((void)r.get_int("a.junk", 0), ConfigError);
    CHECK_THROWS_AS((void)r.get_bool("a.junk", false), ConfigError);
    CHECK_THROWS_AS((void)r.require_string("a.missing"), ConfigError);
    r.get_string("a.junk", "");  // consume so only the stray is left

    try {
        r.finish();
        FAIL("finish accepted a key no getter asked for");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("a.stray") != std::string::npos);
    }
}

TEST_CASE("metrics rows serialize losslessly in the documented column order") {
    CHECK(metrics_csv_header() ==
          "experiment,config,recon_mse,val_nll,sem_acc,det_acc,toy_fid,class_acc");

    MetricsRow row;
    row.experiment = "sweep-codebook";
    row.config = "n1=64;n2=0";
    row.recon_mse = 1.0 / 3.0;
    row.val_nll = 1e-17;
    row.sem_acc = 0.1;
    row.det_acc = -1.0;
    row.toy_fid = 6.02214076e23;
    row.class_acc = 0.999999999999999;
    const MetricsRow back = metrics_from_csv(metrics_to_csv(row));
    CHECK(back.experiment == row.experiment);
    CHECK(back.config == row.config);
    CHECK(back.recon_mse == row.recon_mse);  // exact, not approximate
    CHECK(back.val_nll == row.val_nll);
    CHECK(back.sem_acc == row.sem_acc);
    CHECK(back.det_acc == row.det_acc);
    CHECK(back.toy_fid == row.toy_fid);
    CHECK(back.class_acc == row.class_acc);

    MetricsRow bad = row;
    bad.experiment = "has,comma";
    CHECK_THROWS(bad.validate());
    bad = row;
    bad.toy_fid = std::nan("");
    CHECK_THROWS(bad.validate());
    CHECK_THROWS((void)metrics_from_csv("only,two"));

    fs::create_directories(kOut);
    const std::string path = kOut + "/metrics_roundtrip.csv";
    save_metrics(path, std::vector<MetricsRow>{row, row});
    const auto loaded = load_metrics(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[1].recon_mse == row.recon_mse);
    std::ofstream(path) << "wrong,header\n";
    CHECK_THROWS((void)load_metrics(path));
}

TEST_CASE("distribution distance separates a real split from untrained samples") {
    SyntheticWorld world{WorldConfig{}};
    Rng rng(43);
    const auto grids = world.generate(64, rng);
    const int per = grids[0].patches.rows, dim = grids[0].patches.cols;
    const auto stack = [&](int lo, int hi) {
        Matrix out((hi - lo) * per, dim);
        int r = 0;
        for (int g = lo; g < hi; ++g)
            for (int i = 0; i < per; ++i, ++r)
                std::copy(grids[g].patches.row(i).begin(), grids[g].patches.row(i).end(),
                          out.row_ptr(r));
        return out;
    };
    const Matrix real_a = stack(0, 32), real_b = stack(32, 64);

    VqConfig vc;
    vc.n1 = 8;
    vc.n2 = 16;
    vc.seed = 21;
    VqModel vq(vc);
    Matrix all = stack(0, 64);
    vq.train_stage1(all, 150);
    vq.train_stage2(all, 90);

    ArConfig ac;
    ac.n1 = 8;
    ac.n2 = 16;
    ac.n_classes = world.config().n_classes;
    ac.side = world.config().side;
    ac.d_model = 16;
    ac.n_layers = 2;
    ac.n_heads = 2;
    ac.head_layers = 1;
    ac.d_s = 8;
    ac.d_d = 8;
    ac.d_compress = 4;
    ac.batch = 2;
    ac.seed = 5;
    ArModel untrained(ac);
    SamplerConfig sc;
    sc.seed = 7;
    std::vector<int> labels(8);
    for (int i = 0; i < 8; ++i) labels[i] = i % ac.n_classes;
    const auto samples = generate_many(untrained, labels, sc);
    Matrix gen(static_cast<int>(samples.size()) * per, dim);
    int r = 0;
    for (const auto& g : samples) {
        const Matrix e = decode_grid(vq, g);
        for (int i = 0; i < e.rows; ++i, ++r)
            std::copy(e.row(i).begin(), e.row(i).end(), gen.row_ptr(r));
    }
    const double split_dist = toy_fid(real_a, real_b);
    const double untrained_dist = toy_fid(real_a, gen);
    CHECK(split_dist >= 0.0);
    CHECK(untrained_dist > split_dist);
}

TEST_CASE("the command-line pipeline runs end to end with documented exit codes") {
    fs::remove_all(kOut);
    fs::create_directories(kOut);
    const std::string base = "--set out.dir=" + kOut;
    const std::string tiny_vq =
        " --set vq.n1=8 --set vq.n2=16 --set vq.stage1_steps=60 --set vq.stage2_steps=45";
    const std::string tiny_ar =
        " --set ar.d_model=16 --set ar.layers=2 --set ar.heads=2 --set ar.head_layers=1"
        " --set ar.d_s=8 --set ar.d_d=8 --set ar.d_compress=4 --set ar.batch=2";

    REQUIRE(run_cli("gen-data " + base + " --set data.count=24") == 0);
    REQUIRE(fs::exists(kOut + "/dataset.bin"));

    REQUIRE(run_cli("vq-train " + base + tiny_vq) == 0);
    REQUIRE(fs::exists(kOut + "/vq.ckpt"));
    REQUIRE(fs::exists(kOut + "/semantic.book"));
    REQUIRE(fs::exists(kOut + "/detail.book"));

    // Same seed and data give a byte-identical checkpoint.
    REQUIRE(run_cli("gen-data --set out.dir=" + kOut + "_b --set data.count=24") == 0);
    REQUIRE(run_cli("vq-train --set out.dir=" + kOut + "_b" + tiny_vq) == 0);
    CHECK(fnv1a_file(kOut + "/vq.ckpt") == fnv1a_file(kOut + "_b/vq.ckpt"));
    fs::remove_all(kOut + "_b");

    CHECK(run_cli("vq-eval " + base) == 0);
    auto rows = load_metrics(kOut + "/metrics.csv");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].experiment == "vq-eval");
    CHECK(rows[0].recon_mse >= 0.0);
    CHECK(rows[0].val_nll == -1.0);

    CHECK(run_cli("rearrange " + base + " --set rearrange.clusters=4") == 0);
    const Permutation perm = load_permutation(kOut + "/permutation.bin");
    CHECK(perm.forward.size() == 8);
    const Codebook rearranged = load_codebook(kOut + "/rearranged.book");
    CHECK(rearranged.count() == 8);

    REQUIRE(run_cli("ar-train " + base + tiny_ar +
                    " --set ar.steps=12 --set ar.eval_every=6") == 0);
    REQUIRE(fs::exists(kOut + "/ar.ckpt"));
    const std::string curve = read_file(kOut + "/ar_curve.csv");
    CHECK(curve.rfind("step,train_loss,val_nll,sem_acc,det_acc\n", 0) == 0);
    CHECK(std::count(curve.begin(), curve.end(), '\n') >= 3);

    REQUIRE(run_cli("sample " + base + " --set sample.count=4") == 0);
    const SampleDump dump = load_samples(kOut + "/samples.bin");
    CHECK(dump.grids.size() == 4);
    CHECK(dump.dim == 8);  // embeddings written by default
    const uint64_t first_hash = fnv1a_file(kOut + "/samples.bin");
    REQUIRE(run_cli("sample " + base + " --set sample.count=4") == 0);
    CHECK(fnv1a_file(kOut + "/samples.bin") == first_hash);  // per-seed golden hash

    CHECK(run_cli("eval-gen " + base) == 0);
    rows = load_metrics(kOut + "/metrics.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].experiment == "eval-gen");
    CHECK(std::isfinite(rows[1].toy_fid));
    CHECK(rows[1].class_acc >= 0.0);
    CHECK(rows[1].class_acc <= 1.0);

    CHECK(run_cli("code-distance " + base + " --set code_distance.ranks=0,1,4,16") == 0);
    CHECK(read_file(kOut + "/code_distance.csv").rfind("rank,mse\n", 0) == 0);

    CHECK(run_cli("vq-train " + base + " --set vq.typpo=1") == 2);       // unknown key
    CHECK(run_cli("vq-eval --set out.dir=" + kOut + "_empty") == 3);     // missing artifact
    fs::remove_all(kOut + "_empty");
    CHECK(run_cli("rearrange " + base + " --set rearrange.clusters=3") == 2);
    CHECK(run_cli("sample " + base + " --set sample.top_p=2.0") == 1);   // rejected control
    CHECK(run_cli("no-such-command") == 2);
}

TEST_CASE("a codebook matched to a noise-free world reconstructs exactly") {
    const std::string out = kOut + "_exact";
    fs::remove_all(out);
    fs::create_directories(out);
    const std::string world_keys =
        " --set world.sigma=0 --set world.rho=0 --set world.seed=9 --set data.count=16";
    REQUIRE(run_cli("gen-data --set out.dir=" + out + world_keys) == 0);

    WorldConfig wc;
    wc.sigma = 0.0;
    wc.rho = 0.0;
    wc.seed = 9;
    const SyntheticWorld world(wc);
    VqConfig vc;
    vc.n1 = wc.n_classes * wc.motifs_per_class;
    vc.n2 = 0;
    vc.learn_maps = false;
    VqModel vq(vc);
    vq.semantic_param().value = world.motifs();
    vq.save(out + "/vq.ckpt");

    REQUIRE(run_cli("vq-eval --set out.dir=" + out + world_keys) == 0);
    const auto rows = load_metrics(out + "/metrics.csv");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].recon_mse < 1e-6);
    fs::remove_all(out);
}

TEST_CASE("sweeps and the ablation emit one metrics row per configuration") {
    const std::string base = "--set out.dir=" + kOut;  // pipeline artifacts still present

    CHECK(run_cli("sweep-codebook " + base +
                  " --set sweep.sizes=4,8 --set sweep.vq_steps=40 --set sweep.ar_steps=6"
                  " --set sweep.ar_d_model=8 --set ar.batch=2") == 0);
    auto rows = load_metrics(kOut + "/sweep_codebook.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].config == "n1=4");
    CHECK(rows[1].config == "n1=8");
    CHECK(rows[1].recon_mse <= rows[0].recon_mse);
    CHECK(rows[0].val_nll > 0.0);

    CHECK(run_cli("sweep-cfg " + base + " --set sweep.samples=3") == 0);
    rows = load_metrics(kOut + "/sweep_cfg.csv");
    REQUIRE(rows.size() == 6);  // default 3x2 grid
    bool has_default_cell = false;
    for (const auto& row : rows) {
        CHECK(row.experiment == "sweep-cfg");
        CHECK(std::isfinite(row.toy_fid));
        has_default_cell = has_default_cell || row.config == "s_start=1.75;s_end=3";
    }
    CHECK(has_default_cell);

    CHECK(run_cli("paradigm-ablation " + base +
                  " --set ablation.steps=6 --set ablation.d_model=8 --set ar.batch=2") == 0);
    rows = load_metrics(kOut + "/ablation.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].config == "hierarchical");
    CHECK(rows[3].config == "grouped");
    for (const auto& row : rows) CHECK(row.val_nll > 0.0);

    CHECK(run_cli("selftest " + base) == 0);
}
