// Command-line workbench: dataset generation, two-stage quantizer training,
// codebook rearrangement, sequence-model training, guided sampling, and the
// trend experiments, all driven by one flat key=value configuration.
//
// Exit codes: 0 success, 2 configuration error, 3 missing artifact,
// 4 invariant violation during a verification pass, 1 anything else.
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sdar/acceptance.hpp"
#include "sdar/armodel.hpp"
#include "sdar/codebook.hpp"
#include "sdar/config.hpp"
#include "sdar/io_util.hpp"
#include "sdar/metrics.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/rng.hpp"
#include "sdar/sampling.hpp"
#include "sdar/sequence.hpp"
#include "sdar/stats.hpp"

namespace fs = std::filesystem;
using namespace sdar;

namespace {

std::string stamp(const char* fmt, ...) {
    char buf[768];
    va_list ap;
    va_start(ap, fmt);
    std::vsnprintf(buf, sizeof buf, fmt, ap);
    va_end(ap);
    return buf;
}

// Every key any command understands. A present key outside this list is a
// typo and gets rejected before any work starts, whichever command runs.
const char* const kSchema[] = {
    "out.dir",
    "world.classes", "world.motifs", "world.dim", "world.side", "world.rho",
    "world.sigma", "world.motif_scale", "world.motif_spread", "world.seed",
    "data.count", "data.seed", "data.path",
    "vq.n1", "vq.n2", "vq.dim", "vq.beta", "vq.lambda_rec", "vq.lr", "vq.batch",
    "vq.learn_maps", "vq.dead_code_steps", "vq.seed", "vq.stage1_steps",
    "vq.stage2_steps", "vq.ckpt", "vq.semantic_book", "vq.detail_book",
    "rearrange.book", "rearrange.clusters", "rearrange.iters", "rearrange.seed",
    "rearrange.out", "rearrange.perm",
    "ar.d_model", "ar.layers", "ar.heads", "ar.head_layers", "ar.d_s", "ar.d_d",
    "ar.d_compress", "ar.window", "ar.lambda_s", "ar.lambda_cce", "ar.clusters",
    "ar.paradigm", "ar.class_dropout", "ar.batch", "ar.seed", "ar.lr",
    "ar.weight_decay", "ar.steps", "ar.eval_every", "ar.val_frac", "ar.ckpt",
    "ar.curve",
    "sample.count", "sample.seed", "sample.temperature", "sample.top_k",
    "sample.top_p", "sample.s_start", "sample.s_end", "sample.attention_guided",
    "sample.raw_alpha", "sample.alpha_floor", "sample.reduce",
    "sample.embeddings", "sample.out",
    "eval.metrics", "eval.experiment", "eval.dump",
    "sweep.sizes", "sweep.vq_steps", "sweep.ar_steps", "sweep.ar_d_model",
    "sweep.samples", "sweep.metrics",
    "cfg_grid.starts", "cfg_grid.ends",
    "ablation.steps", "ablation.d_model", "ablation.seed", "ablation.metrics",
    "code_distance.ranks", "code_distance.csv",
};

void check_schema(const ConfigMap& cfg) {
    std::string bad;
    for (const auto& [key, value] : cfg.entries()) {
        if (std::find_if(std::begin(kSchema), std::end(kSchema),
                         [&](const char* k) { return key == k; }) == std::end(kSchema)) {
            if (!bad.empty()) bad += ", ";
            bad += key;
        }
    }
    if (!bad.empty()) throw ConfigError("unknown config keys: " + bad);
}

void apply_sets(ConfigMap& cfg, const std::vector<std::string>& sets) {
    for (const std::string& kv : sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
}

std::vector<long long> parse_list(const std::string& key, const std::string& text) {
    std::vector<long long> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        const std::string item = text.substr(pos, comma - pos);
        long long v = 0;
        const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || p != item.data() + item.size())
            throw ConfigError(key + ": expected a comma-separated integer list, got '" + text + "'");
        out.push_back(v);
        pos = comma + 1;
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& text) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        const std::string item = text.substr(pos, comma - pos);
        try {
            size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a comma-separated number list, got '" + text + "'");
        }
        pos = comma + 1;
    }
    return out;
}

/// Shared command state: config access plus path resolution under the
/// output root (key `out.dir`, else $SDAR_OUT, else "out").
struct Ctx {
    ConfigReader r;
    std::string out_dir;

    explicit Ctx(const ConfigMap& cfg) : r(cfg) {
        const char* env = std::getenv("SDAR_OUT");
        out_dir = r.get_string("out.dir", env != nullptr ? env : "out");
        fs::create_directories(out_dir);
    }

    std::string resolve(const std::string& p) const {
        return fs::path(p).is_absolute() ? p : out_dir + "/" + p;
    }
    std::string path(const std::string& key, const std::string& def) {
        return resolve(r.get_string(key, def));
    }
    std::string input(const std::string& key, const std::string& def, const char* what) {
        const std::string p = path(key, def);
        if (!fs::exists(p))
            throw MissingArtifact(stamp("%s not found at %s (key %s)", what, p.c_str(),
                                        key.c_str()));
        return p;
    }
};

void write_text(const std::string& path, const std::string& text) {
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << text;
    if (!out) throw MissingArtifact("cannot write " + path);
}

void append_metrics(const std::string& path, const MetricsRow& row) {
    std::vector<MetricsRow> rows;
    if (fs::exists(path)) rows = load_metrics(path);
    rows.push_back(row);
    save_metrics(path, rows);
}

double or_missing(double v) { return std::isnan(v) ? -1.0 : v; }

WorldConfig world_config(Ctx& c) {
    WorldConfig w;
    w.n_classes = c.r.get_int("world.classes", w.n_classes);
    w.motifs_per_class = c.r.get_int("world.motifs", w.motifs_per_class);
    w.dim = c.r.get_int("world.dim", w.dim);
    w.side = c.r.get_int("world.side", w.side);
    w.rho = c.r.get_double("world.rho", w.rho);
    w.sigma = c.r.get_double("world.sigma", w.sigma);
    w.motif_scale = c.r.get_double("world.motif_scale", w.motif_scale);
    w.motif_spread = c.r.get_double("world.motif_spread", w.motif_spread);
    w.seed = c.r.get_u64("world.seed", w.seed);
    return w;
}

VqConfig vq_config(Ctx& c) {
    VqConfig v;
    v.n1 = c.r.get_int("vq.n1", v.n1);
    v.n2 = c.r.get_int("vq.n2", v.n2);
    v.dim = c.r.get_int("vq.dim", v.dim);
    v.beta = c.r.get_double("vq.beta", v.beta);
    v.lambda_rec = c.r.get_double("vq.lambda_rec", v.lambda_rec);
    v.lr = c.r.get_double("vq.lr", v.lr);
    v.batch = c.r.get_int("vq.batch", v.batch);
    v.learn_maps = c.r.get_bool("vq.learn_maps", v.learn_maps);
    v.dead_code_steps = c.r.get_int("vq.dead_code_steps", v.dead_code_steps);
    v.seed = c.r.get_u64("vq.seed", v.seed);
    return v;
}

Paradigm parse_paradigm(const std::string& name) {
    if (name == "hierarchical") return Paradigm::fused_hierarchical;
    if (name == "independent") return Paradigm::fused_independent;
    if (name == "alternating") return Paradigm::alternating;
    if (name == "grouped") return Paradigm::grouped_sequential;
    throw ConfigError("ar.paradigm: unknown layout '" + name +
                      "' (hierarchical, independent, alternating, grouped)");
}

AttentionReduce parse_reduce(const std::string& name) {
    if (name == "final_mean") return AttentionReduce::final_mean;
    if (name == "final_max") return AttentionReduce::final_max;
    if (name == "all_mean") return AttentionReduce::all_mean;
    throw ConfigError("sample.reduce: unknown reduction '" + name +
                      "' (final_mean, final_max, all_mean)");
}

/// Model shape from config keys plus everything the artifacts pin down
/// (vocabulary sizes, grid side, class count).
ArConfig ar_config(Ctx& c, const VqModel& vq, int side, int n_classes) {
    ArConfig a;
    a.n1 = vq.config().n1;
    a.n2 = vq.config().n2;
    a.n_classes = n_classes;
    a.side = side;
    a.d_model = c.r.get_int("ar.d_model", a.d_model);
    a.n_layers = c.r.get_int("ar.layers", a.n_layers);
    a.n_heads = c.r.get_int("ar.heads", a.n_heads);
    a.head_layers = c.r.get_int("ar.head_layers", a.head_layers);
    a.d_s = c.r.get_int("ar.d_s", a.d_s);
    a.d_d = c.r.get_int("ar.d_d", a.d_d);
    a.d_compress = c.r.get_int("ar.d_compress", a.d_compress);
    a.k = c.r.get_int("ar.window", a.k);
    a.lambda_s = c.r.get_double("ar.lambda_s", a.lambda_s);
    a.lambda_cce = c.r.get_double("ar.lambda_cce", a.lambda_cce);
    a.n_clusters = c.r.get_int("ar.clusters", a.n_clusters);
    a.paradigm = parse_paradigm(c.r.get_string("ar.paradigm", "hierarchical"));
    a.class_dropout = c.r.get_double("ar.class_dropout", a.class_dropout);
    a.batch = c.r.get_int("ar.batch", a.batch);
    a.seed = c.r.get_u64("ar.seed", a.seed);
    a.opt.lr = c.r.get_double("ar.lr", a.opt.lr);
    a.opt.weight_decay = c.r.get_double("ar.weight_decay", a.opt.weight_decay);
    return a;
}

SamplerConfig sampler_config(Ctx& c) {
    SamplerConfig s;
    s.temperature = c.r.get_double("sample.temperature", s.temperature);
    s.top_k = c.r.get_int("sample.top_k", s.top_k);
    s.top_p = c.r.get_double("sample.top_p", s.top_p);
    s.schedule.s_start = c.r.get_double("sample.s_start", 1.75);
    s.schedule.s_end = c.r.get_double("sample.s_end", 3.0);
    s.attention_guided = c.r.get_bool("sample.attention_guided", s.attention_guided);
    s.raw_alpha = c.r.get_bool("sample.raw_alpha", s.raw_alpha);
    s.alpha_floor = c.r.get_double("sample.alpha_floor", s.alpha_floor);
    s.reduce = parse_reduce(c.r.get_string("sample.reduce", "final_mean"));
    s.seed = c.r.get_u64("sample.seed", s.seed);
    return s;
}

Matrix flatten_grids(const std::vector<LabeledGrid>& grids) {
    const int per = grids.front().patches.rows, dim = grids.front().patches.cols;
    Matrix out(static_cast<int>(grids.size()) * per, dim);
    int row = 0;
    for (const auto& g : grids)
        for (int i = 0; i < per; ++i, ++row)
            std::copy(g.patches.row(i).begin(), g.patches.row(i).end(), out.row_ptr(row));
    return out;
}

Dataset load_data(Ctx& c) {
    return load_dataset(c.input("data.path", "dataset.bin", "dataset cache"));
}

VqModel load_vq(Ctx& c) {
    return VqModel::load(c.input("vq.ckpt", "vq.ckpt", "quantizer checkpoint"));
}

/// Chronological split; the generator draws samples independently, so the
/// tail is an unbiased holdout.
std::pair<std::vector<TokenGrid>, std::vector<TokenGrid>> split_tokens(
    std::vector<TokenGrid> tokens, double val_frac) {
    if (!(val_frac > 0.0 && val_frac < 1.0))
        throw ConfigError("ar.val_frac must lie in (0, 1)");
    const auto n = static_cast<long long>(tokens.size());
    const long long val = std::clamp<long long>(std::llround(val_frac * n), 1, n - 1);
    std::vector<TokenGrid> va(tokens.end() - val, tokens.end());
    tokens.resize(tokens.size() - val);
    return {std::move(tokens), std::move(va)};
}

// ---------------------------------------------------------------- commands

void cmd_gen_data(Ctx& c) {
    const WorldConfig wc = world_config(c);
    SyntheticWorld world(wc);
    const int count = c.r.get_int("data.count", 512);
    if (count <= 0) throw ConfigError("data.count must be positive");
    Rng rng(c.r.get_u64("data.seed", 1));
    const auto grids = world.generate(count, rng);
    const std::string out = c.path("data.path", "dataset.bin");
    save_dataset(out, grids, wc.n_classes);
    std::printf("wrote %d grids (side %d, dim %d, %d classes) to %s\nhash %016llx\n", count,
                wc.side, wc.dim, wc.n_classes, out.c_str(),
                static_cast<unsigned long long>(fnv1a_file(out)));
}

void cmd_vq_train(Ctx& c) {
    const Dataset ds = load_data(c);
    const Matrix patches = flatten_grids(ds.grids);
    VqModel model(vq_config(c));
    model.train_stage1(patches, c.r.get_int("vq.stage1_steps", 400));
    if (!model.single_codebook()) {
        model.train_stage2(patches, c.r.get_int("vq.stage2_steps", 400));
        const auto& log = model.schedule().log;
        for (size_t i = 0; i < log.size(); ++i) {
            const VqUpdateKind want =
                i % 3 == 2 ? VqUpdateKind::semantic_only : VqUpdateKind::joint;
            if (log[i] != want)
                throw InvariantViolation(stamp("stage-2 update %zu broke the 2:1 interleave", i));
        }
        std::printf("stage-2 interleave OK: %d joint / %d semantic-only updates\n",
                    model.schedule().joint_count(), model.schedule().semantic_count());
    }
    const std::string ckpt = c.path("vq.ckpt", "vq.ckpt");
    model.save(ckpt);
    save_codebook(model.semantic_book(), c.path("vq.semantic_book", "semantic.book"));
    if (!model.single_codebook())
        save_codebook(model.detail_book(), c.path("vq.detail_book", "detail.book"));
    std::printf("reconstruction MSE %.6f over %d patches\ncheckpoint %s\nhash %016llx\n",
                model.recon_mse(patches), patches.rows, ckpt.c_str(),
                static_cast<unsigned long long>(fnv1a_file(ckpt)));
}

void cmd_vq_eval(Ctx& c) {
    const Dataset ds = load_data(c);
    VqModel model = load_vq(c);
    const Matrix patches = flatten_grids(ds.grids);
    const double mse = model.recon_mse(patches);
    MetricsRow row;
    row.experiment = c.r.get_string("eval.experiment", "vq-eval");
    row.config = stamp("n1=%d;n2=%d", model.config().n1, model.config().n2);
    row.recon_mse = mse;
    const std::string out = c.path("eval.metrics", "metrics.csv");
    append_metrics(out, row);
    std::printf("reconstruction MSE %.8f over %d patches -> %s\n", mse, patches.rows,
                out.c_str());
}

void cmd_rearrange(Ctx& c) {
    const std::string default_book = c.r.get_string("vq.semantic_book", "semantic.book");
    const std::string in_path = c.input("rearrange.book", default_book, "codebook");
    const Codebook book = load_codebook(in_path);
    const int clusters = c.r.get_int("rearrange.clusters", 4);
    if (clusters <= 0 || book.count() % clusters != 0)
        throw ConfigError(stamp("rearrange.clusters must divide the %d codes, got %d",
                                book.count(), clusters));
    Rng rng(c.r.get_u64("rearrange.seed", 0));
    const auto res = rearrange(book, clusters, c.r.get_int("rearrange.iters", 50), rng);

    // Verification pass over the artifact about to be written.
    const int m = book.count() / clusters;
    const Codebook replayed = apply_permutation(book, res.perm);
    for (int i = 0; i < book.count(); ++i) {
        if (res.perm.inverse[res.perm.forward[i]] != i)
            throw InvariantViolation("permutation is not a bijection");
        if (res.cluster_of_old[res.perm.inverse[i]] != i / m)
            throw InvariantViolation(stamp("code at new index %d sits outside its block", i));
        for (int k = 0; k < book.dim(); ++k) {
            if (res.book.codes.at(i, k) != replayed.codes.at(i, k))
                throw InvariantViolation("rearranged book disagrees with its permutation");
            if (res.book.codes.at(res.perm.forward[i], k) != book.codes.at(i, k))
                throw InvariantViolation("applying the inverse does not restore the original");
        }
    }
    double intra = 0, inter = 0;
    long long n_intra = 0, n_inter = 0;
    for (int i = 0; i < book.count(); ++i)
        for (int j = i + 1; j < book.count(); ++j) {
            const double d = code_distance(res.book, i, j);
            if (i / m == j / m)
                intra += d, ++n_intra;
            else
                inter += d, ++n_inter;
        }
    const std::string out = c.path("rearrange.out", "rearranged.book");
    save_codebook(res.book, out);
    save_permutation(res.perm, c.path("rearrange.perm", "permutation.bin"));
    std::printf("verify OK: %d clusters of %d, block invariant holds, permutation round-trips\n"
                "mean code distance intra-cluster %.4f vs inter-cluster %.4f\nwrote %s\n",
                clusters, m, intra / std::max(n_intra, 1LL), inter / std::max(n_inter, 1LL),
                out.c_str());
}

void cmd_ar_train(Ctx& c) {
    const Dataset ds = load_data(c);
    const VqModel vq = load_vq(c);
    auto [train_set, val_set] =
        split_tokens(tokenize_dataset(vq, ds.grids), c.r.get_double("ar.val_frac", 0.125));
    ArModel model(ar_config(c, vq, ds.grids.front().side, ds.n_classes));

    const int steps = c.r.get_int("ar.steps", 2000);
    ArTrainLog log;
    model.train(train_set, val_set, steps, c.r.get_int("ar.eval_every", 200), &log);

    std::string csv = "step,train_loss,val_nll,sem_acc,det_acc\n";
    for (const auto& p : log.points) {
        csv += stamp("%lld,%.10g", static_cast<long long>(p.step), p.train_loss);
        for (double v : {p.val_nll, p.sem_acc, p.det_acc})
            csv += std::isnan(v) ? "," : stamp(",%.10g", v);
        csv += '\n';
    }
    write_text(c.path("ar.curve", "ar_curve.csv"), csv);

    const std::string ckpt = c.path("ar.ckpt", "ar.ckpt");
    model.save(ckpt);
    const ArEval ev = model.evaluate(val_set);
    std::printf("%zu parameters, %d steps (%zu train / %zu val grids)\n"
                "val NLL %.4f, coarse acc %.3f, detail acc %.3f\ncheckpoint %s\nhash %016llx\n",
                model.param_scalars(), steps, train_set.size(), val_set.size(), ev.nll,
                ev.sem_acc, or_missing(ev.det_acc), ckpt.c_str(),
                static_cast<unsigned long long>(fnv1a_file(ckpt)));
}

void cmd_sample(Ctx& c) {
    ArModel model =
        ArModel::load(c.input("ar.ckpt", "ar.ckpt", "sequence-model checkpoint"));
    const SamplerConfig sc = sampler_config(c);
    const int count = c.r.get_int("sample.count", 64);
    if (count <= 0) throw ConfigError("sample.count must be positive");
    std::vector<int> labels(count);
    for (int i = 0; i < count; ++i) labels[i] = i % model.config().n_classes;

    SampleDump dump;
    dump.side = model.config().side;
    dump.grids = generate_many(model, labels, sc);
    if (c.r.get_bool("sample.embeddings", true)) {
        const VqModel vq = load_vq(c);
        dump.dim = vq.config().dim;
        for (const auto& g : dump.grids) dump.embeddings.push_back(decode_grid(vq, g));
    }
    const std::string out = c.path("sample.out", "samples.bin");
    save_samples(out, dump);
    std::printf("%d samples (scale %g -> %g%s) to %s\nhash %016llx\n", count,
                sc.schedule.s_start, sc.schedule.s_end,
                sc.attention_guided ? ", attention-guided" : "", out.c_str(),
                static_cast<unsigned long long>(fnv1a_file(out)));
}

void cmd_eval_gen(Ctx& c) {
    const std::string dump_default = c.r.get_string("sample.out", "samples.bin");
    const SampleDump dump = load_samples(c.input("eval.dump", dump_default, "sample dump"));
    const Dataset ds = load_data(c);
    const SyntheticWorld world(world_config(c));

    std::vector<Matrix> decoded;
    const std::vector<Matrix>* embeddings = &dump.embeddings;
    if (dump.dim == 0) {
        const VqModel vq = load_vq(c);
        for (const auto& g : dump.grids) decoded.push_back(decode_grid(vq, g));
        embeddings = &decoded;
    }

    const Matrix real = flatten_grids(ds.grids);
    const int per = (*embeddings)[0].rows, dim = (*embeddings)[0].cols;
    Matrix gen(static_cast<int>(embeddings->size()) * per, dim);
    int row = 0, hits = 0;
    for (size_t i = 0; i < embeddings->size(); ++i) {
        const Matrix& e = (*embeddings)[i];
        for (int j = 0; j < per; ++j, ++row)
            std::copy(e.row(j).begin(), e.row(j).end(), gen.row_ptr(row));
        if (world.classify_grid(e) == dump.grids[i].label) ++hits;
    }
    const double fid = toy_fid(real, gen);
    const double acc = static_cast<double>(hits) / static_cast<double>(dump.grids.size());

    MetricsRow out_row;
    out_row.experiment = c.r.get_string("eval.experiment", "eval-gen");
    out_row.config = stamp("samples=%zu", dump.grids.size());
    out_row.toy_fid = fid;
    out_row.class_acc = acc;
    const std::string out = c.path("eval.metrics", "metrics.csv");
    append_metrics(out, out_row);
    std::printf("toy distributional distance %.6f, class accuracy %.3f over %zu samples -> %s\n",
                fid, acc, dump.grids.size(), out.c_str());
}

void cmd_sweep_codebook(Ctx& c) {
    const Dataset ds = load_data(c);
    const Matrix patches = flatten_grids(ds.grids);
    const auto sizes = parse_list("sweep.sizes", c.r.get_string("sweep.sizes", "16,64,256,1024"));
    const int vq_steps = c.r.get_int("sweep.vq_steps", 400);
    const int ar_steps = c.r.get_int("sweep.ar_steps", 150);
    const int d_model = c.r.get_int("sweep.ar_d_model", 32);
    const std::string out = c.path("sweep.metrics", "sweep_codebook.csv");

    std::vector<double> mses;
    for (const long long size : sizes) {
        VqConfig vc = vq_config(c);
        vc.n1 = static_cast<int>(size);
        vc.n2 = 0;
        VqModel vq(vc);
        vq.train_stage1(patches, vq_steps);
        const double mse = vq.recon_mse(patches);
        mses.push_back(mse);

        auto [tr, va] =
            split_tokens(tokenize_dataset(vq, ds.grids), c.r.get_double("ar.val_frac", 0.125));
        ArConfig ac = ar_config(c, vq, ds.grids.front().side, ds.n_classes);
        ac.d_model = d_model;
        ac.n_layers = 2;
        ac.n_heads = 2;
        ac.head_layers = 1;
        ac.d_s = d_model / 2;
        ac.d_d = d_model / 2;
        ac.d_compress = std::max(2, d_model / 4);
        ac.batch = 4;
        ArModel model(ac);
        model.train(tr, va, ar_steps, ar_steps);
        const ArEval ev = model.evaluate(va);

        MetricsRow row;
        row.experiment = "sweep-codebook";
        row.config = stamp("n1=%lld", size);
        row.recon_mse = mse;
        row.val_nll = ev.nll;
        row.sem_acc = ev.sem_acc;
        row.det_acc = or_missing(ev.det_acc);
        append_metrics(out, row);
        std::printf("n1=%-5lld  MSE %.6f  gen NLL %.4f  acc %.3f\n", size, mse, ev.nll,
                    ev.sem_acc);
    }
    for (size_t i = 1; i < mses.size(); ++i)
        if (mses[i] > mses[i - 1] + 1e-12)
            throw InvariantViolation(stamp("reconstruction MSE rose from size %lld to %lld",
                                           sizes[i - 1], sizes[i]));
    std::printf("reconstruction MSE non-increasing across %zu sizes -> %s\n", sizes.size(),
                out.c_str());
}

void cmd_sweep_cfg(Ctx& c) {
    ArModel model =
        ArModel::load(c.input("ar.ckpt", "ar.ckpt", "sequence-model checkpoint"));
    const VqModel vq = load_vq(c);
    const Dataset ds = load_data(c);
    const SyntheticWorld world(world_config(c));
    const Matrix real = flatten_grids(ds.grids);

    const auto starts =
        parse_double_list("cfg_grid.starts", c.r.get_string("cfg_grid.starts", "1.0,1.75,2.5"));
    const auto ends =
        parse_double_list("cfg_grid.ends", c.r.get_string("cfg_grid.ends", "1.75,3.0"));
    const int count = c.r.get_int("sweep.samples", 32);
    if (count <= 0) throw ConfigError("sweep.samples must be positive");
    std::vector<int> labels(count);
    for (int i = 0; i < count; ++i) labels[i] = i % model.config().n_classes;
    const std::string out = c.path("sweep.metrics", "sweep_cfg.csv");

    SamplerConfig base = sampler_config(c);
    uint64_t cell = 0;
    for (const double s0 : starts)
        for (const double s1 : ends) {
            SamplerConfig sc = base;
            sc.schedule.s_start = s0;
            sc.schedule.s_end = s1;
            // Cells draw from disjoint streams, so the grid can be split
            // across processes without changing any cell's output.
            sc.seed = derive_seed(base.seed, ++cell);
            const auto grids = generate_many(model, labels, sc);
            Matrix gen(count * model.config().tokens(), vq.config().dim);
            int row = 0, hits = 0;
            for (int i = 0; i < count; ++i) {
                const Matrix e = decode_grid(vq, grids[i]);
                for (int j = 0; j < e.rows; ++j, ++row)
                    std::copy(e.row(j).begin(), e.row(j).end(), gen.row_ptr(row));
                if (world.classify_grid(e) == labels[i]) ++hits;
            }
            MetricsRow mrow;
            mrow.experiment = "sweep-cfg";
            mrow.config = stamp("s_start=%g;s_end=%g", s0, s1);
            mrow.toy_fid = toy_fid(real, gen);
            mrow.class_acc = static_cast<double>(hits) / count;
            append_metrics(out, mrow);
            std::printf("s %4.2f -> %4.2f  toy distance %.5f  class acc %.3f\n", s0, s1,
                        mrow.toy_fid, mrow.class_acc);
        }
    std::printf("%zu cells -> %s\n", starts.size() * ends.size(), out.c_str());
}

void cmd_code_distance(Ctx& c) {
    const Dataset ds = load_data(c);
    const VqModel vq = load_vq(c);
    const auto ranks_ll = parse_list(
        "code_distance.ranks", c.r.get_string("code_distance.ranks", "0,1,2,4,8,16,32,64,127"));
    std::vector<int> ranks(ranks_ll.begin(), ranks_ll.end());
    const int total = vq.config().n1 * std::max(vq.config().n2, 1);
    if (!std::is_sorted(ranks.begin(), ranks.end()) || ranks.empty() || ranks.front() < 0 ||
        ranks.back() >= total)
        throw ConfigError(stamp("code_distance.ranks must be ascending within [0, %d)", total));

    const auto rows = code_distance_experiment(vq, ds.grids, ranks);
    std::string csv = "rank,mse\n";
    std::vector<double> xs, ys;
    for (const auto& r : rows) {
        csv += stamp("%d,%.17g\n", r.rank, r.mse);
        xs.push_back(r.rank);
        ys.push_back(r.mse);
    }
    const std::string out = c.path("code_distance.csv", "code_distance.csv");
    write_text(out, csv);
    std::printf("Spearman(rank, decoded MSE) = %.4f over %zu ranks -> %s\n", spearman(xs, ys),
                rows.size(), out.c_str());
}

void cmd_paradigm_ablation(Ctx& c) {
    const Dataset ds = load_data(c);
    const VqModel vq = load_vq(c);
    auto [tr, va] =
        split_tokens(tokenize_dataset(vq, ds.grids), c.r.get_double("ar.val_frac", 0.125));
    const int steps = c.r.get_int("ablation.steps", 300);
    const int d_model = c.r.get_int("ablation.d_model", 32);
    const uint64_t seed = c.r.get_u64("ablation.seed", 0);
    const std::string out = c.path("ablation.metrics", "ablation.csv");

    for (const char* name : {"hierarchical", "independent", "alternating", "grouped"}) {
        ArConfig ac = ar_config(c, vq, ds.grids.front().side, ds.n_classes);
        ac.paradigm = parse_paradigm(name);
        ac.d_model = d_model;
        ac.n_layers = 2;
        ac.n_heads = 2;
        ac.head_layers = 1;
        ac.d_s = d_model / 2;
        ac.d_d = d_model / 2;
        ac.d_compress = std::max(2, d_model / 4);
        ac.batch = 4;
        ac.seed = seed;
        ArModel model(ac);
        model.train(tr, va, steps, steps);
        const ArEval ev = model.evaluate(va);
        MetricsRow row;
        row.experiment = "paradigm-ablation";
        row.config = name;
        row.val_nll = ev.nll;
        row.sem_acc = ev.sem_acc;
        row.det_acc = or_missing(ev.det_acc);
        append_metrics(out, row);
        std::printf("%-13s  NLL %.4f  coarse acc %.3f  detail acc %.3f\n", name, ev.nll,
                    ev.sem_acc, or_missing(ev.det_acc));
    }
    std::printf("4 layouts at %d steps each -> %s\n", steps, out.c_str());
}

void cmd_selftest(Ctx& c) {
    const std::string work = c.out_dir + "/selftest";
    fs::create_directories(work);
    double subset_seconds = 0.0;
    bool all_pass = true;
    for (const int id : selftest_ids()) {
        const CriterionResult r = run_criterion(id, work);
        std::printf("%s\n", format_criterion(r).c_str());
        std::fflush(stdout);
        subset_seconds += r.seconds;
        all_pass = all_pass && r.pass;
    }
    std::printf("total %.1fs (budget 300s)\n", subset_seconds);
    if (!all_pass) throw InvariantViolation("self test failed");
    if (subset_seconds >= 300.0) throw InvariantViolation("self test exceeded its time budget");
}

void dispatch(const std::string& cmd, const ConfigMap& cfg) {
    Ctx c(cfg);
    if (cmd == "gen-data") return cmd_gen_data(c);
    if (cmd == "vq-train") return cmd_vq_train(c);
    if (cmd == "vq-eval") return cmd_vq_eval(c);
    if (cmd == "rearrange") return cmd_rearrange(c);
    if (cmd == "ar-train") return cmd_ar_train(c);
    if (cmd == "sample") return cmd_sample(c);
    if (cmd == "eval-gen") return cmd_eval_gen(c);
    if (cmd == "sweep-codebook") return cmd_sweep_codebook(c);
    if (cmd == "sweep-cfg") return cmd_sweep_cfg(c);
    if (cmd == "code-distance") return cmd_code_distance(c);
    if (cmd == "paradigm-ablation") return cmd_paradigm_ablation(c);
    if (cmd == "selftest") return cmd_selftest(c);
    throw ConfigError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-codebook quantization and hierarchical generation workbench"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> sets;
    const std::pair<const char*, const char*> commands[] = {
        {"gen-data", "generate and cache a synthetic patch-embedding dataset"},
        {"vq-train", "train the two-stage quantizer; writes checkpoint and codebooks"},
        {"vq-eval", "reconstruction MSE of a quantizer checkpoint on the dataset"},
        {"rearrange", "cluster a codebook into index blocks; writes book and permutation"},
        {"ar-train", "train the sequence model on quantized grids; writes curve and checkpoint"},
        {"sample", "generate guided samples from a checkpoint; writes a dump"},
        {"eval-gen", "toy distributional distance and class accuracy of a sample dump"},
        {"sweep-codebook", "reconstruction/generation metrics across codebook sizes"},
        {"sweep-cfg", "metrics across a (s_start, s_end) guidance grid"},
        {"code-distance", "decoded error as replacement codes grow more distant"},
        {"paradigm-ablation", "train all four token layouts at a matched budget"},
        {"selftest", "run the fast verification checks (everything but the slow trends)"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "key=value configuration file");
        sub->add_option("--set", sets, "override KEY=VALUE (repeatable)");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        ConfigMap cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        apply_sets(cfg, sets);
        check_schema(cfg);
        dispatch(app.get_subcommands().front()->get_name(), cfg);
        return 0;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const MissingArtifact& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 3;
    } catch (const InvariantViolation& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
