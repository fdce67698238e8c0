#include "sdar/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "sdar/io_util.hpp"
#include "sdar/matrix.hpp"

namespace sdar {

namespace {
constexpr uint64_t kGenStream = 0xB1;
constexpr uint64_t kSampleStream = 0xB2;
}  // namespace

void GuidanceSchedule::validate() const {
    SDAR_CHECK(total_tokens >= 1, "guidance schedule needs at least one token");
    SDAR_CHECK(std::isfinite(s_start) && std::isfinite(s_end), "guidance scales must be finite");
    SDAR_CHECK(s_start >= 0.0 && s_end >= 0.0, "guidance scales must be nonnegative");
}

void SamplerConfig::validate() const {
    SDAR_CHECK(std::isfinite(temperature) && temperature > 0.0, "temperature must be positive");
    SDAR_CHECK(top_k >= 0, "top_k must be nonnegative (0 disables it)");
    SDAR_CHECK(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    SDAR_CHECK(alpha_floor >= 0.0 && alpha_floor <= 1.0, "alpha_floor must lie in [0, 1]");
    schedule.validate();
}

std::vector<double> cfg_blend(std::span<const double> uncond, std::span<const double> cond,
                              double s) {
    SDAR_CHECK(uncond.size() == cond.size(), "cfg_blend: length mismatch");
    SDAR_CHECK(std::isfinite(s), "cfg_blend: scale must be finite");
    std::vector<double> out(uncond.size());
    // Endpoint scales reproduce the inputs bitwise instead of via arithmetic.
    if (s == 0.0) {
        std::copy(uncond.begin(), uncond.end(), out.begin());
    } else if (s == 1.0) {
        std::copy(cond.begin(), cond.end(), out.begin());
    } else {
        for (size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
    }
    return out;
}

double progressive_scale(const GuidanceSchedule& sch, int i) {
    sch.validate();
    SDAR_CHECK(i >= 0 && i <= sch.total_tokens, "progressive_scale: position out of range");
    if (i == 0) return sch.s_start;
    if (i == sch.total_tokens) return sch.s_end;
    return sch.s_start +
           (sch.s_end - sch.s_start) * (static_cast<double>(i) / sch.total_tokens);
}

PrefixAttention prefix_mass_from_records(const std::vector<AttentionRecord>& records,
                                         int group, int row, int l_c) {
    SDAR_CHECK(!records.empty(), "prefix_mass_from_records: no attention records");
    PrefixAttention out;
    out.mass = Matrix(static_cast<int>(records.size()), records.front().heads);
    for (size_t l = 0; l < records.size(); ++l) {
        const AttentionRecord& rec = records[l];
        SDAR_CHECK(rec.heads == records.front().heads,
                   "prefix_mass_from_records: inconsistent head counts");
        SDAR_CHECK(group >= 0 && group < rec.groups, "prefix_mass_from_records: bad group");
        SDAR_CHECK(row >= 0 && row < rec.group_len, "prefix_mass_from_records: bad row");
        SDAR_CHECK(l_c >= 0 && l_c <= rec.group_len,
                   "prefix_mass_from_records: bad prefix length");
        for (int h = 0; h < rec.heads; ++h) {
            const Matrix& probs = rec.at(group, h);
            double mass = 0.0;
            for (int j = 0; j < l_c; ++j) mass += probs.at(row, j);
            out.mass.at(static_cast<int>(l), h) = mass;
        }
    }
    return out;
}

double aggregate_attention(const PrefixAttention& attn, AttentionReduce reduce) {
    SDAR_CHECK(attn.mass.rows > 0 && attn.mass.cols > 0,
               "aggregate_attention: no attention mass recorded");
    const Matrix& m = attn.mass;
    switch (reduce) {
    case AttentionReduce::final_mean: {
        double sum = 0.0;
        for (double v : m.row(m.rows - 1)) sum += v;
        return sum / m.cols;
    }
    case AttentionReduce::final_max: {
        double best = m.at(m.rows - 1, 0);
        for (double v : m.row(m.rows - 1)) best = std::max(best, v);
        return best;
    }
    case AttentionReduce::all_mean: {
        double sum = 0.0;
        for (double v : m.data) sum += v;
        return sum / static_cast<double>(m.data.size());
    }
    }
    SDAR_CHECK(false, "aggregate_attention: unknown reduction");
    return 0.0;
}

double pag_scale(const GuidanceSchedule& sch, int i, double alpha, double alpha_mean,
                 double alpha_floor) {
    SDAR_CHECK(alpha >= 0.0 && alpha <= 1.0, "pag_scale: relevance must lie in [0, 1]");
    SDAR_CHECK(alpha_mean >= 0.0, "pag_scale: prefix mean must be nonnegative");
    SDAR_CHECK(alpha_floor >= 0.0 && alpha_floor <= 1.0, "pag_scale: floor must lie in [0, 1]");
    const double base = progressive_scale(sch, i);
    // A zero prefix mean carries no relative information; fall back to the ramp.
    const double ratio = alpha_mean <= 0.0 ? 1.0 : std::min(1.0, alpha / alpha_mean);
    return base * (alpha_floor + (1.0 - alpha_floor) * ratio);
}

std::vector<double> filter_logits(std::span<const double> logits, double temperature,
                                  int top_k, double top_p) {
    SDAR_CHECK(!logits.empty(), "filter_logits: empty logits");
    SDAR_CHECK(std::isfinite(temperature) && temperature > 0.0,
               "filter_logits: temperature must be positive");
    SDAR_CHECK(top_k >= 0, "filter_logits: top_k must be nonnegative");
    SDAR_CHECK(top_p > 0.0 && top_p <= 1.0, "filter_logits: top_p must lie in (0, 1]");
    const int n = static_cast<int>(logits.size());
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& v : scaled) v /= temperature;
    const std::vector<double> probs = softmax(scaled);

    // Descending probability, ties broken by index; stable_sort keeps the
    // tie order deterministic.
    std::vector<int> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[a] > probs[b]; });

    const int limit = top_k > 0 ? std::min(top_k, n) : n;
    std::vector<double> kept(logits.size(), 0.0);
    double cum = 0.0;
    double total = 0.0;
    // The first iteration always runs, so the argmax token always survives.
    for (int r = 0; r < limit; ++r) {
        const int idx = order[r];
        kept[idx] = probs[idx];
        total += probs[idx];
        cum += probs[idx];
        if (cum >= top_p) break;
    }
    SDAR_CHECK(total > 0.0, "filter_logits: degenerate distribution");
    for (double& v : kept) v /= total;
    return kept;
}

int sample_index(std::span<const double> probs, Rng& rng) {
    SDAR_CHECK(!probs.empty(), "sample_index: empty distribution");
    const double u = rng.uniform();
    double cum = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
        SDAR_CHECK(probs[i] >= 0.0, "sample_index: negative probability");
        cum += probs[i];
        if (u < cum) return static_cast<int>(i);
    }
    // Roundoff can leave the total a hair below 1; take the last live entry.
    for (int i = static_cast<int>(probs.size()) - 1; i >= 0; --i)
        if (probs[i] > 0.0) return i;
    SDAR_CHECK(false, "sample_index: all-zero distribution");
    return -1;
}

TokenGrid generate(const ArModel& model, int label, const SamplerConfig& cfg, GenTrace* trace) {
    cfg.validate();
    const ArConfig& mc = model.config();
    SDAR_CHECK(label >= 0 && label < mc.n_classes, "generate: class label out of range");
    const int m = mc.tokens();
    const bool dual = mc.n2 > 0;

    // The ramp always spans this grid's raster; the schedule's own
    // total_tokens only matters for direct progressive_scale calls.
    GuidanceSchedule ramp = cfg.schedule;
    ramp.total_tokens = m;

    Rng rng(derive_seed(cfg.seed, kGenStream));
    ArInference cond(model, label);
    ArInference uncond(model, mc.n_classes);

    TokenGrid grid;
    grid.side = mc.side;
    grid.label = label;
    grid.codes.reserve(m);
    if (trace) *trace = GenTrace{};

    double alpha_sum = 0.0;
    for (int p = 0; p < m; ++p) {
        double alpha = 1.0;
        double scale = progressive_scale(ramp, p);
        if (cfg.attention_guided) {
            // Relevance of the row the current prediction reads, taken from
            // the conditional branch; the running mean includes it so a
            // constant-relevance sample stays on the plain ramp.
            alpha = aggregate_attention(cond.prefix_attention(), cfg.reduce);
            alpha_sum += alpha;
            if (cfg.raw_alpha) {
                scale *= alpha;
            } else {
                scale = pag_scale(ramp, p, alpha, alpha_sum / (p + 1), cfg.alpha_floor);
            }
        }

        std::vector<double> sem = cfg_blend(uncond.semantic_logits(), cond.semantic_logits(),
                                            scale);
        const std::vector<double> sem_probs =
            filter_logits(sem, cfg.temperature, cfg.top_k, cfg.top_p);
        DualCode code;
        code.semantic = static_cast<uint16_t>(sample_index(sem_probs, rng));

        std::vector<double> det;
        if (dual) {
            det = cfg_blend(uncond.detail_logits(code.semantic),
                            cond.detail_logits(code.semantic), scale);
            const std::vector<double> det_probs =
                filter_logits(det, cfg.temperature, cfg.top_k, cfg.top_p);
            code.detail = static_cast<uint16_t>(sample_index(det_probs, rng));
        }

        if (trace) {
            trace->alphas.push_back(alpha);
            trace->scales.push_back(scale);
            trace->sem_logits.push_back(std::move(sem));
            if (dual) trace->det_logits.push_back(std::move(det));
        }

        // Both branches consume the same sampled token.
        cond.advance(code);
        uncond.advance(code);
        grid.codes.push_back(code);
    }
    return grid;
}

std::vector<TokenGrid> generate_many(const ArModel& model, std::span<const int> labels,
                                     const SamplerConfig& cfg) {
    cfg.validate();
    std::vector<TokenGrid> out;
    out.reserve(labels.size());
    for (size_t s = 0; s < labels.size(); ++s) {
        SamplerConfig per = cfg;
        per.seed = derive_seed(cfg.seed, kSampleStream, s);
        out.push_back(generate(model, labels[s], per));
    }
    return out;
}

Matrix decode_grid(const VqModel& vq, const TokenGrid& grid) {
    SDAR_CHECK(grid.side >= 1, "decode_grid: empty grid");
    const int m = grid.side * grid.side;
    SDAR_CHECK(static_cast<int>(grid.codes.size()) == m, "decode_grid: token count mismatch");
    Matrix out;
    for (int i = 0; i < m; ++i) {
        const std::vector<double> x = vq.decode(vq.dequantize(grid.codes[i]));
        if (i == 0) out = Matrix(m, static_cast<int>(x.size()));
        std::copy(x.begin(), x.end(), out.row(i).begin());
    }
    return out;
}

void SampleDump::validate() const {
    SDAR_CHECK(side >= 1, "sample dump: grid side must be positive");
    SDAR_CHECK(dim >= 0, "sample dump: embedding width must be nonnegative");
    const size_t m = static_cast<size_t>(side) * side;
    if (dim > 0) {
        SDAR_CHECK(embeddings.size() == grids.size(), "sample dump: one embedding per grid");
    } else {
        SDAR_CHECK(embeddings.empty(), "sample dump: width 0 forbids embeddings");
    }
    for (const TokenGrid& g : grids) {
        SDAR_CHECK(g.side == side, "sample dump: mixed grid sides");
        SDAR_CHECK(g.codes.size() == m, "sample dump: token count mismatch");
        SDAR_CHECK(g.label >= 0 && g.label <= 0xFFFF, "sample dump: label does not fit u16");
    }
    for (const Matrix& e : embeddings)
        SDAR_CHECK(e.rows == static_cast<int>(m) && e.cols == dim,
                   "sample dump: embedding shape mismatch");
}

void save_samples(const std::string& path, const SampleDump& dump) {
    dump.validate();
    std::ofstream os = open_output(path);
    write_magic(os, "SDSM");
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(dump.grids.size()));
    write_u32_le(os, static_cast<uint32_t>(dump.side));
    write_u32_le(os, static_cast<uint32_t>(dump.dim));
    for (size_t s = 0; s < dump.grids.size(); ++s) {
        const TokenGrid& g = dump.grids[s];
        write_u16_le(os, static_cast<uint16_t>(g.label));
        for (const DualCode& c : g.codes) {
            write_u16_le(os, c.semantic);
            write_u16_le(os, c.detail);
        }
        if (dump.dim > 0) write_matrix_f32(os, dump.embeddings[s]);
    }
    SDAR_CHECK(os.good(), "sample dump: failed writing " + path);
}

SampleDump load_samples(const std::string& path) {
    std::ifstream is = open_input(path);
    expect_magic(is, "SDSM", "sample dump");
    expect_version(is, 1, "sample dump");
    const uint32_t count = read_u32_le(is, "sample count");
    SampleDump dump;
    dump.side = static_cast<int>(read_u32_le(is, "grid side"));
    dump.dim = static_cast<int>(read_u32_le(is, "embedding width"));
    SDAR_CHECK(dump.side >= 1 && dump.side <= 4096, "sample dump: implausible grid side");
    SDAR_CHECK(dump.dim >= 0 && dump.dim <= (1 << 20), "sample dump: implausible width");
    const int m = dump.side * dump.side;
    dump.grids.reserve(count);
    if (dump.dim > 0) dump.embeddings.reserve(count);
    for (uint32_t s = 0; s < count; ++s) {
        TokenGrid g;
        g.side = dump.side;
        g.label = read_u16_le(is, "class label");
        g.codes.resize(m);
        for (DualCode& c : g.codes) {
            c.semantic = read_u16_le(is, "semantic code");
            c.detail = read_u16_le(is, "detail code");
        }
        dump.grids.push_back(std::move(g));
        if (dump.dim > 0) {
            Matrix e(m, dump.dim);
            read_matrix_f32(is, e, "decoded embeddings");
            dump.embeddings.push_back(std::move(e));
        }
    }
    expect_eof(is, "sample dump");
    dump.validate();
    return dump;
}

}  // namespace sdar
