#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdar/armodel.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/rng.hpp"
#include "sdar/sequence.hpp"

namespace sdar {

/// Linear guidance-scale ramp across one sample's token positions.
struct GuidanceSchedule {
    double s_start = 1.75;
    double s_end = 3.0;
    int total_tokens = 1;  // position index runs over [0, total_tokens]

    void validate() const;
};

/// Reduction turning per-layer/head condition-attention mass into one
/// relevance score.
enum class AttentionReduce : uint8_t {
    final_mean = 0,  // mean over heads of the last backbone layer
    final_max = 1,   // strongest head of the last layer
    all_mean = 2,    // mean over every layer and head
};

struct SamplerConfig {
    double temperature = 1.0;
    int top_k = 0;  // 0 disables
    double top_p = 1.0;
    GuidanceSchedule schedule;
    bool attention_guided = false;
    /// Multiply by the raw relevance score instead of the prefix-normalized
    /// form; kept for fidelity tests of the unnormalized rule.
    bool raw_alpha = false;
    double alpha_floor = 0.5;
    AttentionReduce reduce = AttentionReduce::final_mean;
    uint64_t seed = 0;

    void validate() const;
};

/// uncond + s * (cond - uncond), elementwise; the s = 0 and s = 1
/// endpoints return the inputs exactly.
std::vector<double> cfg_blend(std::span<const double> uncond, std::span<const double> cond,
                              double s);

/// Scale at position i of the ramp; endpoints are exact.
double progressive_scale(const GuidanceSchedule& sch, int i);

/// Condition-prefix attention mass of one query row, per layer and head,
/// recomputed from captured attention maps.
PrefixAttention prefix_mass_from_records(const std::vector<AttentionRecord>& records,
                                         int group, int row, int l_c);

/// Single relevance score in [0, 1] from per-layer/head prefix mass.
double aggregate_attention(const PrefixAttention& attn, AttentionReduce reduce);

/// Attention-modulated scale
///   s'_i * (floor + (1 - floor) * min(1, alpha / alpha_mean)).
/// Normalizing by the running prefix mean keeps the average scale on the
/// ramp while preserving relative spatial modulation; the floor bounds how
/// far a low-relevance position can fall, and the cap keeps s_i <= s'_i.
/// A floor of 1 reduces to the plain ramp.
double pag_scale(const GuidanceSchedule& sch, int i, double alpha, double alpha_mean,
                 double alpha_floor);

/// Temperature softmax, then top-k truncation, then nucleus truncation
/// (smallest descending-probability prefix reaching top_p), renormalized.
/// The argmax token always survives.
std::vector<double> filter_logits(std::span<const double> logits, double temperature,
                                  int top_k, double top_p);

/// Inverse-CDF draw from a probability vector.
int sample_index(std::span<const double> probs, Rng& rng);

/// Per-position record of one generation pass.
struct GenTrace {
    std::vector<double> alphas;
    std::vector<double> scales;
    std::vector<std::vector<double>> sem_logits;  // blended, pre-filter
    std::vector<std::vector<double>> det_logits;  // empty on single-codebook models
};

/// Raster-order generation with conditional and unconditional branches:
/// at each position the semantic logits of both branches are blended with
/// the position's guidance scale and sampled, the chosen code conditions
/// the detail stage (blended with the same scale), and both branches
/// consume the sampled pair. Deterministic per (model, label, config).
TokenGrid generate(const ArModel& model, int label, const SamplerConfig& cfg,
                   GenTrace* trace = nullptr);

/// Independent samples with per-sample derived seeds; the result does not
/// depend on evaluation order.
std::vector<TokenGrid> generate_many(const ArModel& model, std::span<const int> labels,
                                     const SamplerConfig& cfg);

/// Patch embeddings for a token grid, one decoded row per raster cell.
Matrix decode_grid(const VqModel& vq, const TokenGrid& grid);

/// On-disk sample bundle: token grids plus, optionally, their decoded
/// patch embeddings.
struct SampleDump {
    int side = 0;
    int dim = 0;  // 0 = token grids only
    std::vector<TokenGrid> grids;
    std::vector<Matrix> embeddings;  // side^2 x dim each when dim > 0

    void validate() const;
};

// Dump format: magic "SDSM", u32 version = 1, u32 count, u32 side, u32 dim,
// then per sample a u16 class label, side^2 (u16, u16) code pairs, and,
// when dim > 0, side^2 * dim f32 embedding values.
void save_samples(const std::string& path, const SampleDump& dump);
SampleDump load_samples(const std::string& path);

}  // namespace sdar
