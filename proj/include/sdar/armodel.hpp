#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdar/optim.hpp"
#include "sdar/quantizer.hpp"
#include "sdar/sequence.hpp"
#include "sdar/tape.hpp"

namespace sdar {

/// Token layout fed to the backbone. The fused layouts merge each
/// (semantic, detail) pair into one sequence position; the other two spell
/// the pair out as separate positions and predict straight from the
/// backbone, without the local-context head.
enum class Paradigm : uint8_t {
    fused_hierarchical = 0,  // one position per patch, detail conditioned on semantic
    fused_independent = 1,   // one position per patch, both stages from the same state
    alternating = 2,         // s0 d0 s1 d1 ...
    grouped_sequential = 3,  // s0..s_{m-1} then d0..d_{m-1}
};

struct ArConfig {
    int n1 = 16;        // semantic vocabulary
    int n2 = 64;        // detail vocabulary; 0 = single-codebook path
    int n_classes = 8;  // condition vocabulary; index n_classes = unconditional
    int side = 8;       // token grid side, m = side^2 patches
    int l_c = 1;        // condition prefix length

    int d_model = 96;
    int n_layers = 3;
    int n_heads = 4;
    int head_layers = 2;  // depth of the local prediction head
    int d_s = 48;         // semantic embedding width
    int d_d = 48;         // detail embedding width
    int d_compress = 24;  // per-slot width after local-context compression
    int k = 3;            // local window side, k^2 - 1 context slots

    double lambda_s = 2.0;    // semantic stage weight in the training loss
    double lambda_cce = 0.0;  // cluster-level loss weight (single-codebook only)
    int n_clusters = 0;       // cluster count for the cluster-level loss

    Paradigm paradigm = Paradigm::fused_hierarchical;
    double class_dropout = 0.1;  // chance a label trains as unconditional
    AdamWConfig opt;
    int batch = 8;
    uint64_t seed = 0;

    int tokens() const { return side * side; }
    int slots() const { return k * k - 1; }
    /// Backbone rows per sample: condition prefix plus every input token.
    int seq_len() const;
    bool fused() const {
        return paradigm == Paradigm::fused_hierarchical ||
               paradigm == Paradigm::fused_independent;
    }
    void validate() const;
};

/// Fixed slot layout of the causal k x k neighbourhood around `center`:
/// one entry per non-center offset in raster order, holding the grid index
/// of the neighbour when it precedes `center`, -1 when it is off-grid or
/// not yet generated. The non-negative entries equal
/// raster_window(center, side, k).members in order.
std::vector<int> window_slots(int center, int side, int k);

/// Fixed 2D sinusoidal position table for a side x side raster grid, one
/// row per grid cell. Rows encode the cell's row index in the first half
/// of the channels and its column index in the second half.
Matrix grid_position_encoding(int side, int d_model);

/// One teacher-forced forward pass. Logit row s*m + p scores token p of
/// batch item s; det_logits is empty on the single-codebook path.
struct ArForward {
    Var sem_logits;
    Var det_logits;
    Var loss;  // training objective, mean per token
    Var nll;   // unweighted stage NLL sum, mean per token
    std::vector<int> sem_targets;
    std::vector<int> det_targets;
};

struct ArTrainPoint {
    int64_t step = 0;
    double train_loss = 0.0;
    double val_nll = std::numeric_limits<double>::quiet_NaN();
    double sem_acc = std::numeric_limits<double>::quiet_NaN();
    double det_acc = std::numeric_limits<double>::quiet_NaN();
};

struct ArTrainLog {
    std::vector<ArTrainPoint> points;
};

struct ArEval {
    double nll = 0.0;
    double sem_acc = 0.0;
    double det_acc = std::numeric_limits<double>::quiet_NaN();
};

/// Class-conditional autoregressive model over dual-code token grids.
///
/// A causal pre-norm transformer reads a condition prefix followed by the
/// patch tokens in raster order. In the fused layouts each patch enters as
/// one position: the semantic and detail embeddings are concatenated and
/// pushed through a two-layer MLP. Prediction runs through a small head
/// per position: the causal neighbourhood's hidden states are compressed
/// and fused into a context vector, a mini-transformer attends over
/// [context, state] and the semantic logits read its output; the chosen
/// semantic code's embedding then joins as a third head token and the
/// detail logits read the extended output, which makes the detail
/// distribution a function of the semantic choice. The per-token loss is
/// lambda_s * nll_semantic + nll_detail; the stage weight applies
/// identically across paradigms so ablation gaps come from structure, not
/// loss scale. The single-codebook path predicts one vocabulary and can
/// add a cluster-level term on top of the token cross-entropy.
class ArModel {
public:
    explicit ArModel(const ArConfig& cfg);

    const ArConfig& config() const { return cfg_; }
    int64_t steps_taken() const { return train_steps_; }
    size_t param_scalars() const { return params_.count_scalars(); }
    std::span<Parameter* const> params() const { return params_.all(); }
    Parameter* param(const std::string& name) { return params_.find(name); }

    /// Teacher-forced graph over a batch of grids. labels[i] in
    /// [0, n_classes] with n_classes meaning unconditional; when
    /// `attn` is non-null one record per backbone layer is captured.
    ArForward build_forward(Tape& t, std::span<const TokenGrid> grids,
                            std::span<const int> labels,
                            std::vector<AttentionRecord>* attn = nullptr);

    void train(std::span<const TokenGrid> train_set, std::span<const TokenGrid> val_set,
               int steps, int eval_every, ArTrainLog* log = nullptr);

    /// Teacher-forced metrics under the true class labels.
    ArEval evaluate(std::span<const TokenGrid> grids);

    /// Backbone input row for one token pair (before the position term):
    /// the concatenated code embeddings pushed through the fusion MLP.
    std::vector<double> fuse_embedding(DualCode code) const;

    /// Local-context vector from exactly k^2-1 slot states in window
    /// order; an empty slot reads the learned pad row. Slot order is
    /// positional, so permuting distinct members changes the result.
    std::vector<double> compress_context(std::span<const std::vector<double>> slots) const;

    void save(const std::string& path);
    static ArModel load(const std::string& path);

private:
    friend class ArInference;

    Var pv(Tape& t, const std::string& name);
    const Matrix& weight(const std::string& name) const;
    Var transformer_stack(Tape& t, Var x, int group_len, const std::string& prefix,
                          int layers, std::vector<AttentionRecord>* attn);
    ArForward forward_fused(Tape& t, std::span<const TokenGrid> grids,
                            std::span<const int> labels,
                            std::vector<AttentionRecord>* attn);
    ArForward forward_split(Tape& t, std::span<const TokenGrid> grids,
                            std::span<const int> labels,
                            std::vector<AttentionRecord>* attn);
    ArForward finish_losses(Tape& t, ArForward fwd);

    ArConfig cfg_;
    ParamStore params_;
    std::unique_ptr<AdamW> opt_;
    Matrix grid_pos_;  // precomputed grid_position_encoding(side, d_model)
    int64_t train_steps_ = 0;
};

/// Mass each backbone layer/head puts on the condition prefix, taken from
/// the attention row of the most recently fed position.
struct PrefixAttention {
    Matrix mass;  // [n_layers, n_heads]

    double mean_final_layer() const;
};

/// Incremental decoder over one sequence: feeds positions one at a time
/// against cached keys/values and reproduces the teacher-forced
/// activations of the fused layouts exactly (same formulas, same
/// causal sets). Pure reader of the model; safe to run several instances
/// against one checkpoint.
class ArInference {
public:
    /// label == n_classes runs the unconditional branch.
    ArInference(const ArModel& model, int label);

    /// Grid index of the next token to predict.
    int position() const { return fed_ - model_->cfg_.l_c; }
    bool done() const { return position() >= model_->cfg_.tokens(); }

    /// Semantic-stage logits for the current position, length n1.
    std::vector<double> semantic_logits();
    /// Detail-stage logits given the chosen semantic code, length n2. The
    /// fused_independent layout ignores `k` by construction.
    std::vector<double> detail_logits(int k);
    /// Appends the chosen token and advances to the next position.
    void advance(DualCode code);

    const PrefixAttention& prefix_attention() const { return attn_; }

private:
    void feed_row(std::vector<double> x);
    std::vector<double> context_vector(int p) const;
    std::vector<double> run_head(const std::vector<double>& ctx,
                                 const std::vector<double>& query,
                                 const std::vector<double>* inject) const;

    const ArModel* model_;
    std::vector<Matrix> kcache_;  // per layer, seq_len x d_model
    std::vector<Matrix> vcache_;
    Matrix outputs_;  // final-normed backbone outputs, seq_len x d_model
    PrefixAttention attn_;
    int fed_ = 0;
};

}  // namespace sdar
