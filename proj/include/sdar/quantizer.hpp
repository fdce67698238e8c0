#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sdar/codebook.hpp"
#include "sdar/optim.hpp"
#include "sdar/tape.hpp"

namespace sdar {

/// One quantized patch: coarse index into the semantic codebook plus a
/// refinement index into the detail codebook.
struct DualCode {
    uint16_t semantic = 0;
    uint16_t detail = 0;
    bool operator==(const DualCode&) const = default;
};

struct SemanticQuant {
    int index = 0;
    std::vector<double> residual;  // e - c_s[index]
};

struct DualQuant {
    DualCode code;
    std::vector<double> reconstruction;  // c_s + c_d
};

/// Nearest semantic code and the residual it leaves behind.
SemanticQuant quantize_semantic(const Codebook& semantic, std::span<const double> e);

/// Two-step residual quantization; the reconstruction satisfies
/// ||e - (c_s + c_d)|| == ||residual - c_d|| <= ||residual - c_d[j]|| for all j.
DualQuant quantize_dual(const Codebook& semantic, const Codebook& detail,
                        std::span<const double> e);

std::vector<double> dequantize(const Codebook& semantic, const Codebook& detail, DualCode c);

struct VqConfig {
    int n1 = 16;    // semantic codebook size
    int n2 = 64;    // detail codebook size; 0 = single-codebook baseline
    int dim = 8;    // code and patch dimension
    double beta = 0.25;        // encoder-side commitment weight
    double lambda_rec = 1.0;   // reconstruction weight
    double lr = 1e-2;
    int batch = 64;            // patches per update
    bool learn_maps = true;    // learn linear encoder/decoder; identity otherwise
    int dead_code_steps = 1000;  // reseed a detail code unused this many joint updates
    uint64_t seed = 0;

    void validate() const;
};

enum class VqUpdateKind : uint8_t { joint = 0, semantic_only = 1 };

/// Update interleave for the refinement stage: two joint updates followed by
/// one semantic-only update, repeating.
struct StageSchedule {
    std::vector<VqUpdateKind> log;

    static VqUpdateKind kind_for_step(int64_t step) {
        return step % 3 == 2 ? VqUpdateKind::semantic_only : VqUpdateKind::joint;
    }
    int joint_count() const;
    int semantic_count() const;
};

struct VqTrainLog {
    std::vector<double> losses;
};

/// Dual-codebook vector quantizer with a linear encoder/decoder pair.
///
/// Training runs in two stages. Stage one fits encoder, decoder and the
/// semantic codebook with a stop-gradient commitment loss plus a squared
/// reconstruction loss routed through a straight-through estimator; the
/// detail codebook is untouched. Stage two seeds the detail codebook from
/// stage-one residuals, then interleaves joint updates of everything with
/// semantic-only updates at a fixed 2:1 ratio.
class VqModel {
public:
    explicit VqModel(const VqConfig& cfg);

    const VqConfig& config() const { return cfg_; }
    bool single_codebook() const { return cfg_.n2 == 0; }
    bool stage1_done() const { return stage1_steps_ > 0; }
    int64_t stage1_steps() const { return stage1_steps_; }
    int64_t stage2_steps() const { return stage2_steps_; }
    const StageSchedule& schedule() const { return schedule_; }

    const Matrix& semantic_codes() const { return semantic_->value; }
    const Matrix& detail_codes() const;
    Codebook semantic_book() const { return Codebook(semantic_->value); }
    Codebook detail_book() const;

    std::vector<double> encode(std::span<const double> x) const;
    std::vector<double> decode(std::span<const double> e) const;

    SemanticQuant quantize_semantic(std::span<const double> e) const;
    DualQuant quantize_dual(std::span<const double> e) const;
    std::vector<double> dequantize(DualCode c) const;

    /// decode(c_s) for single stage models, decode(c_s + c_d) for dual.
    std::vector<double> reconstruct(std::span<const double> x) const;

    /// Mean squared error per element between patches and reconstructions.
    double recon_mse(const Matrix& patches) const;

    void train_stage1(const Matrix& patches, int steps, VqTrainLog* log = nullptr);
    void train_stage2(const Matrix& patches, int steps, VqTrainLog* log = nullptr);

    /// Constant copies of the two stop-gradient operands (encoder output and
    /// gathered codes) captured at the current parameters. Substituting them
    /// for the stop-gradient nodes leaves both the loss value and the
    /// analytic gradient identical, but makes the loss an ordinary function
    /// of the parameters, so central finite differences become a valid probe
    /// of the backward pass.
    struct StopValues {
        Matrix e;  // encoder outputs
        Matrix q;  // gathered (combined) codes
    };
    StopValues capture_stage1_stops(const Matrix& batch, const std::vector<int>& sem_idx) const;
    StopValues capture_stage2_stops(const Matrix& batch, const std::vector<int>& sem_idx,
                                    const std::vector<int>& det_idx) const;

    // Differentiable loss builders over a fixed batch and fixed assignments;
    // the training steps quantize first and then build. Pass captured stop
    // values to freeze the stop-gradient operands for finite-difference
    // verification; training passes none.
    Var build_stage1_loss(Tape& t, const Matrix& batch, const std::vector<int>& sem_idx,
                          const StopValues* freeze = nullptr) const;
    Var build_stage2_loss(Tape& t, const Matrix& batch, const std::vector<int>& sem_idx,
                          const std::vector<int>& det_idx,
                          const StopValues* freeze = nullptr) const;

    /// Rounds live training state through f32 and writes the checkpoint, so
    /// continuing in-process and reloading the file are bit-identical.
    void save(const std::string& path);
    static VqModel load(const std::string& path);

    ParamStore& params() { return store_; }
    Parameter& encoder_param() { return *encoder_; }
    Parameter& decoder_param() { return *decoder_; }
    Parameter& semantic_param() { return *semantic_; }
    Parameter& detail_param();

private:
    void joint_update(const Matrix& patches, int64_t step_index, VqTrainLog* log);
    void semantic_update(const Matrix& patches, int64_t step_index, VqTrainLog* log);
    Matrix sample_batch(const Matrix& patches, Rng& rng) const;

    VqConfig cfg_;
    ParamStore store_;
    Parameter* encoder_ = nullptr;  // null when learn_maps is off
    Parameter* decoder_ = nullptr;
    Parameter* semantic_ = nullptr;
    Parameter* detail_ = nullptr;   // null for single-codebook models
    std::unique_ptr<AdamW> opt_;
    std::vector<int> detail_unused_;  // consecutive joint updates without use
    int64_t stage1_steps_ = 0;
    int64_t stage2_steps_ = 0;
    StageSchedule schedule_;
};

}  // namespace sdar
