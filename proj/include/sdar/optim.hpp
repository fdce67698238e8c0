#pragma once

#include <cstdint>
#include <span>

#include "sdar/tape.hpp"

namespace sdar {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay and bias-corrected moments. Decay is
/// skipped for parameters flagged decay=false (biases, norm gains).
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    void step(std::span<Parameter* const> params);

    int64_t steps_taken() const { return t_; }
    void set_steps_taken(int64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    int64_t t_ = 0;
};

/// Rounds every scalar through f32. Applied to parameters and optimizer
/// moments at checkpoint boundaries so that a run that saved a checkpoint
/// and a run resumed from it continue from bit-identical state.
void round_to_f32(Matrix& m);
void round_state_to_f32(std::span<Parameter* const> params);

}  // namespace sdar
