#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdar/matrix.hpp"
#include "sdar/tape.hpp"

namespace sdar {

struct NamedTensor {
    std::string name;
    Matrix value;
};

// Checkpoint container: magic "SDTC", u32 version = 1, u32 tensor count,
// then a manifest of (u32 name length, name bytes, u32 rows, u32 cols) in a
// fixed order, then the f32 little-endian payloads in the same order.
void save_tensors(const std::string& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

const Matrix& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);
bool has_tensor(const std::vector<NamedTensor>& tensors, const std::string& name);

/// Parameters plus AdamW moments, in ParamStore creation order. Moments are
/// always present (zeros before the first optimizer step) so the manifest
/// order is fixed for a given architecture.
void append_param_state(std::vector<NamedTensor>& out, const ParamStore& ps);
void restore_param_state(ParamStore& ps, const std::vector<NamedTensor>& tensors);

/// u64 values ride in checkpoints as four 16-bit limbs, each exact in f32.
std::vector<double> encode_u64(uint64_t v);
uint64_t decode_u64(std::span<const double> limbs);

// Doubles ride through the same limb encoding via their bit pattern, so
// hyperparameters survive a save/load cycle without the f32 rounding that
// the tensor payloads apply.
std::vector<double> encode_f64(double v);
double decode_f64(std::span<const double> limbs);

}  // namespace sdar
