#include "sdar/tensor_file.hpp"

#include <bit>

#include "sdar/io_util.hpp"

namespace sdar {

void save_tensors(const std::string& path, std::span<const NamedTensor> tensors) {
    auto os = open_output(path);
    write_magic(os, "SDTC");
    write_u32_le(os, 1);
    write_u32_le(os, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        write_u32_le(os, static_cast<uint32_t>(t.name.size()));
        write_bytes(os, t.name.data(), t.name.size());
        write_u32_le(os, static_cast<uint32_t>(t.value.rows));
        write_u32_le(os, static_cast<uint32_t>(t.value.cols));
    }
    for (const auto& t : tensors) write_matrix_f32(os, t.value);
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    auto is = open_input(path);
    expect_magic(is, "SDTC", "checkpoint");
    expect_version(is, 1, "checkpoint");
    const uint32_t count = read_u32_le(is, "checkpoint tensor count");
    SDAR_CHECK(count < (1u << 20), "checkpoint: implausible tensor count");
    std::vector<NamedTensor> out(count);
    for (auto& t : out) {
        const uint32_t len = read_u32_le(is, "tensor name length");
        SDAR_CHECK(len > 0 && len < 4096, "checkpoint: implausible name length");
        t.name.resize(len);
        read_bytes(is, t.name.data(), len, "tensor name");
        const uint32_t rows = read_u32_le(is, "tensor rows");
        const uint32_t cols = read_u32_le(is, "tensor cols");
        SDAR_CHECK(static_cast<uint64_t>(rows) * cols < (1u << 28),
                   "checkpoint: implausible tensor shape");
        t.value = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    }
    for (auto& t : out) read_matrix_f32(is, t.value, "tensor " + t.name);
    expect_eof(is, "checkpoint");
    return out;
}

const Matrix& find_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& t : tensors)
        if (t.name == name) return t.value;
    fail("checkpoint: missing tensor " + name);
}

bool has_tensor(const std::vector<NamedTensor>& tensors, const std::string& name) {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

void append_param_state(std::vector<NamedTensor>& out, const ParamStore& ps) {
    for (const Parameter* p : ps.all()) {
        out.push_back({p->name, p->value});
        out.push_back({p->name + ".adam_m",
                       p->m.empty() ? Matrix(p->value.rows, p->value.cols) : p->m});
        out.push_back({p->name + ".adam_v",
                       p->v.empty() ? Matrix(p->value.rows, p->value.cols) : p->v});
    }
}

void restore_param_state(ParamStore& ps, const std::vector<NamedTensor>& tensors) {
    for (Parameter* p : ps.all()) {
        const Matrix& v = find_tensor(tensors, p->name);
        SDAR_CHECK(v.same_shape(p->value), "checkpoint: shape mismatch for " + p->name);
        p->value = v;
        p->m = find_tensor(tensors, p->name + ".adam_m");
        p->v = find_tensor(tensors, p->name + ".adam_v");
        p->grad = Matrix();
    }
}

std::vector<double> encode_u64(uint64_t v) {
    std::vector<double> limbs(4);
    for (int i = 0; i < 4; ++i) limbs[i] = static_cast<double>((v >> (16 * i)) & 0xffffULL);
    return limbs;
}

uint64_t decode_u64(std::span<const double> limbs) {
    SDAR_CHECK(limbs.size() == 4, "decode_u64: expected four limbs");
    uint64_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint64_t>(limbs[i]) << (16 * i);
    return v;
}

std::vector<double> encode_f64(double v) { return encode_u64(std::bit_cast<uint64_t>(v)); }

double decode_f64(std::span<const double> limbs) {
    return std::bit_cast<double>(decode_u64(limbs));
}

}  // namespace sdar
