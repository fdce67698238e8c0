#include "sdar/optim.hpp"

#include <cmath>

namespace sdar {

void AdamW::step(std::span<Parameter* const> params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
        if (p->grad.empty()) continue;
        if (p->m.empty()) p->m = Matrix(p->value.rows, p->value.cols);
        if (p->v.empty()) p->v = Matrix(p->value.rows, p->value.cols);
        const double wd = p->decay ? cfg_.weight_decay : 0.0;
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double g = p->grad.data[i];
            p->m.data[i] = cfg_.beta1 * p->m.data[i] + (1.0 - cfg_.beta1) * g;
            p->v.data[i] = cfg_.beta2 * p->v.data[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = p->m.data[i] / bc1;
            const double vhat = p->v.data[i] / bc2;
            p->value.data[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p->value.data[i]);
        }
    }
}

void round_to_f32(Matrix& m) {
    for (double& v : m.data) v = static_cast<double>(static_cast<float>(v));
}

void round_state_to_f32(std::span<Parameter* const> params) {
    for (Parameter* p : params) {
        round_to_f32(p->value);
        if (!p->m.empty()) round_to_f32(p->m);
        if (!p->v.empty()) round_to_f32(p->v);
    }
}

}  // namespace sdar
