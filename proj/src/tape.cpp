#include "sdar/tape.hpp"

#include <algorithm>
#include <cmath>

namespace sdar {

namespace {
constexpr double kRmsEps = 1e-6;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void accumulate(Matrix& dst, const Matrix& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}
}  // namespace

Parameter& ParamStore::create(const std::string& name, Matrix init, bool decay) {
    SDAR_CHECK(find(name) == nullptr, "duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(init);
    p->decay = decay;
    order_.push_back(p.get());
    items_.push_back(std::move(p));
    return *order_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto* p : order_)
        if (p->name == name) return p;
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto* p : order_)
        if (p->name == name) return p;
    return nullptr;
}

void ParamStore::zero_grads() {
    for (auto* p : order_) p->grad = Matrix();
}

size_t ParamStore::count_scalars() const {
    size_t n = 0;
    for (auto* p : order_) n += p->value.size();
    return n;
}

Var Tape::push(Matrix value) {
    entries_.push_back(Entry{std::move(value), Matrix(), nullptr, nullptr});
    return Var{static_cast<int>(entries_.size()) - 1};
}

Matrix& Tape::grad_of(int id) {
    Entry& e = entries_[id];
    if (e.grad.empty()) e.grad = Matrix(e.value.rows, e.value.cols);
    return e.grad;
}

Var Tape::leaf(Matrix value) { return push(std::move(value)); }

Var Tape::param(Parameter& p) {
    Var v = push(p.value);
    entries_[v.id].source = &p;
    return v;
}

Var Tape::add(Var a, Var b) {
    SDAR_CHECK(val_of(a.id).same_shape(val_of(b.id)), "add: shape mismatch");
    Matrix out = val_of(a.id);
    accumulate(out, val_of(b.id));
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b] {
        const Matrix& g = entries_[o.id].grad;
        accumulate(grad_of(a.id), g);
        accumulate(grad_of(b.id), g);
    };
    return o;
}

Var Tape::sub(Var a, Var b) {
    SDAR_CHECK(val_of(a.id).same_shape(val_of(b.id)), "sub: shape mismatch");
    Matrix out = val_of(a.id);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] -= val_of(b.id).data[i];
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b] {
        const Matrix& g = entries_[o.id].grad;
        accumulate(grad_of(a.id), g);
        Matrix& gb = grad_of(b.id);
        for (size_t i = 0; i < gb.size(); ++i) gb.data[i] -= g.data[i];
    };
    return o;
}

Var Tape::mul(Var a, Var b) {
    SDAR_CHECK(val_of(a.id).same_shape(val_of(b.id)), "mul: shape mismatch");
    Matrix out = val_of(a.id);
    for (size_t i = 0; i < out.size(); ++i) out.data[i] *= val_of(b.id).data[i];
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& ga = grad_of(a.id);
        Matrix& gb = grad_of(b.id);
        const Matrix& av = val_of(a.id);
        const Matrix& bv = val_of(b.id);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.data[i] += g.data[i] * bv.data[i];
            gb.data[i] += g.data[i] * av.data[i];
        }
    };
    return o;
}

Var Tape::scale(Var a, double c) {
    Matrix out = val_of(a.id);
    for (double& v : out.data) v *= c;
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, c] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& ga = grad_of(a.id);
        for (size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
    };
    return o;
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    Matrix out;
    matmul_into(out, val_of(a.id), val_of(b.id), trans_a, trans_b, false);
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b, trans_a, trans_b] {
        const Matrix& g = entries_[o.id].grad;
        const Matrix& av = val_of(a.id);
        const Matrix& bv = val_of(b.id);
        if (!trans_a && !trans_b) {
            matmul_into(grad_of(a.id), g, bv, false, true, true);
            matmul_into(grad_of(b.id), av, g, true, false, true);
        } else if (!trans_a && trans_b) {
            matmul_into(grad_of(a.id), g, bv, false, false, true);
            matmul_into(grad_of(b.id), g, av, true, false, true);
        } else {  // tn
            matmul_into(grad_of(a.id), bv, g, false, true, true);
            matmul_into(grad_of(b.id), av, g, false, false, true);
        }
    };
    return o;
}

Var Tape::add_row(Var x, Var bias) {
    const Matrix& xv = val_of(x.id);
    const Matrix& bv = val_of(bias.id);
    SDAR_CHECK(bv.rows == 1 && bv.cols == xv.cols, "add_row: bias shape mismatch");
    Matrix out = xv;
    for (int r = 0; r < out.rows; ++r) axpy(1.0, bv.row(0), out.row(r));
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, bias] {
        const Matrix& g = entries_[o.id].grad;
        accumulate(grad_of(x.id), g);
        Matrix& gb = grad_of(bias.id);
        for (int r = 0; r < g.rows; ++r) axpy(1.0, g.row(r), gb.row(0));
    };
    return o;
}

Var Tape::add_tiled(Var x, Var table) {
    const Matrix& xv = val_of(x.id);
    const Matrix& tv = val_of(table.id);
    SDAR_CHECK(tv.cols == xv.cols && tv.rows > 0, "add_tiled: table shape mismatch");
    const int period = tv.rows;
    Matrix out = xv;
    for (int r = 0; r < out.rows; ++r) axpy(1.0, tv.row(r % period), out.row(r));
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, table, period] {
        const Matrix& g = entries_[o.id].grad;
        accumulate(grad_of(x.id), g);
        Matrix& gt = grad_of(table.id);
        for (int r = 0; r < g.rows; ++r) axpy(1.0, g.row(r), gt.row(r % period));
    };
    return o;
}

Var Tape::concat_cols(Var a, Var b) {
    const Matrix& av = val_of(a.id);
    const Matrix& bv = val_of(b.id);
    SDAR_CHECK(av.rows == bv.rows, "concat_cols: row mismatch");
    Matrix out(av.rows, av.cols + bv.cols);
    for (int r = 0; r < out.rows; ++r) {
        std::copy(av.row_ptr(r), av.row_ptr(r) + av.cols, out.row_ptr(r));
        std::copy(bv.row_ptr(r), bv.row_ptr(r) + bv.cols, out.row_ptr(r) + av.cols);
    }
    const int ca = av.cols, cb = bv.cols;
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b, ca, cb] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& ga = grad_of(a.id);
        Matrix& gb = grad_of(b.id);
        for (int r = 0; r < g.rows; ++r) {
            for (int j = 0; j < ca; ++j) ga.at(r, j) += g.at(r, j);
            for (int j = 0; j < cb; ++j) gb.at(r, j) += g.at(r, ca + j);
        }
    };
    return o;
}

Var Tape::slice_cols(Var x, int start, int len) {
    const Matrix& xv = val_of(x.id);
    SDAR_CHECK(start >= 0 && len > 0 && start + len <= xv.cols, "slice_cols: range");
    Matrix out(xv.rows, len);
    for (int r = 0; r < out.rows; ++r)
        std::copy(xv.row_ptr(r) + start, xv.row_ptr(r) + start + len, out.row_ptr(r));
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, start, len] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& gx = grad_of(x.id);
        for (int r = 0; r < g.rows; ++r)
            for (int j = 0; j < len; ++j) gx.at(r, start + j) += g.at(r, j);
    };
    return o;
}

Var Tape::concat_rows(Var a, Var b) {
    const Matrix& av = val_of(a.id);
    const Matrix& bv = val_of(b.id);
    SDAR_CHECK(av.cols == bv.cols, "concat_rows: col mismatch");
    Matrix out(av.rows + bv.rows, av.cols);
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.size());
    const int ra = av.rows;
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, a, b, ra] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& ga = grad_of(a.id);
        Matrix& gb = grad_of(b.id);
        for (size_t i = 0; i < ga.size(); ++i) ga.data[i] += g.data[i];
        const size_t off = static_cast<size_t>(ra) * g.cols;
        for (size_t i = 0; i < gb.size(); ++i) gb.data[i] += g.data[off + i];
    };
    return o;
}

Var Tape::gather_rows(Var x, std::vector<int> idx) {
    const Matrix& xv = val_of(x.id);
    Matrix out(static_cast<int>(idx.size()), xv.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
        SDAR_CHECK(idx[i] >= 0 && idx[i] < xv.rows, "gather_rows: index out of range");
        std::copy(xv.row_ptr(idx[i]), xv.row_ptr(idx[i]) + xv.cols, out.row_ptr(static_cast<int>(i)));
    }
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, idx = std::move(idx)] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& gx = grad_of(x.id);
        for (size_t i = 0; i < idx.size(); ++i)
            axpy(1.0, g.row(static_cast<int>(i)), gx.row(idx[i]));
    };
    return o;
}

Var Tape::fold_rows(Var x, int group) {
    const Matrix& xv = val_of(x.id);
    SDAR_CHECK(group > 0 && xv.rows % group == 0, "fold_rows: rows not divisible by group");
    const int n = xv.rows / group;
    const int c = xv.cols;
    Matrix out(n, group * c);
    for (int i = 0; i < n; ++i)
        for (int s = 0; s < group; ++s)
            std::copy(xv.row_ptr(i * group + s), xv.row_ptr(i * group + s) + c,
                      out.row_ptr(i) + s * c);
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, group, n, c] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& gx = grad_of(x.id);
        for (int i = 0; i < n; ++i)
            for (int s = 0; s < group; ++s)
                for (int j = 0; j < c; ++j) gx.at(i * group + s, j) += g.at(i, s * c + j);
    };
    return o;
}

Var Tape::gelu(Var x) {
    const Matrix& xv = val_of(x.id);
    Matrix out = xv;
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x] {
        const Matrix& g = entries_[o.id].grad;
        const Matrix& xv2 = val_of(x.id);
        Matrix& gx = grad_of(x.id);
        for (size_t i = 0; i < g.size(); ++i) {
            const double v = xv2.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx.data[i] += g.data[i] * (cdf + v * pdf);
        }
    };
    return o;
}

Var Tape::rmsnorm(Var x, Var gain) {
    const Matrix& xv = val_of(x.id);
    const Matrix& gv = val_of(gain.id);
    SDAR_CHECK(gv.rows == 1 && gv.cols == xv.cols, "rmsnorm: gain shape mismatch");
    const int c = xv.cols;
    std::vector<double> rms(xv.rows);
    Matrix out(xv.rows, c);
    for (int r = 0; r < xv.rows; ++r) {
        double ss = 0.0;
        for (int j = 0; j < c; ++j) ss += xv.at(r, j) * xv.at(r, j);
        rms[r] = std::sqrt(ss / c + kRmsEps);
        for (int j = 0; j < c; ++j) out.at(r, j) = xv.at(r, j) / rms[r] * gv.at(0, j);
    }
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, gain, rms = std::move(rms), c] {
        const Matrix& g = entries_[o.id].grad;
        const Matrix& xv2 = val_of(x.id);
        const Matrix& gv2 = val_of(gain.id);
        Matrix& gx = grad_of(x.id);
        Matrix& gg = grad_of(gain.id);
        for (int r = 0; r < g.rows; ++r) {
            // u = x / rms; y = u * gain; gx = (gu - u * <gu, u>/c) / rms
            double du = 0.0;
            for (int j = 0; j < c; ++j) {
                const double u = xv2.at(r, j) / rms[r];
                const double gu = g.at(r, j) * gv2.at(0, j);
                gg.at(0, j) += g.at(r, j) * u;
                du += gu * u;
            }
            du /= c;
            for (int j = 0; j < c; ++j) {
                const double u = xv2.at(r, j) / rms[r];
                const double gu = g.at(r, j) * gv2.at(0, j);
                gx.at(r, j) += (gu - u * du) / rms[r];
            }
        }
    };
    return o;
}

Var Tape::attention(Var q, Var k, Var v, int group_len, int heads, AttentionRecord* record) {
    const Matrix& qv = val_of(q.id);
    const Matrix& kv = val_of(k.id);
    const Matrix& vv = val_of(v.id);
    SDAR_CHECK(qv.same_shape(kv) && qv.same_shape(vv), "attention: q/k/v shape mismatch");
    SDAR_CHECK(group_len > 0 && qv.rows % group_len == 0, "attention: rows not divisible by group");
    SDAR_CHECK(heads > 0 && qv.cols % heads == 0, "attention: cols not divisible by heads");
    const int groups = qv.rows / group_len;
    const int dh = qv.cols / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<Matrix>>();
    probs->reserve(static_cast<size_t>(groups) * heads);
    Matrix out(qv.rows, qv.cols);
    std::vector<double> scores(group_len);
    for (int g = 0; g < groups; ++g) {
        const int base = g * group_len;
        for (int h = 0; h < heads; ++h) {
            const int off = h * dh;
            Matrix p(group_len, group_len, 0.0);
            for (int i = 0; i < group_len; ++i) {
                const double* qi = qv.row_ptr(base + i) + off;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = kv.row_ptr(base + j) + off;
                    double s = 0.0;
                    for (int d = 0; d < dh; ++d) s += qi[d] * kj[d];
                    scores[j] = s * sc;
                    mx = std::max(mx, scores[j]);
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    denom += scores[j];
                }
                double* orow = out.row_ptr(base + i) + off;
                for (int j = 0; j <= i; ++j) {
                    const double pij = scores[j] / denom;
                    p.at(i, j) = pij;
                    const double* vj = vv.row_ptr(base + j) + off;
                    for (int d = 0; d < dh; ++d) orow[d] += pij * vj[d];
                }
            }
            probs->push_back(std::move(p));
        }
    }
    if (record) {
        record->groups = groups;
        record->heads = heads;
        record->group_len = group_len;
        record->probs = *probs;
    }

    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, q, k, v, group_len, heads, dh, sc, groups, probs] {
        const Matrix& g = entries_[o.id].grad;
        const Matrix& qv2 = val_of(q.id);
        const Matrix& kv2 = val_of(k.id);
        const Matrix& vv2 = val_of(v.id);
        Matrix& gq = grad_of(q.id);
        Matrix& gk = grad_of(k.id);
        Matrix& gv = grad_of(v.id);
        std::vector<double> gp(group_len), gs(group_len);
        for (int gr = 0; gr < groups; ++gr) {
            const int base = gr * group_len;
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                const Matrix& p = (*probs)[static_cast<size_t>(gr) * heads + h];
                for (int i = 0; i < group_len; ++i) {
                    const double* go = g.row_ptr(base + i) + off;
                    double dotsum = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        const double* vj = vv2.row_ptr(base + j) + off;
                        double s = 0.0;
                        for (int d = 0; d < dh; ++d) s += go[d] * vj[d];
                        gp[j] = s;
                        dotsum += s * p.at(i, j);
                    }
                    const double* qi = qv2.row_ptr(base + i) + off;
                    double* gqi = gq.row_ptr(base + i) + off;
                    for (int j = 0; j <= i; ++j) {
                        gs[j] = p.at(i, j) * (gp[j] - dotsum);
                        const double* kj = kv2.row_ptr(base + j) + off;
                        double* gkj = gk.row_ptr(base + j) + off;
                        double* gvj = gv.row_ptr(base + j) + off;
                        const double w = sc * gs[j];
                        for (int d = 0; d < dh; ++d) {
                            gqi[d] += w * kj[d];
                            gkj[d] += w * qi[d];
                            gvj[d] += p.at(i, j) * go[d];
                        }
                    }
                }
            }
        }
    };
    return o;
}

Var Tape::cross_entropy(Var logits, std::vector<int> targets) {
    const Matrix& lv = val_of(logits.id);
    SDAR_CHECK(static_cast<int>(targets.size()) == lv.rows, "cross_entropy: target count");
    auto probs = std::make_shared<Matrix>(lv.rows, lv.cols);
    Matrix out(lv.rows, 1);
    for (int r = 0; r < lv.rows; ++r) {
        SDAR_CHECK(targets[r] >= 0 && targets[r] < lv.cols, "cross_entropy: target range");
        const double lse = log_sum_exp(lv.row(r));
        out.at(r, 0) = lse - lv.at(r, targets[r]);
        for (int j = 0; j < lv.cols; ++j) probs->at(r, j) = std::exp(lv.at(r, j) - lse);
    }
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, logits, targets = std::move(targets), probs] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& gl = grad_of(logits.id);
        for (int r = 0; r < gl.rows; ++r) {
            const double gr = g.at(r, 0);
            if (gr == 0.0) continue;
            for (int j = 0; j < gl.cols; ++j) gl.at(r, j) += gr * probs->at(r, j);
            gl.at(r, targets[r]) -= gr;
        }
    };
    return o;
}

Var Tape::cluster_cross_entropy(Var logits, std::vector<int> targets, int clusters) {
    const Matrix& lv = val_of(logits.id);
    SDAR_CHECK(clusters > 0 && lv.cols % clusters == 0,
               "cluster_cross_entropy: vocabulary not divisible by clusters");
    SDAR_CHECK(static_cast<int>(targets.size()) == lv.rows, "cluster_cross_entropy: target count");
    const int m = lv.cols / clusters;
    auto probs = std::make_shared<Matrix>(lv.rows, lv.cols);
    auto mass = std::make_shared<std::vector<double>>(lv.rows);
    Matrix out(lv.rows, 1);
    for (int r = 0; r < lv.rows; ++r) {
        SDAR_CHECK(targets[r] >= 0 && targets[r] < lv.cols, "cluster_cross_entropy: target range");
        const int blk = targets[r] / m;
        const double lse = log_sum_exp(lv.row(r));
        const double blk_lse = log_sum_exp(lv.row(r).subspan(static_cast<size_t>(blk) * m, m));
        out.at(r, 0) = lse - blk_lse;
        for (int j = 0; j < lv.cols; ++j) probs->at(r, j) = std::exp(lv.at(r, j) - lse);
        (*mass)[r] = std::exp(blk_lse - lse);
    }
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, logits, targets = std::move(targets), probs, mass, m] {
        const Matrix& g = entries_[o.id].grad;
        Matrix& gl = grad_of(logits.id);
        for (int r = 0; r < gl.rows; ++r) {
            const double gr = g.at(r, 0);
            if (gr == 0.0) continue;
            const int blk = targets[r] / m;
            for (int j = 0; j < gl.cols; ++j) {
                double d = probs->at(r, j);
                if (j / m == blk) d -= probs->at(r, j) / (*mass)[r];
                gl.at(r, j) += gr * d;
            }
        }
    };
    return o;
}

Var Tape::mean_all(Var x) {
    const Matrix& xv = val_of(x.id);
    SDAR_CHECK(!xv.empty(), "mean_all: empty input");
    double s = 0.0;
    for (double v : xv.data) s += v;
    const double inv = 1.0 / static_cast<double>(xv.size());
    Matrix out(1, 1);
    out.at(0, 0) = s * inv;
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x, inv] {
        const double g = entries_[o.id].grad.at(0, 0) * inv;
        Matrix& gx = grad_of(x.id);
        for (double& v : gx.data) v += g;
    };
    return o;
}

Var Tape::sum_all(Var x) {
    const Matrix& xv = val_of(x.id);
    double s = 0.0;
    for (double v : xv.data) s += v;
    Matrix out(1, 1);
    out.at(0, 0) = s;
    Var o = push(std::move(out));
    entries_[o.id].back = [this, o, x] {
        const double g = entries_[o.id].grad.at(0, 0);
        Matrix& gx = grad_of(x.id);
        for (double& v : gx.data) v += g;
    };
    return o;
}

Var Tape::stop_gradient(Var x) { return push(val_of(x.id)); }

void Tape::backward(Var root) {
    Entry& r = entries_.at(root.id);
    SDAR_CHECK(r.value.rows == 1 && r.value.cols == 1, "backward: root must be scalar");
    grad_of(root.id).at(0, 0) = 1.0;
    for (int i = root.id; i >= 0; --i) {
        Entry& e = entries_[i];
        if (e.grad.empty()) continue;
        if (e.back) e.back();
        if (e.source) {
            if (e.source->grad.empty())
                e.source->grad = Matrix(e.value.rows, e.value.cols);
            accumulate(e.source->grad, e.grad);
        }
    }
}

GradCheckResult grad_check(const std::function<Var(Tape&)>& build,
                           std::span<Parameter* const> params, double h, int stride,
                           double floor) {
    SDAR_CHECK(stride >= 1, "grad_check: stride must be positive");
    SDAR_CHECK(floor > 0.0, "grad_check: denominator floor must be positive");
    for (Parameter* p : params) p->grad = Matrix();
    std::vector<Matrix> analytic;
    {
        Tape tape;
        Var loss = build(tape);
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (Parameter* p : params)
        analytic.push_back(p->grad.empty() ? Matrix(p->value.rows, p->value.cols) : p->grad);

    auto eval = [&build]() {
        Tape tape;
        Var loss = build(tape);
        return tape.value(loss).at(0, 0);
    };

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        for (size_t i = 0; i < p->value.size(); i += stride) {
            const double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            const double lp = eval();
            p->value.data[i] = orig - h;
            const double lm = eval();
            p->value.data[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[pi].data[i];
            const double rel = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
            res.max_rel_err = std::max(res.max_rel_err, rel);
            res.max_abs_grad = std::max(res.max_abs_grad, std::abs(a));
            ++res.checked;
        }
    }
    return res;
}

}  // namespace sdar
