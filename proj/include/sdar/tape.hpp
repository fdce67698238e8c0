#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdar/matrix.hpp"

namespace sdar {

/// Trainable tensor. Gradients are accumulated here by Tape::backward; the
/// optimizer owns the moment buffers.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix m;  // AdamW first moment
    Matrix v;  // AdamW second moment
    bool decay = true;
};

/// Owns parameters in creation order; that order is also the checkpoint
/// manifest order, so it must be deterministic for a given configuration.
class ParamStore {
public:
    Parameter& create(const std::string& name, Matrix init, bool decay = true);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    const std::vector<Parameter*>& all() const { return order_; }
    void zero_grads();
    size_t count_scalars() const;

private:
    std::vector<std::unique_ptr<Parameter>> items_;
    std::vector<Parameter*> order_;
};

struct Var {
    int id = -1;
};

/// Row-stochastic attention probabilities captured from a forward pass,
/// one matrix per (group, head) pair.
struct AttentionRecord {
    int groups = 0;
    int heads = 0;
    int group_len = 0;
    std::vector<Matrix> probs;  // index = group * heads + head

    const Matrix& at(int group, int head) const { return probs[group * heads + head]; }
};

/// Reverse-mode tape over Matrix values. Nodes hold a value, a lazily
/// allocated gradient of the same shape, and a backward closure that pulls
/// from the node gradient and pushes into its parents. One tape per loss
/// evaluation; confined to a single thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix value);
    Var param(Parameter& p);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);  // elementwise
    Var scale(Var a, double c);
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    Var add_row(Var x, Var bias);                    // [N,c] + [1,c]
    Var add_tiled(Var x, Var table);                 // row r += table[r % P]
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var x, int start, int len);
    Var concat_rows(Var a, Var b);
    Var gather_rows(Var x, std::vector<int> idx);
    Var fold_rows(Var x, int group);                 // [N*g, c] -> [N, g*c]
    Var gelu(Var x);
    Var rmsnorm(Var x, Var gain);
    /// Multi-head attention, causal within each contiguous group of
    /// `group_len` rows and blind across groups. q/k/v are [N, heads*dh].
    Var attention(Var q, Var k, Var v, int group_len, int heads,
                  AttentionRecord* record = nullptr);
    /// Per-row negative log-likelihood of the target column, [N,1].
    Var cross_entropy(Var logits, std::vector<int> targets);
    /// Per-row negative log of the target's cluster mass; vocabulary is
    /// partitioned into `clusters` equal contiguous blocks.
    Var cluster_cross_entropy(Var logits, std::vector<int> targets, int clusters);
    Var mean_all(Var x);
    Var sum_all(Var x);
    Var stop_gradient(Var x);

    const Matrix& value(Var v) const { return entries_[v.id].value; }
    const Matrix& grad(Var v) const { return entries_[v.id].grad; }
    size_t node_count() const { return entries_.size(); }

    /// Seeds the scalar root with gradient 1 and sweeps the tape in reverse
    /// creation order; parameter leaves accumulate into Parameter::grad.
    void backward(Var root);

private:
    struct Entry {
        Matrix value;
        Matrix grad;
        std::function<void()> back;
        Parameter* source = nullptr;
    };

    Var push(Matrix value);
    Matrix& grad_of(int id);
    const Matrix& val_of(int id) const { return entries_[id].value; }

    std::vector<Entry> entries_;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    long checked = 0;
};

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences, perturbing every `stride`-th scalar of each listed
/// parameter. Relative error is |a - n| / max(floor, |a| + |n|); the floor
/// turns the criterion absolute for entries whose true gradient sits below
/// what central differences can resolve through roundoff (~1e-16 * |loss|
/// / h), so callers probing deep graphs should raise it to that scale.
GradCheckResult grad_check(const std::function<Var(Tape&)>& build,
                           std::span<Parameter* const> params, double h = 1e-5,
                           int stride = 1, double floor = 1e-8);

}  // namespace sdar
