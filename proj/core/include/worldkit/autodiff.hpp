#pragma once

#include "worldkit/geometry.hpp"

#include <functional>
#include <unordered_map>
#include <vector>

namespace worldkit::ad {

/// Handle to a node on a Tape.
struct Var {
    int id = -1;
};

/// Minimal reverse-mode tape over dense matrices. Nodes are appended in
/// evaluation order; backward() walks them in reverse. Parameters are
/// registered by address so their gradients can be looked up after the pass.
/// A tape is single-use: build, backward once, read gradients.
class Tape {
public:
    Var constant(MatX value);
    /// Leaf bound to `p`. Registering the same matrix twice returns the same node.
    Var param(const MatX &p);

    const MatX &value(Var v) const { return nodes_.at(v.id).value; }
    const MatX &grad(Var v) const { return nodes_.at(v.id).grad; }
    /// Gradient of the last backward() target w.r.t. `p`; zeros if `p` was
    /// never registered.
    MatX param_grad(const MatX &p) const;

    /// Seeds d out / d out = 1. `out` must be 1×1.
    void backward(Var out);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    /// a + row broadcast over every row; `row` is 1×cols(a).
    Var add_row(Var a, Var row);
    Var mul(Var a, Var b);
    /// a ⊙ row, broadcast over rows.
    Var mul_row(Var a, Var row);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var relu(Var a);
    /// Zero-mean, unit-variance normalization of each row (no affine part).
    Var layer_norm_rows(Var a, double eps);
    /// Row-wise softmax with max subtraction.
    Var softmax_rows(Var a);
    Var transpose(Var a);
    /// Row-major flatten to a 1×(rows·cols) row vector.
    Var flatten(Var a);
    /// Constant left-multiplication: m * a, with no gradient for m.
    Var left_multiply(const MatX &m, Var a);
    /// mean |a - b| over every element, 1×1.
    Var mean_abs_diff(Var a, Var b);
    /// mean (a - b)^2 over every element, 1×1.
    Var mse(Var a, Var b);

private:
    struct Node {
        MatX value;
        MatX grad;
        std::function<void(Tape &, const MatX &)> back; // receives this node's grad
    };
    Var push(MatX value, std::function<void(Tape &, const MatX &)> back = {});
    void accumulate(Var v, const MatX &g);

    std::vector<Node> nodes_;
    std::unordered_map<const MatX *, int> params_;
};

} // namespace worldkit::ad
