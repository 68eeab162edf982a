#include "worldkit/autodiff.hpp"

#include "worldkit/error.hpp"

#include <cmath>
#include <string>

namespace worldkit::ad {

namespace {

void same_shape(const MatX &a, const MatX &b, const char *op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw InvalidParameter(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                               std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                               std::to_string(b.cols()) + ")");
    }
}

} // namespace

Var Tape::push(MatX value, std::function<void(Tape &, const MatX &)> back) {
    Node n;
    n.grad = MatX::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(Var v, const MatX &g) { nodes_[v.id].grad += g; }

Var Tape::constant(MatX value) { return push(std::move(value)); }

Var Tape::param(const MatX &p) {
    if (const auto it = params_.find(&p); it != params_.end()) return Var{it->second};
    const Var v = push(p);
    params_.emplace(&p, v.id);
    return v;
}

MatX Tape::param_grad(const MatX &p) const {
    const auto it = params_.find(&p);
    if (it == params_.end()) return MatX::Zero(p.rows(), p.cols());
    return nodes_[it->second].grad;
}

void Tape::backward(Var out) {
    if (value(out).size() != 1) throw InvalidParameter("backward: target must be a scalar");
    for (Node &n : nodes_) n.grad.setZero();
    nodes_[out.id].grad(0, 0) = 1.0;
    for (int i = out.id; i >= 0; --i) {
        // callbacks only write to lower-indexed inputs, so the reference stays valid
        if (nodes_[i].back) nodes_[i].back(*this, nodes_[i].grad);
    }
}

Var Tape::matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw InvalidParameter("matmul: inner dimensions differ");
    return push(value(a) * value(b), [a, b](Tape &t, const MatX &g) {
        t.accumulate(a, g * t.value(b).transpose());
        t.accumulate(b, t.value(a).transpose() * g);
    });
}

Var Tape::add(Var a, Var b) {
    same_shape(value(a), value(b), "add");
    return push(value(a) + value(b), [a, b](Tape &t, const MatX &g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var Tape::sub(Var a, Var b) {
    same_shape(value(a), value(b), "sub");
    return push(value(a) - value(b), [a, b](Tape &t, const MatX &g) {
        t.accumulate(a, g);
        t.accumulate(b, -g);
    });
}

Var Tape::add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
        throw InvalidParameter("add_row: row vector width mismatch");
    }
    MatX out = value(a).rowwise() + value(row).row(0);
    return push(std::move(out), [a, row](Tape &t, const MatX &g) {
        t.accumulate(a, g);
        t.accumulate(row, g.colwise().sum());
    });
}

Var Tape::mul(Var a, Var b) {
    same_shape(value(a), value(b), "mul");
    return push(value(a).cwiseProduct(value(b)), [a, b](Tape &t, const MatX &g) {
        t.accumulate(a, g.cwiseProduct(t.value(b)));
        t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
}

Var Tape::mul_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
        throw InvalidParameter("mul_row: row vector width mismatch");
    }
    MatX out = value(a).array().rowwise() * value(row).row(0).array();
    return push(std::move(out), [a, row](Tape &t, const MatX &g) {
        t.accumulate(a, (g.array().rowwise() * t.value(row).row(0).array()).matrix());
        t.accumulate(row, g.cwiseProduct(t.value(a)).colwise().sum());
    });
}

Var Tape::scale(Var a, double s) {
    return push(s * value(a), [a, s](Tape &t, const MatX &g) { t.accumulate(a, s * g); });
}

Var Tape::add_scalar(Var a, double s) {
    return push((value(a).array() + s).matrix(), [a](Tape &t, const MatX &g) { t.accumulate(a, g); });
}

Var Tape::relu(Var a) {
    return push(value(a).cwiseMax(0.0), [a](Tape &t, const MatX &g) {
        t.accumulate(a, (t.value(a).array() > 0.0).select(g, 0.0));
    });
}

Var Tape::layer_norm_rows(Var a, double eps) {
    const MatX &x = value(a);
    const Eigen::Index n = x.cols();
    MatX y(x.rows(), n);
    VecX inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().mean();
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        y.row(r) = (x.row(r).array() - mu) * inv_std[r];
    }
    const Var out = push(y, {});
    nodes_[out.id].back = [a, out, inv_std](Tape &t, const MatX &g) {
        const MatX &yv = t.value(out);
        MatX dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const double gm = g.row(r).mean();
            const double gy = g.row(r).dot(yv.row(r)) / static_cast<double>(g.cols());
            dx.row(r) = inv_std[r] * (g.row(r).array() - gm - yv.row(r).array() * gy);
        }
        t.accumulate(a, dx);
    };
    return out;
}

Var Tape::softmax_rows(Var a) {
    const MatX &x = value(a);
    MatX y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const Eigen::RowVectorXd e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
        y.row(r) = e / e.sum();
    }
    const Var out = push(y, {});
    nodes_[out.id].back = [a, out](Tape &t, const MatX &g) {
        const MatX &yv = t.value(out);
        MatX dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const double dot = g.row(r).dot(yv.row(r));
            dx.row(r) = yv.row(r).array() * (g.row(r).array() - dot);
        }
        t.accumulate(a, dx);
    };
    return out;
}

Var Tape::transpose(Var a) {
    return push(value(a).transpose(), [a](Tape &t, const MatX &g) { t.accumulate(a, g.transpose()); });
}

Var Tape::flatten(Var a) {
    const MatX &x = value(a);
    MatX out(1, x.size());
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) out(0, r * x.cols() + c) = x(r, c);
    const Eigen::Index rows = x.rows(), cols = x.cols();
    return push(std::move(out), [a, rows, cols](Tape &t, const MatX &g) {
        MatX dx(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) dx(r, c) = g(0, r * cols + c);
        t.accumulate(a, dx);
    });
}

Var Tape::left_multiply(const MatX &m, Var a) {
    if (m.cols() != value(a).rows()) throw InvalidParameter("left_multiply: inner dimensions differ");
    return push(m * value(a), [m, a](Tape &t, const MatX &g) { t.accumulate(a, m.transpose() * g); });
}

Var Tape::mean_abs_diff(Var a, Var b) {
    same_shape(value(a), value(b), "mean_abs_diff");
    const MatX d = value(a) - value(b);
    const double n = static_cast<double>(std::max<Eigen::Index>(1, d.size()));
    MatX out(1, 1);
    out(0, 0) = d.cwiseAbs().sum() / n;
    return push(std::move(out), [a, b, d, n](Tape &t, const MatX &g) {
        // subgradient 0 at exact ties
        const MatX s = d.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); }) * (g(0, 0) / n);
        t.accumulate(a, s);
        t.accumulate(b, -s);
    });
}

Var Tape::mse(Var a, Var b) {
    same_shape(value(a), value(b), "mse");
    const MatX d = value(a) - value(b);
    const double n = static_cast<double>(std::max<Eigen::Index>(1, d.size()));
    MatX out(1, 1);
    out(0, 0) = d.squaredNorm() / n;
    return push(std::move(out), [a, b, d, n](Tape &t, const MatX &g) {
        const MatX s = (2.0 * g(0, 0) / n) * d;
        t.accumulate(a, s);
        t.accumulate(b, -s);
    });
}

} // namespace worldkit::ad
