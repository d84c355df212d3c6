#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "idp/numerics/matrix.hpp"
#include "idp/numerics/prob.hpp"
#include "idp/numerics/ridge.hpp"

// Reverse-mode differentiation over the handful of matrix operations the
// reconstruction losses are built from. A Tape records one computation; nodes
// are appended in evaluation order, so reverse insertion order is a valid
// topological order for the backward sweep.
namespace idp::ad {

struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

    Var constant(Matrix value) { return push(std::move(value), false, {}); }
    Var parameter(Matrix value) { return push(std::move(value), true, {}); }

    /// Records an op output; it requires grad iff any input does.
    Var record(Matrix value, std::span<const Var> inputs, Backward backward) {
        bool needs = false;
        for (const auto& v : inputs) needs = needs || node(v).requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    [[nodiscard]] const Matrix& value(Var v) const { return node(v).value; }
    [[nodiscard]] bool requires_grad(Var v) const { return node(v).requires_grad; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] double scalar(Var v) const {
        const auto& m = value(v);
        require(m.rows() == 1 && m.cols() == 1, ErrorKind::DimensionMismatch, "scalar() on non-scalar node");
        return m(0, 0);
    }

    /// Gradient of the last backward() output with respect to `v`; zeros if
    /// `v` did not influence it.
    [[nodiscard]] Matrix grad(Var v) const {
        const auto& n = node(v);
        if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void accumulate(Var v, const Matrix& g) {
        auto& n = node(v);
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    void backward(Var out) {
        require(value(out).size() == 1, ErrorKind::DimensionMismatch, "backward() needs a scalar output");
        for (auto& n : nodes_) n.grad.resize(0, 0);
        if (!node(out).requires_grad) return;
        node(out).grad = Matrix::Ones(1, 1);
        for (std::size_t i = out.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.grad.size() == 0 || !n.backward) continue;
            // copy: the callback may grow nodes_ in principle
            const Matrix g = n.grad;
            n.backward(*this, g);
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(backward)});
        return Var{nodes_.size() - 1};
    }

    Node& node(Var v) {
        require(v.id < nodes_.size(), ErrorKind::InvalidArgument, "unknown tape variable");
        return nodes_[v.id];
    }
    const Node& node(Var v) const {
        require(v.id < nodes_.size(), ErrorKind::InvalidArgument, "unknown tape variable");
        return nodes_[v.id];
    }

    std::vector<Node> nodes_;
};

inline Var stop_gradient(Tape& t, Var v) { return t.constant(t.value(v)); }

inline Var matmul(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.cols() == bv.rows(), ErrorKind::DimensionMismatch, "matmul inner dimensions");
    const Var in[] = {a, b};
    return t.record(av * bv, in, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
        if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
    });
}

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), ErrorKind::DimensionMismatch, "add shapes");
    const Var in[] = {a, b};
    return t.record(av + bv, in, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Var sub(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), ErrorKind::DimensionMismatch, "sub shapes");
    const Var in[] = {a, b};
    return t.record(av - bv, in, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(b)) tp.accumulate(b, -g);
    });
}

inline Var scale(Tape& t, Var a, double c) {
    const Var in[] = {a};
    return t.record(c * t.value(a), in, [a, c](Tape& tp, const Matrix& g) { tp.accumulate(a, c * g); });
}

/// Vertical concatenation of row blocks.
inline Var vconcat(Tape& t, std::span<const Var> parts) {
    std::vector<Matrix> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(t.value(p));
    std::vector<Var> ids(parts.begin(), parts.end());
    return t.record(vstack(values), parts, [ids](Tape& tp, const Matrix& g) {
        Eigen::Index at = 0;
        for (const auto& p : ids) {
            const auto rows = tp.value(p).rows();
            if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(at, rows));
            at += rows;
        }
    });
}

/// Horizontal concatenation of (N x 1) columns into (N x C).
inline Var hconcat(Tape& t, std::span<const Var> cols) {
    require(!cols.empty(), ErrorKind::InvalidArgument, "hconcat of nothing");
    const auto rows = t.value(cols.front()).rows();
    Matrix out(rows, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const Matrix& v = t.value(cols[c]);
        require(v.rows() == rows && v.cols() == 1, ErrorKind::DimensionMismatch, "hconcat expects N x 1 columns");
        out.col(static_cast<Eigen::Index>(c)) = v.col(0);
    }
    std::vector<Var> ids(cols.begin(), cols.end());
    return t.record(std::move(out), cols, [ids](Tape& tp, const Matrix& g) {
        for (std::size_t c = 0; c < ids.size(); ++c) tp.accumulate(ids[c], g.col(static_cast<Eigen::Index>(c)));
    });
}

/// Squared Frobenius norm of consecutive blocks of `block_rows` rows: (B x 1).
inline Var block_sqnorm(Tape& t, Var x, Eigen::Index block_rows) {
    const Matrix& xv = t.value(x);
    require(block_rows >= 1 && xv.rows() % block_rows == 0, ErrorKind::DimensionMismatch,
            "block_sqnorm: rows not divisible by block size");
    const Eigen::Index blocks = xv.rows() / block_rows;
    Matrix out(blocks, 1);
    for (Eigen::Index b = 0; b < blocks; ++b) out(b, 0) = xv.middleRows(b * block_rows, block_rows).squaredNorm();
    const Var in[] = {x};
    return t.record(std::move(out), in, [x, block_rows, blocks](Tape& tp, const Matrix& g) {
        Matrix dx = 2.0 * tp.value(x);
        for (Eigen::Index b = 0; b < blocks; ++b) dx.middleRows(b * block_rows, block_rows) *= g(b, 0);
        tp.accumulate(x, dx);
    });
}

/// Per-channel affine map y = x * scale + shift, with scale and shift (1 x D)
/// broadcast over the rows of x.
inline Var channel_affine(Tape& t, Var x, Var scale_row, Var shift_row) {
    const Matrix& xv = t.value(x);
    const Matrix& sv = t.value(scale_row);
    const Matrix& bv = t.value(shift_row);
    require(sv.rows() == 1 && bv.rows() == 1 && sv.cols() == xv.cols() && bv.cols() == xv.cols(),
            ErrorKind::DimensionMismatch, "channel_affine expects 1 x D scale and shift");
    Matrix y = (xv.array().rowwise() * sv.row(0).array()).rowwise() + bv.row(0).array();
    const Var in[] = {x, scale_row, shift_row};
    return t.record(std::move(y), in, [x, scale_row, shift_row](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(x)) {
            Matrix dx = g.array().rowwise() * tp.value(scale_row).row(0).array();
            tp.accumulate(x, dx);
        }
        if (tp.requires_grad(scale_row)) {
            Matrix ds = (g.array() * tp.value(x).array()).colwise().sum();
            tp.accumulate(scale_row, ds);
        }
        if (tp.requires_grad(shift_row)) {
            Matrix db = g.colwise().sum();
            tp.accumulate(shift_row, db);
        }
    });
}

/// H = C^T (C C^T + lambda I)^{-1} C for basis C (n x d).
///
/// With A = C C^T + lambda I and B = A^{-1} C, dL/dC = B (S + S^T)(I - H)
/// where S = dL/dH.
inline Var ridge_projector(Tape& t, Var basis, double lambda) {
    const Matrix& cv = t.value(basis);
    RidgeFactor factor(cv, lambda);
    Matrix b = factor.solve(cv);
    Matrix h = cv.transpose() * b;
    const Var in[] = {basis};
    return t.record(h, in, [basis, b = std::move(b), h](Tape& tp, const Matrix& g) {
        Matrix sym = g + g.transpose();
        Matrix complement = -h;
        complement.diagonal().array() += 1.0;
        tp.accumulate(basis, b * sym * complement);
    });
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels; 1 x 1.
inline Var cross_entropy(Tape& t, Var logits, std::vector<int> labels) {
    const Matrix& lv = t.value(logits);
    require(static_cast<Eigen::Index>(labels.size()) == lv.rows(), ErrorKind::DimensionMismatch,
            "cross_entropy label count");
    require(lv.rows() >= 1, ErrorKind::EmptyBatch, "cross_entropy of empty batch");
    const auto n = lv.rows();
    Matrix probs(n, lv.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < lv.cols(), ErrorKind::InvalidArgument, "cross_entropy label out of range");
        const Vector ls = log_softmax(lv.row(i).transpose());
        loss -= ls[y];
        probs.row(i) = ls.array().exp().matrix().transpose();
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(n);
    const Var in[] = {logits};
    return t.record(std::move(out), in, [logits, probs = std::move(probs), labels = std::move(labels)](Tape& tp, const Matrix& g) {
        Matrix d = probs;
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
        d *= g(0, 0) / static_cast<double>(d.rows());
        tp.accumulate(logits, d);
    });
}

/// Mean over rows of KL(target_i || softmax(logits_i)); the target is constant.
inline Var kl_to_target(Tape& t, Matrix target, Var logits) {
    const Matrix& lv = t.value(logits);
    require(target.rows() == lv.rows() && target.cols() == lv.cols(), ErrorKind::DimensionMismatch,
            "kl_to_target shapes");
    require(lv.rows() >= 1, ErrorKind::EmptyBatch, "kl_to_target of empty batch");
    const auto n = lv.rows();
    Matrix probs(n, lv.cols());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector ls = log_softmax(lv.row(i).transpose());
        for (Eigen::Index c = 0; c < lv.cols(); ++c) {
            const double p = target(i, c);
            if (p > 0.0) loss += p * (std::log(p) - ls[c]);
        }
        probs.row(i) = ls.array().exp().matrix().transpose();
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(n);
    const Var in[] = {logits};
    return t.record(std::move(out), in, [logits, probs = std::move(probs), target = std::move(target)](Tape& tp, const Matrix& g) {
        // d/dl_c of -sum_k p_k log q_k = q_c * sum_k p_k - p_c
        Matrix d(probs.rows(), probs.cols());
        for (Eigen::Index i = 0; i < d.rows(); ++i) d.row(i) = probs.row(i) * target.row(i).sum() - target.row(i);
        d *= g(0, 0) / static_cast<double>(d.rows());
        tp.accumulate(logits, d);
    });
}

/// sum_i w_i * s_i over 1 x 1 nodes.
inline Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights) {
    require(terms.size() == weights.size() && !terms.empty(), ErrorKind::InvalidArgument, "weighted_sum arity");
    double total = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * t.scalar(terms[i]);
    Matrix out(1, 1);
    out(0, 0) = total;
    std::vector<Var> ids(terms.begin(), terms.end());
    std::vector<double> w(weights.begin(), weights.end());
    return t.record(std::move(out), terms, [ids, w](Tape& tp, const Matrix& g) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (w[i] != 0.0) tp.accumulate(ids[i], w[i] * g);
        }
    });
}

}  // namespace idp::ad
