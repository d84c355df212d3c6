#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "idp/numerics/matrix.hpp"

namespace idp {

inline constexpr double kProbFloor = 1e-12;

inline Vector softmax(const Vector& logits) {
    require(logits.size() >= 1, ErrorKind::InvalidArgument, "softmax of empty vector");
    require(logits.allFinite(), ErrorKind::InvalidArgument, "softmax of non-finite logits");
    const double top = logits.maxCoeff();
    Vector e = (logits.array() - top).exp();
    return e / e.sum();
}

inline Vector log_softmax(const Vector& logits) {
    require(logits.size() >= 1, ErrorKind::InvalidArgument, "log_softmax of empty vector");
    const double top = logits.maxCoeff();
    const double lse = top + std::log((logits.array() - top).exp().sum());
    return logits.array() - lse;
}

/// Row-wise softmax of an (N x C) logit matrix.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) out.row(i) = softmax(logits.row(i).transpose()).transpose();
    return out;
}

/// KL(p || q) with 0 log 0 = 0 and q floored at kProbFloor.
inline double kl_divergence(const Vector& p, const Vector& q) {
    require(p.size() == q.size(), ErrorKind::DimensionMismatch, "kl_divergence length mismatch");
    double total = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        total += p[i] * std::log(p[i] / std::max(q[i], kProbFloor));
    }
    return std::max(total, 0.0);
}

}  // namespace idp
