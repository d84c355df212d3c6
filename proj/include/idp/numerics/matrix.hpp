#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "idp/error.hpp"

namespace idp {

/// Dense row-major matrix of doubles. Row-major so that a block of r rows is
/// one feature map laid out position-major.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, ErrorKind kind, const std::string& what) {
    require(m.allFinite(), kind, what);
}

inline void require_same_cols(const Matrix& a, const Matrix& b, const std::string& what) {
    require(a.cols() == b.cols(), ErrorKind::DimensionMismatch,
            what + ": column counts " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
}

inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::DimensionMismatch, "max_abs_diff");
    return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff();
}

/// Stacks row blocks vertically; all blocks must share a column count.
inline Matrix vstack(std::span<const Matrix> blocks) {
    if (blocks.empty()) return {};
    Eigen::Index rows = 0;
    const Eigen::Index cols = blocks.front().cols();
    for (const auto& b : blocks) {
        require(b.cols() == cols, ErrorKind::DimensionMismatch, "vstack: column mismatch");
        rows += b.rows();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
        out.middleRows(at, b.rows()) = b;
        at += b.rows();
    }
    return out;
}

}  // namespace idp
