#pragma once

#include <Eigen/Cholesky>

#include <string>

#include "idp/numerics/matrix.hpp"

namespace idp {

/// Reciprocal condition estimate below which the Gram system counts as singular.
inline constexpr double kSingularRcond = 1e-12;

struct RidgeResult {
    Matrix mapping;         // r x n
    Matrix reconstruction;  // r x d
};

/// Cholesky factorization of basis * basis^T + lambda * I, reusable across
/// many target matrices that share one basis.
class RidgeFactor {
public:
    RidgeFactor(const Matrix& basis, double lambda) : basis_(basis), lambda_(lambda) {
        require(basis.rows() >= 1 && basis.cols() >= 1, ErrorKind::DimensionMismatch, "ridge basis is empty");
        require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::InvalidArgument,
                "ridge lambda must be finite and nonnegative");
        Matrix gram = basis * basis.transpose();
        gram.diagonal().array() += lambda;
        llt_.compute(gram);
        const bool ok = llt_.info() == Eigen::Success && llt_.rcond() > kSingularRcond;
        require(ok, ErrorKind::SingularSystem,
                "basis Gram matrix is not positive definite (lambda=" + std::to_string(lambda) + ")");
    }

    [[nodiscard]] const Matrix& basis() const noexcept { return basis_; }
    [[nodiscard]] double lambda() const noexcept { return lambda_; }

    /// (C C^T + lambda I)^{-1} rhs
    [[nodiscard]] Matrix solve(const Matrix& rhs) const { return llt_.solve(rhs); }

    /// W = T C^T (C C^T + lambda I)^{-1}
    [[nodiscard]] Matrix mapping(const Matrix& targets) const {
        require_same_cols(targets, basis_, "ridge targets vs basis");
        Matrix rhs = basis_ * targets.transpose();
        return solve(rhs).transpose();
    }

    /// C^T (C C^T + lambda I)^{-1} C, the d x d map taking targets to reconstructions.
    [[nodiscard]] Matrix projector() const {
        Matrix b = solve(basis_);
        return basis_.transpose() * b;
    }

private:
    Matrix basis_;
    double lambda_;
    Eigen::LLT<Matrix> llt_;
};

/// Closed-form ridge reconstruction of `targets` from the rows of `basis`.
inline RidgeResult ridge_solve(const Matrix& targets, const Matrix& basis, double lambda) {
    require(targets.cols() >= 1, ErrorKind::DimensionMismatch, "ridge targets need d >= 1");
    require_same_cols(targets, basis, "ridge_solve");
    RidgeFactor factor(basis, lambda);
    RidgeResult out;
    out.mapping = factor.mapping(targets);
    out.reconstruction = out.mapping * basis;
    return out;
}

/// ||T - W C||_F^2 + lambda ||W||_F^2
inline double ridge_objective(const Matrix& targets, const Matrix& basis, const Matrix& mapping, double lambda) {
    return (targets - mapping * basis).squaredNorm() + lambda * mapping.squaredNorm();
}

}  // namespace idp
