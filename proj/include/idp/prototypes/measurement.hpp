#pragma once

#include <vector>

#include "idp/numerics/autodiff.hpp"
#include "idp/numerics/prob.hpp"
#include "idp/numerics/ridge.hpp"
#include "idp/prototypes/bank.hpp"

// Reconstruction classifier: a feature map F (r x D) is reconstructed from
// each class's prototypes V_c by ridge regression, F_hat = F H_c with
// H_c = V_c^T (V_c V_c^T + lambda I)^{-1} V_c. The class logit is the negated
// mean squared reconstruction error -||F_hat - F||^2 / r.
namespace idp {

/// Per-class projectors H_c, computed once and reused for every map.
class ClassProjectors {
public:
    ClassProjectors(const PrototypeBank& bank, double lambda) {
        bank.check();
        projectors_.reserve(bank.class_count());
        for (const auto& v : bank.classes) projectors_.push_back(RidgeFactor(v, lambda).projector());
    }

    [[nodiscard]] std::size_t class_count() const noexcept { return projectors_.size(); }
    [[nodiscard]] const Matrix& operator[](std::size_t c) const { return projectors_[c]; }

    /// Logits (B x C) for B maps of `positions` rows stacked in `rows`.
    [[nodiscard]] Matrix logits(const Matrix& rows, Eigen::Index positions) const {
        require(positions >= 1 && rows.rows() % positions == 0, ErrorKind::DimensionMismatch,
                "feature rows are not a whole number of maps");
        const Eigen::Index maps = rows.rows() / positions;
        Matrix out(maps, static_cast<Eigen::Index>(projectors_.size()));
        for (std::size_t c = 0; c < projectors_.size(); ++c) {
            require(projectors_[c].rows() == rows.cols(), ErrorKind::DimensionMismatch,
                    "feature and prototype channel counts differ");
            const Matrix residual = rows * projectors_[c] - rows;
            for (Eigen::Index b = 0; b < maps; ++b)
                out(b, static_cast<Eigen::Index>(c)) =
                    -residual.middleRows(b * positions, positions).squaredNorm() / static_cast<double>(positions);
        }
        return out;
    }

    [[nodiscard]] Matrix probabilities(const Matrix& rows, Eigen::Index positions) const {
        return softmax_rows(logits(rows, positions));
    }

private:
    std::vector<Matrix> projectors_;
};

/// Class probabilities for one feature map.
inline Vector reconstruction_measurement(const Matrix& features, const PrototypeBank& bank, double lambda) {
    require(features.rows() >= 1, ErrorKind::EmptyBatch, "feature map has no positions");
    require(features.cols() == bank.dim(), ErrorKind::DimensionMismatch, "feature vs bank channel count");
    ClassProjectors proj(bank, lambda);
    return softmax(proj.logits(features, features.rows()).row(0).transpose());
}

namespace ad {

/// Records one projector node per class of a bank held as tape variables.
inline std::vector<Var> record_projectors(Tape& t, std::span<const Var> bank, double lambda) {
    std::vector<Var> out;
    out.reserve(bank.size());
    for (const auto& v : bank) out.push_back(ridge_projector(t, v, lambda));
    return out;
}

/// Recorded logits (B x C) of stacked maps `rows` against per-class projectors.
inline Var record_logits(Tape& t, Var rows, std::span<const Var> projectors, Eigen::Index positions) {
    std::vector<Var> cols;
    cols.reserve(projectors.size());
    const double inv = -1.0 / static_cast<double>(positions);
    for (const auto& h : projectors) {
        const Var residual = sub(t, matmul(t, rows, h), rows);
        cols.push_back(scale(t, block_sqnorm(t, residual, positions), inv));
    }
    return hconcat(t, cols);
}

}  // namespace ad
}  // namespace idp
