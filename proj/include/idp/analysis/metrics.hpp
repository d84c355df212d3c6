#pragma once

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "idp/numerics/matrix.hpp"
#include "idp/numerics/ridge.hpp"
#include "idp/numerics/rng.hpp"

namespace idp {

enum class DomainTag : std::uint8_t { Source, Target, Proxy };

struct DomainSample {
    Matrix rows;  // r x D
    DomainTag tag = DomainTag::Source;
};

/// Mean squared Euclidean distance over all cross pairs (a, b).
inline double discrepancy(const Matrix& a, const Matrix& b) {
    require_same_cols(a, b, "discrepancy");
    require(a.rows() >= 1 && b.rows() >= 1, ErrorKind::DimensionMismatch, "discrepancy of an empty domain");
    const double sa = a.rowwise().squaredNorm().mean();
    const double sb = b.rowwise().squaredNorm().mean();
    const double cross = a.colwise().mean().dot(b.colwise().mean());
    return std::max(0.0, sa + sb - 2.0 * cross);
}

/// Mean over samples of x^T x / r.
inline Matrix mean_gram(std::span<const Matrix> samples) {
    require(!samples.empty(), ErrorKind::DimensionMismatch, "gram of an empty domain");
    const auto d = samples.front().cols();
    Matrix g = Matrix::Zero(d, d);
    for (const auto& x : samples) {
        require(x.cols() == d && x.rows() >= 1, ErrorKind::DimensionMismatch, "gram sample shape");
        g.noalias() += x.transpose() * x / static_cast<double>(x.rows());
    }
    return g / static_cast<double>(samples.size());
}

inline double style_distance(std::span<const Matrix> a, std::span<const Matrix> b) {
    const Matrix ga = mean_gram(a);
    const Matrix gb = mean_gram(b);
    require(ga.cols() == gb.cols(), ErrorKind::DimensionMismatch, "style distance channel counts differ");
    return (ga - gb).norm();
}

/// Rows standardized per channel with their own domain's statistics.
inline std::vector<Matrix> standardize_domain(std::span<const Matrix> samples) {
    const Matrix all = vstack(samples);
    const RowVector mean = all.colwise().mean();
    const RowVector sd =
        ((all.rowwise() - mean).array().square().colwise().mean().sqrt()).max(1e-12).matrix();
    std::vector<Matrix> out;
    out.reserve(samples.size());
    for (const auto& x : samples) out.push_back(((x.rowwise() - mean).array().rowwise() / sd.array()).matrix());
    return out;
}

/// Mean squared row distance between paired samples after each domain is
/// standardized per channel. A feature-space stand-in for a perceptual score.
inline double content_distance(std::span<const Matrix> a, std::span<const Matrix> b) {
    require(a.size() == b.size() && !a.empty(), ErrorKind::UnpairedInput,
            "content distance needs the same nonzero number of samples in each domain");
    for (std::size_t i = 0; i < a.size(); ++i) {
        require(a[i].rows() == b[i].rows() && a[i].cols() == b[i].cols(), ErrorKind::UnpairedInput,
                "paired samples differ in shape at index " + std::to_string(i));
    }
    const auto sa = standardize_domain(a);
    const auto sb = standardize_domain(b);
    double total = 0.0;
    Eigen::Index rows = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        total += (sa[i] - sb[i]).squaredNorm();
        rows += sa[i].rows();
    }
    return total / static_cast<double>(rows);
}

/// ||T - P_lambda||^2 - ||T - U||^2 with P_lambda the ridge reconstruction of T from U.
inline double f_lambda(const Matrix& t, const Matrix& u, double lambda) {
    require(t.rows() == u.rows() && t.cols() == u.cols(), ErrorKind::DimensionMismatch,
            "f_lambda needs T and U of the same shape");
    const Matrix p = ridge_solve(t, u, lambda).reconstruction;
    return (t - p).squaredNorm() - (t - u).squaredNorm();
}

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
};

inline std::vector<double> default_lambda_grid() { return {1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0}; }

inline std::vector<CurvePoint> f_lambda_curve(const Matrix& t, const Matrix& u, std::span<const double> grid) {
    std::vector<CurvePoint> out;
    for (double l : grid) out.push_back({l, f_lambda(t, u, l)});
    return out;
}

/// Squared residual of T after projection onto the row span of U (the
/// lambda -> 0 limit of ridge reconstruction, defined for rank-deficient U).
inline double span_residual(const Matrix& t, const Matrix& u) {
    require_same_cols(t, u, "span residual");
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(u.transpose());
    const Matrix coef = cod.solve(t.transpose());
    return (t - (u.transpose() * coef).transpose()).squaredNorm();
}

/// Residual of T against the first k rows of `pool` for each k in `sizes`.
/// Prefixes of one pool are nested, so the curve can only go down.
inline std::vector<CurvePoint> nested_pool_residuals(const Matrix& t, const Matrix& pool,
                                                     std::span<const Eigen::Index> sizes) {
    std::vector<CurvePoint> out;
    for (const auto k : sizes) {
        require(k >= 1 && k <= pool.rows(), ErrorKind::InvalidArgument,
                "pool size " + std::to_string(k) + " outside [1, " + std::to_string(pool.rows()) + "]");
        out.push_back({static_cast<double>(k), span_residual(t, pool.topRows(k))});
    }
    return out;
}

struct Prop1Report {
    double source_target = 0.0;     // disc(S, T)
    std::vector<CurvePoint> curve;  // (lambda, disc(P_lambda, T))
    double best_lambda = 0.0;
    double best = 0.0;
    bool holds = false;
};

/// Checks whether some lambda on the grid puts the proxies P_lambda (T
/// reconstructed from U) closer to T than S is.
inline Prop1Report verify_prop1(const Matrix& s, const Matrix& t, const Matrix& u, std::span<const double> grid) {
    require(!grid.empty(), ErrorKind::InvalidArgument, "empty lambda grid");
    Prop1Report r;
    r.source_target = discrepancy(s, t);
    r.best = std::numeric_limits<double>::infinity();
    for (double l : grid) {
        const double d = discrepancy(ridge_solve(t, u, l).reconstruction, t);
        r.curve.push_back({l, d});
        if (d < r.best) {
            r.best = d;
            r.best_lambda = l;
        }
    }
    r.holds = r.best < r.source_target;
    return r;
}

/// Per-sample mean over positions: (count*r x D) -> (count x D).
inline Matrix pooled(const Matrix& rows, Eigen::Index positions) {
    require(positions >= 1 && rows.rows() % positions == 0, ErrorKind::DimensionMismatch,
            "row count is not a multiple of the position count");
    Matrix out(rows.rows() / positions, rows.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = rows.middleRows(i * positions, positions).colwise().mean();
    return out;
}

struct Histogram {
    double lo = 0.0;
    double hi = 2.0;
    std::vector<std::uint64_t> counts;
    double mean = 0.0;

    [[nodiscard]] double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    [[nodiscard]] std::uint64_t total() const {
        std::uint64_t n = 0;
        for (auto c : counts) n += c;
        return n;
    }
};

inline RowVector unit_row(const auto& row) {
    const double n = row.norm();
    return n > 0.0 ? RowVector(row / n) : RowVector(row);
}

/// Distances between unit-normalized rows of randomly drawn cross pairs,
/// binned over [0, 2].
inline Histogram alignment_histogram(const Matrix& a, const Matrix& b, std::size_t pairs, Rng& rng,
                                     std::size_t bins = 20) {
    require_same_cols(a, b, "alignment histogram");
    require(a.rows() >= 1 && b.rows() >= 1, ErrorKind::DimensionMismatch, "alignment histogram of an empty domain");
    require(bins >= 1, ErrorKind::InvalidArgument, "histogram needs at least one bin");
    Histogram h;
    h.counts.assign(bins, 0);
    std::uniform_int_distribution<Eigen::Index> pa(0, a.rows() - 1);
    std::uniform_int_distribution<Eigen::Index> pb(0, b.rows() - 1);
    double sum = 0.0;
    for (std::size_t k = 0; k < pairs; ++k) {
        const Eigen::Index i = pa(rng);
        const Eigen::Index j = pb(rng);
        const double d = (unit_row(a.row(i)) - unit_row(b.row(j))).norm();
        sum += d;
        const auto bin = static_cast<std::size_t>(std::clamp((d - h.lo) / h.bin_width(), 0.0, double(bins - 1)));
        ++h.counts[bin];
    }
    h.mean = pairs ? sum / static_cast<double>(pairs) : 0.0;
    return h;
}

}  // namespace idp
