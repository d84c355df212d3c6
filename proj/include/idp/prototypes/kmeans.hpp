#pragma once

#include <limits>
#include <random>
#include <vector>

#include "idp/numerics/matrix.hpp"
#include "idp/numerics/rng.hpp"

namespace idp {

struct KMeansOptions {
    int max_iterations = 100;
    double tolerance = 1e-6;  // stop once no centroid moves farther than this
};

struct KMeansResult {
    Matrix centroids;
    std::vector<Eigen::Index> assignment;
    /// Sum of squared distances to the assigned centroid after each assignment step.
    std::vector<double> objective;
    int iterations = 0;
};

namespace detail {

inline Eigen::Index nearest(const Matrix& centroids, const auto& point, double& dist) {
    Eigen::Index best = 0;
    dist = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
        const double d = (centroids.row(k) - point).squaredNorm();
        if (d < dist) {
            dist = d;
            best = k;
        }
    }
    return best;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded from
/// the point farthest from its current centroid.
inline KMeansResult kmeans(const Matrix& points, Eigen::Index k, Rng& rng, const KMeansOptions& opts = {}) {
    const Eigen::Index n = points.rows();
    require(n >= 1, ErrorKind::EmptyBank, "k-means over no points");
    require(k >= 1 && k <= n, ErrorKind::InvalidArgument,
            "k-means cluster count " + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");

    KMeansResult res;
    res.centroids.resize(k, points.cols());

    // k-means++ seeding
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    res.centroids.row(0) = points.row(first(rng));
    Vector d2(n);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - res.centroids.row(0)).squaredNorm();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Eigen::Index c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = n - 1;
        if (total > 0.0) {
            double u = unit(rng) * total;
            for (Eigen::Index i = 0; i < n; ++i) {
                u -= d2[i];
                if (u < 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);
        }
        res.centroids.row(c) = points.row(pick);
        for (Eigen::Index i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], (points.row(i) - res.centroids.row(c)).squaredNorm());
    }

    res.assignment.assign(static_cast<std::size_t>(n), 0);
    Vector dist(n);
    for (int it = 0; it < opts.max_iterations; ++it) {
        double objective = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            res.assignment[static_cast<std::size_t>(i)] = detail::nearest(res.centroids, points.row(i), dist[i]);
            objective += dist[i];
        }
        res.objective.push_back(objective);

        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto a = res.assignment[static_cast<std::size_t>(i)];
            sums.row(a) += points.row(i);
            ++counts[static_cast<std::size_t>(a)];
        }
        Matrix next = res.centroids;
        for (Eigen::Index c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                next.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
                continue;
            }
            Eigen::Index far = 0;
            dist.maxCoeff(&far);
            next.row(c) = points.row(far);
            dist[far] = 0.0;
        }
        const double shift = (next - res.centroids).rowwise().norm().maxCoeff();
        res.centroids = std::move(next);
        res.iterations = it + 1;
        if (shift < opts.tolerance) break;
    }
    return res;
}

}  // namespace idp
