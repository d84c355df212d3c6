#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "idp/embeddings/dataset.hpp"
#include "idp/numerics/matrix.hpp"
#include "idp/numerics/rng.hpp"

namespace idp::test {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
    return m;
}

/// Ridge mapping by CGLS on the stacked system [C^T; sqrt(lambda) I] w = [t; 0],
/// one target row at a time. Touches C only through products.
inline Matrix cgls_ridge(const Matrix& t, const Matrix& c, double lambda, int max_iter = 500) {
    const auto n = c.rows();
    const double s = std::sqrt(lambda);
    Matrix w(t.rows(), n);
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd r1 = t.row(i).transpose();   // residual, data block
        Eigen::VectorXd r2 = Eigen::VectorXd::Zero(n);  // residual, ridge block
        Eigen::VectorXd g = c * r1 + s * r2;
        Eigen::VectorXd p = g;
        double gg = g.squaredNorm();
        const double stop = 1e-26 * gg;
        for (int it = 0; it < max_iter && gg > stop; ++it) {
            const Eigen::VectorXd q1 = c.transpose() * p;
            const Eigen::VectorXd q2 = s * p;
            const double alpha = gg / (q1.squaredNorm() + q2.squaredNorm());
            x += alpha * p;
            r1 -= alpha * q1;
            r2 -= alpha * q2;
            g = c * r1 + s * r2;
            const double next = g.squaredNorm();
            p = g + (next / gg) * p;
            gg = next;
        }
        w.row(i) = x.transpose();
    }
    return w;
}

/// Ridge mapping by plain gradient descent on ||T - W C||^2 + lambda ||W||^2.
inline Matrix gd_ridge(const Matrix& t, const Matrix& c, double lambda, int iters = 200000) {
    const Eigen::JacobiSVD<Matrix> svd(c);
    const double top = svd.singularValues()(0);
    const double step = 1.0 / (2.0 * (top * top + lambda));
    Matrix w = Matrix::Zero(t.rows(), c.rows());
    for (int it = 0; it < iters; ++it) {
        const Matrix g = 2.0 * (w * c - t) * c.transpose() + 2.0 * lambda * w;
        w -= step * g;
        if (g.cwiseAbs().maxCoeff() < 1e-13) break;
    }
    return w;
}

/// Gaussian class clusters: each class has its own mean row pattern.
inline FeatureDataset blob_dataset(std::uint32_t classes, std::uint32_t samples, FeatureShape shape, double separation,
                                   std::uint64_t seed, DomainRole role = DomainRole::Target) {
    Rng rng = make_rng(seed, 0);
    FeatureDataset ds;
    ds.shape = shape;
    ds.labels.role = role;
    const auto r = shape.positions();
    const auto d = shape.dim();
    for (std::uint32_t c = 0; c < classes; ++c) {
        ds.labels.names.push_back("class_" + std::to_string(c));
        const Matrix centre = random_matrix(r, d, rng, separation);
        for (std::uint32_t j = 0; j < samples; ++j)
            ds.records.push_back({std::uint64_t{c} * samples + j, c, centre + random_matrix(r, d, rng, 1.0)});
    }
    return ds;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("idp_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace idp::test
