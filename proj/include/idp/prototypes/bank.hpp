#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "idp/embeddings/dataset.hpp"
#include "idp/numerics/hash.hpp"
#include "idp/numerics/rng.hpp"

namespace idp {

/// Learnable dense prototypes: one (m x D) matrix per class.
struct PrototypeBank {
    std::vector<Matrix> classes;

    [[nodiscard]] std::size_t class_count() const noexcept { return classes.size(); }
    [[nodiscard]] Eigen::Index per_class() const noexcept { return classes.empty() ? 0 : classes.front().rows(); }
    [[nodiscard]] Eigen::Index dim() const noexcept { return classes.empty() ? 0 : classes.front().cols(); }

    /// Every prototype vector of every class, (C * m) x D.
    [[nodiscard]] Matrix stacked() const { return vstack(classes); }

    [[nodiscard]] std::uint64_t fingerprint() const {
        Fingerprint fp;
        fp.u64(classes.size());
        for (const auto& c : classes) fp.matrix(c);
        return fp.value();
    }

    void check() const {
        require(!classes.empty(), ErrorKind::EmptyBank, "prototype bank has no classes");
        for (const auto& c : classes) {
            require(c.rows() == per_class() && c.cols() == dim(), ErrorKind::DimensionMismatch,
                    "prototype matrices differ in shape");
            require(c.allFinite(), ErrorKind::NonFiniteFeature, "prototype bank holds non-finite entries");
        }
    }

    friend bool operator==(const PrototypeBank& a, const PrototypeBank& b) {
        if (a.classes.size() != b.classes.size()) return false;
        for (std::size_t i = 0; i < a.classes.size(); ++i) {
            if (a.classes[i].rows() != b.classes[i].rows() || a.classes[i].cols() != b.classes[i].cols()) return false;
            if (a.classes[i] != b.classes[i]) return false;
        }
        return true;
    }
};

/// Clustered source pool; the shared reconstruction vocabulary.
struct ProxyPool {
    Matrix centroids;  // pool_size x D
    std::uint64_t source_fingerprint = 0;
    std::uint64_t seed = 0;

    [[nodiscard]] Eigen::Index size() const noexcept { return centroids.rows(); }
    [[nodiscard]] std::uint64_t fingerprint() const {
        Fingerprint fp;
        fp.matrix(centroids).u64(source_fingerprint).u64(seed);
        return fp.value();
    }
};

/// Entries i.i.d. N(0, 1) / sqrt(D).
inline PrototypeBank init_bank(std::size_t class_count, Eigen::Index dim, Eigen::Index per_class, Rng& rng) {
    require(per_class >= 1, ErrorKind::InvalidArgument, "need at least one prototype per class");
    require(class_count >= 1 && dim >= 1, ErrorKind::InvalidArgument, "bank needs classes and channels");
    std::normal_distribution<double> normal(0.0, 1.0);
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    PrototypeBank bank;
    bank.classes.reserve(class_count);
    for (std::size_t c = 0; c < class_count; ++c) {
        Matrix v(per_class, dim);
        for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = s * normal(rng);
        bank.classes.push_back(std::move(v));
    }
    return bank;
}

}  // namespace idp
