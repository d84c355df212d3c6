#pragma once

#include <optional>
#include <vector>

#include "idp/numerics/autodiff.hpp"
#include "idp/prototypes/measurement.hpp"
#include "idp/prototypes/training.hpp"

namespace idp {

/// Intermediate-domain proxies: each class's support rows re-expressed with
/// the pool as reconstruction basis. Immutable once built.
struct ProxySet {
    std::vector<Matrix> classes;  // (K_i * r) x D each
    std::uint64_t pool_fingerprint = 0;
    double lambda = 0.0;

    [[nodiscard]] std::size_t class_count() const noexcept { return classes.size(); }
};

/// Ridge reconstruction from a fixed pool, with the pool factorization cached
/// until the pool fingerprint changes.
class ProxyGenerator {
public:
    ProxySet generate(std::span<const Matrix> support_by_class, const ProxyPool& pool, double lambda) {
        const auto fp = pool.fingerprint();
        if (!factor_ || cached_fp_ != fp || factor_->lambda() != lambda) {
            require(pool.size() >= 1, ErrorKind::EmptyBank, "proxy pool is empty");
            factor_.emplace(pool.centroids, lambda);
            cached_fp_ = fp;
        }
        ProxySet out;
        out.pool_fingerprint = fp;
        out.lambda = lambda;
        out.classes.reserve(support_by_class.size());
        for (const auto& t : support_by_class) {
            require_same_cols(t, pool.centroids, "support rows vs pool");
            out.classes.push_back(factor_->mapping(t) * pool.centroids);
        }
        return out;
    }

private:
    std::optional<RidgeFactor> factor_;
    std::uint64_t cached_fp_ = 0;
};

/// P_i = T_i U^T (U U^T + lambda I)^{-1} U for every class i independently.
inline ProxySet generate_proxies(std::span<const Matrix> support_by_class, const ProxyPool& pool, double lambda) {
    require(lambda >= 0.0, ErrorKind::InvalidArgument, "lambda must be nonnegative");
    return ProxyGenerator{}.generate(support_by_class, pool, lambda);
}

/// Re-clusters an updated source bank with the pool's seed and size.
inline ProxyPool refresh_pool(const PrototypeBank& bank, const ProxyPool& previous) {
    require(!bank.classes.empty(), ErrorKind::EmptyBank, "cannot refresh from an empty bank");
    require(bank.dim() == previous.centroids.cols(), ErrorKind::DimensionMismatch,
            "bank channel count differs from the pool's");
    return cluster_prototypes(bank, previous.size(), previous.seed);
}

/// Proxy maps of every class stacked, labeled by class index.
inline FeatureBatch proxy_batch(const ProxySet& proxies, Eigen::Index positions) {
    FeatureBatch b;
    b.positions = positions;
    b.rows = vstack(proxies.classes);
    for (std::size_t c = 0; c < proxies.classes.size(); ++c) {
        require(proxies.classes[c].rows() % positions == 0, ErrorKind::DimensionMismatch,
                "proxy rows are not a whole number of maps");
        b.labels.insert(b.labels.end(), static_cast<std::size_t>(proxies.classes[c].rows() / positions),
                        static_cast<int>(c));
    }
    return b;
}

namespace ad {

/// Mean cross-entropy of the target prototypes' reconstruction classifier on
/// the proxy maps. Proxies enter as constants.
inline Var proxy_loss(Tape& t, const ProxySet& proxies, std::span<const Var> target_projectors,
                      Eigen::Index positions) {
    FeatureBatch b = proxy_batch(proxies, positions);
    const Var x = t.constant(std::move(b.rows));
    return cross_entropy(t, record_logits(t, x, target_projectors, positions), std::move(b.labels));
}

}  // namespace ad
}  // namespace idp
