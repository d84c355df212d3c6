#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "idp/embeddings/dataset.hpp"
#include "idp/numerics/rng.hpp"

namespace idp {

/// How one task is drawn: N classes, K support shots (nullopt = every record
/// not reserved for queries) and Q queries per class.
struct TaskSampling {
    std::uint32_t ways = 5;
    std::optional<std::uint32_t> shots = 5;
    std::uint32_t queries = 16;
};

/// One sampled N-way task. Episode label n refers to dataset class classes[n];
/// support[n] and query[n] hold record indices into the dataset.
struct Task {
    std::vector<std::uint32_t> classes;
    std::vector<std::vector<std::size_t>> support;
    std::vector<std::vector<std::size_t>> query;

    [[nodiscard]] std::size_t ways() const noexcept { return classes.size(); }
    [[nodiscard]] std::size_t support_count() const noexcept {
        std::size_t n = 0;
        for (const auto& s : support) n += s.size();
        return n;
    }
    [[nodiscard]] std::size_t query_count() const noexcept {
        std::size_t n = 0;
        for (const auto& q : query) n += q.size();
        return n;
    }
};

inline Task split_support_query(const FeatureDataset& ds, const TaskSampling& sampling, Rng& rng) {
    require(sampling.ways >= 1, ErrorKind::InvalidArgument, "task needs at least one way");
    require(sampling.ways <= ds.class_count(), ErrorKind::InsufficientSamples,
            "requested " + std::to_string(sampling.ways) + " ways but dataset has " +
                std::to_string(ds.class_count()) + " classes");
    const auto by_class = ds.indices_by_class();

    std::vector<std::uint32_t> pool(ds.class_count());
    std::iota(pool.begin(), pool.end(), 0U);
    std::shuffle(pool.begin(), pool.end(), rng);

    Task task;
    for (std::uint32_t n = 0; n < sampling.ways; ++n) {
        const auto cls = pool[n];
        auto idx = by_class[cls];
        const std::size_t shots = sampling.shots ? *sampling.shots
                                                 : (idx.size() > sampling.queries ? idx.size() - sampling.queries : 0);
        require(shots >= 1 || !sampling.shots, ErrorKind::InvalidArgument, "task needs at least one shot");
        require(idx.size() >= shots + sampling.queries && shots >= 1, ErrorKind::InsufficientSamples,
                "class '" + ds.labels.names[cls] + "' has " + std::to_string(idx.size()) + " records, needs " +
                    std::to_string(shots + sampling.queries));
        std::shuffle(idx.begin(), idx.end(), rng);
        task.classes.push_back(cls);
        task.support.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(shots));
        task.query.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(shots),
                                idx.begin() + static_cast<std::ptrdiff_t>(shots + sampling.queries));
    }
    return task;
}

/// Labeled batch of feature maps stacked as (count * r) x D.
struct FeatureBatch {
    Matrix rows;
    std::vector<int> labels;
    Eigen::Index positions = 1;

    [[nodiscard]] std::size_t count() const noexcept { return labels.size(); }
    [[nodiscard]] Matrix map(std::size_t i) const {
        return rows.middleRows(static_cast<Eigen::Index>(i) * positions, positions);
    }
};

/// Gathers the given record groups, labeling group n with episode label n.
inline FeatureBatch gather(const FeatureDataset& ds, const std::vector<std::vector<std::size_t>>& groups) {
    FeatureBatch b;
    b.positions = ds.shape.positions();
    std::size_t total = 0;
    for (const auto& g : groups) total += g.size();
    b.rows.resize(static_cast<Eigen::Index>(total) * b.positions, ds.shape.dim());
    Eigen::Index at = 0;
    for (std::size_t n = 0; n < groups.size(); ++n) {
        for (auto i : groups[n]) {
            b.rows.middleRows(at, b.positions) = ds.records[i].data;
            b.labels.push_back(static_cast<int>(n));
            at += b.positions;
        }
    }
    return b;
}

}  // namespace idp
