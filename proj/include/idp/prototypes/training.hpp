#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "idp/embeddings/split.hpp"
#include "idp/prototypes/kmeans.hpp"
#include "idp/prototypes/measurement.hpp"

namespace idp {

struct SourceTrainConfig {
    Eigen::Index prototypes_per_class = 20;
    double lambda = 0.1;
    double learning_rate = 0.05;
    int steps = 350;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

struct SourceTrainResult {
    PrototypeBank bank;
    std::vector<double> loss_trace;
    double train_accuracy = 0.0;
};

/// Fraction of maps whose arg-max reconstruction class matches the label.
inline double reconstruction_accuracy(const FeatureBatch& batch, const PrototypeBank& bank, double lambda) {
    if (batch.count() == 0) return 0.0;
    const Matrix logits = ClassProjectors(bank, lambda).logits(batch.rows, batch.positions);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg = 0;
        logits.row(i).maxCoeff(&arg);
        hits += arg == batch.labels[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(batch.count());
}

/// Mini-batch gradient descent on the prototypes under the cross-entropy of the
/// reconstruction classifier. Features are frozen inputs.
inline SourceTrainResult train_source_prototypes(const FeatureBatch& data, std::size_t class_count,
                                                 const SourceTrainConfig& cfg,
                                                 std::optional<PrototypeBank> initial = std::nullopt) {
    require(data.count() >= 1, ErrorKind::EmptyBatch, "source training set is empty");
    require(cfg.batch_size >= 1, ErrorKind::InvalidArgument, "batch size must be positive");
    Rng rng = make_rng(cfg.seed, 0);
    SourceTrainResult out;
    if (initial) {
        out.bank = std::move(*initial);
        require(out.bank.class_count() == class_count, ErrorKind::DimensionMismatch, "initial bank class count");
    } else {
        out.bank = init_bank(class_count, data.rows.cols(), cfg.prototypes_per_class, rng);
    }
    out.bank.check();

    std::vector<std::size_t> order(data.count());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const Eigen::Index r = data.positions;

    for (int step = 0; step < cfg.steps; ++step) {
        const std::size_t take = std::min(cfg.batch_size, order.size());
        std::vector<std::size_t> pick;
        pick.reserve(take);
        while (pick.size() < take) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            pick.push_back(order[cursor++]);
        }
        Matrix rows(static_cast<Eigen::Index>(take) * r, data.rows.cols());
        std::vector<int> labels;
        labels.reserve(take);
        for (std::size_t i = 0; i < take; ++i) {
            rows.middleRows(static_cast<Eigen::Index>(i) * r, r) = data.map(pick[i]);
            labels.push_back(data.labels[pick[i]]);
        }

        ad::Tape tape;
        std::vector<ad::Var> params;
        for (const auto& v : out.bank.classes) params.push_back(tape.parameter(v));
        const auto proj = ad::record_projectors(tape, params, cfg.lambda);
        const auto x = tape.constant(std::move(rows));
        const auto loss = ad::cross_entropy(tape, ad::record_logits(tape, x, proj, r), std::move(labels));
        const double value = tape.scalar(loss);
        require(std::isfinite(value), ErrorKind::DivergedLoss, "source loss became non-finite at step " +
                                                                   std::to_string(step));
        out.loss_trace.push_back(value);
        tape.backward(loss);
        for (std::size_t c = 0; c < params.size(); ++c) out.bank.classes[c] -= cfg.learning_rate * tape.grad(params[c]);
    }
    for (const auto& v : out.bank.classes)
        require(v.allFinite(), ErrorKind::DivergedLoss, "source prototypes became non-finite");
    out.train_accuracy = reconstruction_accuracy(data, out.bank, cfg.lambda);
    return out;
}

/// k-means over every prototype vector of the bank.
inline ProxyPool cluster_prototypes(const PrototypeBank& bank, Eigen::Index pool_size, std::uint64_t seed) {
    require(!bank.classes.empty() && bank.per_class() > 0, ErrorKind::EmptyBank, "cannot cluster an empty bank");
    const Matrix all = bank.stacked();
    require(pool_size >= 1 && pool_size <= all.rows(), ErrorKind::InvalidArgument,
            "pool size " + std::to_string(pool_size) + " exceeds " + std::to_string(all.rows()) + " prototypes");
    Rng rng = make_rng(seed, 0x9001);
    ProxyPool pool;
    pool.centroids = kmeans(all, pool_size, rng).centroids;
    pool.source_fingerprint = bank.fingerprint();
    pool.seed = seed;
    require(pool.centroids.allFinite(), ErrorKind::EmptyBank, "k-means produced non-finite centroids");
    return pool;
}

}  // namespace idp
