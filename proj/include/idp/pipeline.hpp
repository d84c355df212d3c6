#pragma once

#include "idp/episodes.hpp"
#include "idp/prototypes/training.hpp"

namespace idp {

struct SourceStageConfig {
    SourceTrainConfig train;
    Eigen::Index pool_size = 64;
    std::size_t adapter_depth = 1;
    double eps = 1e-5;
    double alpha = 10.0;
};

struct SourceStageResult {
    SourceModel model;
    std::vector<double> loss_trace;
    double train_accuracy = 0.0;
};

/// Source stage: seed the adapter from the source statistics, train the source
/// prototypes on adapted features, then cluster them into the proxy pool.
inline SourceStageResult pretrain_source(const FeatureDataset& source, const SourceStageConfig& cfg) {
    validate(source);
    SourceStageResult out;
    FeatureBatch data;
    data.positions = source.shape.positions();
    data.rows = source.stacked_rows();
    for (const auto& rec : source.records) data.labels.push_back(static_cast<int>(rec.label));

    out.model.adapter = seed_adapter(data.rows, cfg.adapter_depth, cfg.eps, cfg.alpha);
    data.rows = adapter_forward(data.rows, out.model.adapter);

    auto trained = train_source_prototypes(data, source.class_count(), cfg.train);
    out.model.bank = std::move(trained.bank);
    out.loss_trace = std::move(trained.loss_trace);
    out.train_accuracy = trained.train_accuracy;
    const auto pool_size = std::min<Eigen::Index>(cfg.pool_size, out.model.bank.stacked().rows());
    out.model.pool = cluster_prototypes(out.model.bank, pool_size, cfg.train.seed);
    return out;
}

}  // namespace idp
