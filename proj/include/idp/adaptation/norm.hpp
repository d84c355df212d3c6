#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "idp/numerics/autodiff.hpp"

namespace idp {

struct BatchStats {
    RowVector mean;
    RowVector var;
};

/// Normalization layer: running (low-order) statistics plus learnable
/// (high-order) per-channel scale and shift.
struct NormLayerState {
    RowVector mean;
    RowVector var;
    RowVector gamma;
    RowVector beta;
    double eps = 1e-5;

    [[nodiscard]] Eigen::Index dim() const noexcept { return mean.size(); }

    static NormLayerState from_stats(const BatchStats& s, double eps) {
        const auto d = s.mean.size();
        return {s.mean, s.var, RowVector::Ones(d), RowVector::Zero(d), eps};
    }
};

/// Sigmoid momentum G(t) = 1 / (1 + exp(-t / alpha)).
struct MomentumSchedule {
    double alpha = 10.0;
    std::int64_t t = 0;

    [[nodiscard]] static double weight_at(double alpha, std::int64_t step) noexcept {
        return 1.0 / (1.0 + std::exp(-static_cast<double>(step) / alpha));
    }
    [[nodiscard]] double weight() const noexcept { return weight_at(alpha, t); }
};

struct AdapterState {
    std::vector<NormLayerState> layers;
    MomentumSchedule schedule;

    [[nodiscard]] Eigen::Index dim() const noexcept { return layers.empty() ? 0 : layers.front().dim(); }
};

enum class AdapterMode { FrozenStats, Updating };

/// Per-channel mean and population variance over every row.
inline BatchStats batch_stats(const Matrix& rows) {
    require(rows.rows() >= 1, ErrorKind::EmptyBatch, "batch_stats over no rows");
    const double n = static_cast<double>(rows.rows());
    BatchStats s;
    s.mean = rows.colwise().sum() / n;
    s.var = (rows.rowwise() - s.mean).array().square().colwise().sum() / n;
    return s;
}

/// Convex blend of running and batch statistics with weight G(t).
inline NormLayerState momentum_update(const NormLayerState& state, const BatchStats& batch,
                                      const MomentumSchedule& schedule) {
    require(batch.mean.size() == state.dim() && batch.var.size() == state.dim(), ErrorKind::DimensionMismatch,
            "batch statistics channel count");
    const double g = schedule.weight();
    NormLayerState next = state;
    next.mean = (1.0 - g) * state.mean + g * batch.mean;
    next.var = ((1.0 - g) * state.var + g * batch.var).cwiseMax(0.0);
    return next;
}

/// Scale and shift that standardize with the layer's running statistics.
inline std::pair<RowVector, RowVector> standardizer(const NormLayerState& layer) {
    RowVector inv = (layer.var.array() + layer.eps).rsqrt().matrix();
    RowVector shift = -(layer.mean.array() * inv.array()).matrix();
    return {std::move(inv), std::move(shift)};
}

inline Matrix apply_layer(const Matrix& x, const NormLayerState& layer) {
    require(x.cols() == layer.dim(), ErrorKind::DimensionMismatch, "adapter channel count");
    const RowVector a = (layer.var.array() + layer.eps).rsqrt().matrix().cwiseProduct(layer.gamma);
    return ((x.rowwise() - layer.mean).array().rowwise() * a.array()).rowwise() + layer.beta.array();
}

/// gamma * (x - mu) / sqrt(var + eps) + beta through every layer. In Updating
/// mode each layer first blends in the statistics of its own input batch.
inline Matrix adapter_forward(const Matrix& x, AdapterState& state, AdapterMode mode) {
    Matrix out = x;
    for (auto& layer : state.layers) {
        if (mode == AdapterMode::Updating) layer = momentum_update(layer, batch_stats(out), state.schedule);
        out = apply_layer(out, layer);
    }
    return out;
}

inline Matrix adapter_forward(const Matrix& x, const AdapterState& state) {
    Matrix out = x;
    for (const auto& layer : state.layers) out = apply_layer(out, layer);
    return out;
}

/// Adapter whose layer statistics come from a full pass over `rows`.
inline AdapterState seed_adapter(const Matrix& rows, std::size_t depth, double eps, double alpha) {
    require(depth >= 1, ErrorKind::InvalidArgument, "adapter depth must be at least 1");
    AdapterState s;
    s.schedule.alpha = alpha;
    Matrix cur = rows;
    for (std::size_t i = 0; i < depth; ++i) {
        s.layers.push_back(NormLayerState::from_stats(batch_stats(cur), eps));
        cur = apply_layer(cur, s.layers.back());
    }
    return s;
}

namespace ad {

struct AdapterParams {
    std::vector<Var> gamma;
    std::vector<Var> beta;
};

inline AdapterParams adapter_parameters(Tape& t, const AdapterState& s, bool trainable = true) {
    AdapterParams p;
    for (const auto& layer : s.layers) {
        p.gamma.push_back(trainable ? t.parameter(layer.gamma) : t.constant(layer.gamma));
        p.beta.push_back(trainable ? t.parameter(layer.beta) : t.constant(layer.beta));
    }
    return p;
}

/// Recorded adapter forward with frozen statistics; gradients reach x, gamma
/// and beta but never the running statistics.
inline Var record_adapter(Tape& t, Var x, const AdapterState& s, const AdapterParams& p) {
    Var out = x;
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
        auto [inv, shift] = standardizer(s.layers[i]);
        out = channel_affine(t, out, t.constant(std::move(inv)), t.constant(std::move(shift)));
        out = channel_affine(t, out, p.gamma[i], p.beta[i]);
    }
    return out;
}

}  // namespace ad
}  // namespace idp
