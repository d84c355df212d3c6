#pragma once

#include <ostream>
#include <random>
#include <vector>

#include "idp/adaptation/norm.hpp"
#include "idp/embeddings/split.hpp"
#include "idp/proxies.hpp"

namespace idp {

struct LossWeights {
    double target = 1.0;
    double proxy = 1.0;
    double align = 1.0;
};

/// Which parameters the alignment loss may update.
enum class AlignRouting {
    AffineOnly,     // gamma and beta
    AllParameters,  // gamma, beta and the target prototypes
};

struct FinetuneConfig {
    int steps = 50;
    double learning_rate = 0.01;
    double lambda = 0.1;
    LossWeights weights;
    Eigen::Index prototypes_per_class = 20;
    AlignRouting routing = AlignRouting::AffineOnly;
    bool update_stats = true;
    double init_noise = 1e-3;
    std::uint64_t seed = 0;
};

struct LossTraceRow {
    int step = 0;
    double target = 0.0;
    double proxy = 0.0;
    double align = 0.0;
    double total = 0.0;
    double momentum = 0.0;
};

/// Quantities the losses treat as constants: the proxies and the class
/// distributions they induce, both evaluated at the current parameter values.
struct FrozenTargets {
    ProxySet proxies;
    Matrix aligned_proxies;  // proxy map of every support sample, support order
    Matrix proxy_probs;      // (samples x N)
};

inline std::vector<Matrix> rows_by_class(const Matrix& rows, std::span<const int> labels, Eigen::Index positions,
                                         std::size_t classes) {
    std::vector<std::vector<Eigen::Index>> members(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes, ErrorKind::InvalidArgument,
                "support label out of range");
        members[static_cast<std::size_t>(labels[i])].push_back(static_cast<Eigen::Index>(i));
    }
    std::vector<Matrix> out;
    out.reserve(classes);
    for (const auto& m : members) {
        Matrix block(static_cast<Eigen::Index>(m.size()) * positions, rows.cols());
        for (std::size_t k = 0; k < m.size(); ++k)
            block.middleRows(static_cast<Eigen::Index>(k) * positions, positions) =
                rows.middleRows(m[k] * positions, positions);
        out.push_back(std::move(block));
    }
    return out;
}

inline FrozenTargets freeze_targets(const Matrix& adapted_support, std::span<const int> labels, Eigen::Index positions,
                                    const PrototypeBank& target_bank, const ProxyPool& pool, double lambda,
                                    ProxyGenerator& generator) {
    FrozenTargets f;
    const auto by_class = rows_by_class(adapted_support, labels, positions, target_bank.class_count());
    f.proxies = generator.generate(by_class, pool, lambda);
    f.aligned_proxies.resize(adapted_support.rows(), adapted_support.cols());
    std::vector<Eigen::Index> seen(target_bank.class_count(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        f.aligned_proxies.middleRows(static_cast<Eigen::Index>(i) * positions, positions) =
            f.proxies.classes[c].middleRows(seen[c]++ * positions, positions);
    }
    f.proxy_probs = ClassProjectors(target_bank, lambda).probabilities(f.aligned_proxies, positions);
    return f;
}

namespace ad {

struct EpisodeLosses {
    Var target;
    Var proxy;
    Var align;
    Var total;
};

/// Records every fine-tuning loss on raw support features. L_tar and L_proxy
/// reach the prototypes and the affine parameters; L_align reaches the affine
/// parameters only unless routing says otherwise.
inline EpisodeLosses record_episode_losses(Tape& t, const FeatureBatch& support, const AdapterState& adapter,
                                           const AdapterParams& affine, std::span<const Var> bank,
                                           const FrozenTargets& frozen, const FinetuneConfig& cfg) {
    const Eigen::Index r = support.positions;
    const Var raw = t.constant(support.rows);
    const Var adapted = record_adapter(t, raw, adapter, affine);
    const auto projectors = record_projectors(t, bank, cfg.lambda);

    EpisodeLosses out;
    out.target = cross_entropy(t, record_logits(t, adapted, projectors, r), support.labels);
    out.proxy = proxy_loss(t, frozen.proxies, projectors, r);

    std::vector<Var> align_proj;
    if (cfg.routing == AlignRouting::AllParameters) {
        align_proj = projectors;
    } else {
        for (const auto& h : projectors) align_proj.push_back(stop_gradient(t, h));
    }
    out.align = kl_to_target(t, frozen.proxy_probs, record_logits(t, adapted, align_proj, r));

    const Var terms[] = {out.target, out.proxy, out.align};
    const double w[] = {cfg.weights.target, cfg.weights.proxy, cfg.weights.align};
    out.total = weighted_sum(t, terms, w);
    return out;
}

}  // namespace ad

/// Initial target prototypes: k-means of each class's adapted support rows, or
/// rows resampled with small noise when a class has fewer rows than prototypes.
inline PrototypeBank init_target_bank(std::span<const Matrix> rows_per_class, Eigen::Index per_class, double noise,
                                      Rng& rng) {
    PrototypeBank bank;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& rows : rows_per_class) {
        require(rows.rows() >= 1, ErrorKind::InsufficientSamples, "class without support rows");
        if (rows.rows() >= per_class) {
            bank.classes.push_back(kmeans(rows, per_class, rng).centroids);
            continue;
        }
        std::uniform_int_distribution<Eigen::Index> pick(0, rows.rows() - 1);
        Matrix v(per_class, rows.cols());
        for (Eigen::Index k = 0; k < per_class; ++k) {
            v.row(k) = k < rows.rows() ? rows.row(k) : rows.row(pick(rng));
            for (Eigen::Index d = 0; d < v.cols(); ++d) v(k, d) += noise * normal(rng);
        }
        bank.classes.push_back(std::move(v));
    }
    return bank;
}

struct FinetuneResult {
    PrototypeBank bank;
    AdapterState adapter;
    std::vector<LossTraceRow> trace;
};

/// Gradient descent on the weighted sum of L_tar, L_proxy and L_align over one
/// episode's support set, updating target prototypes and affine parameters.
/// Running statistics follow the momentum schedule and never see gradients.
inline FinetuneResult finetune_episode(const FeatureBatch& support, std::size_t ways, const PrototypeBank& source_bank,
                                       ProxyPool pool, const AdapterState& source_adapter, const FinetuneConfig& cfg) {
    require(support.count() >= 1, ErrorKind::InsufficientSamples, "episode has no support samples");
    require(cfg.steps >= 0, ErrorKind::InvalidArgument, "negative step count");
    if (pool.source_fingerprint != source_bank.fingerprint()) pool = refresh_pool(source_bank, pool);

    Rng rng = make_rng(cfg.seed, 0x7A6E7);
    FinetuneResult out;
    out.adapter = source_adapter;
    const Eigen::Index r = support.positions;
    {
        // Prototypes start in the frame the running statistics converge to.
        AdapterState frame = out.adapter;
        if (cfg.steps > 0 && cfg.update_stats) {
            Matrix cur = support.rows;
            for (auto& layer : frame.layers) {
                const auto s = batch_stats(cur);
                layer.mean = s.mean;
                layer.var = s.var;
                cur = apply_layer(cur, layer);
            }
        }
        const Matrix adapted = adapter_forward(support.rows, frame);
        const auto groups = rows_by_class(adapted, support.labels, r, ways);
        out.bank = init_target_bank(groups, cfg.prototypes_per_class, cfg.init_noise, rng);
    }

    ProxyGenerator generator;
    for (int step = 0; step < cfg.steps; ++step) {
        out.adapter.schedule.t = step;
        if (cfg.update_stats) adapter_forward(support.rows, out.adapter, AdapterMode::Updating);

        const Matrix adapted = adapter_forward(support.rows, out.adapter);
        const FrozenTargets frozen =
            freeze_targets(adapted, support.labels, r, out.bank, pool, cfg.lambda, generator);

        ad::Tape tape;
        std::vector<ad::Var> bank;
        for (const auto& v : out.bank.classes) bank.push_back(tape.parameter(v));
        const auto affine = ad::adapter_parameters(tape, out.adapter);
        const auto losses = ad::record_episode_losses(tape, support, out.adapter, affine, bank, frozen, cfg);

        LossTraceRow row{step,
                         tape.scalar(losses.target),
                         tape.scalar(losses.proxy),
                         tape.scalar(losses.align),
                         tape.scalar(losses.total),
                         out.adapter.schedule.weight()};
        require(std::isfinite(row.total), ErrorKind::DivergedLoss,
                "fine-tuning loss became non-finite at step " + std::to_string(step));
        out.trace.push_back(row);

        tape.backward(losses.total);
        for (std::size_t c = 0; c < bank.size(); ++c) out.bank.classes[c] -= cfg.learning_rate * tape.grad(bank[c]);
        for (std::size_t l = 0; l < out.adapter.layers.size(); ++l) {
            out.adapter.layers[l].gamma -= cfg.learning_rate * tape.grad(affine.gamma[l]);
            out.adapter.layers[l].beta -= cfg.learning_rate * tape.grad(affine.beta[l]);
        }
    }
    out.adapter.schedule.t = cfg.steps;
    return out;
}

/// Per-query class probabilities under frozen adapter statistics.
inline Matrix predict(const FeatureBatch& query, const PrototypeBank& target_bank, const AdapterState& adapter,
                      double lambda) {
    if (query.count() == 0) return Matrix(0, static_cast<Eigen::Index>(target_bank.class_count()));
    return ClassProjectors(target_bank, lambda).probabilities(adapter_forward(query.rows, adapter), query.positions);
}

inline double accuracy(const Matrix& probs, std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        Eigen::Index arg = 0;
        probs.row(i).maxCoeff(&arg);
        hits += arg == labels[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline void write_loss_trace_csv(std::ostream& os, std::span<const LossTraceRow> trace) {
    os << "step,L_tar,L_proxy,L_align,L_sum,G_t\n";
    os.precision(17);
    for (const auto& r : trace)
        os << r.step << ',' << r.target << ',' << r.proxy << ',' << r.align << ',' << r.total << ',' << r.momentum
           << '\n';
}

}  // namespace idp
