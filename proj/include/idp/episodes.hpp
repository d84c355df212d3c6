#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "idp/adaptation/finetune.hpp"
#include "idp/embeddings/split.hpp"
#include "idp/numerics/hash.hpp"

namespace idp {

/// N-way K-shot protocol. Fixed shots when shots_min == shots_max, otherwise
/// each episode draws K uniformly from [shots_min, shots_max].
struct EpisodeSpec {
    std::uint32_t ways = 5;
    std::uint32_t shots_min = 5;
    std::uint32_t shots_max = 5;
    std::uint32_t queries = 16;
    std::uint32_t episodes = 600;
    std::uint64_t master_seed = 0;

    void check() const {
        require(ways >= 2, ErrorKind::InvalidArgument, "evaluation needs at least 2 ways");
        require(shots_min >= 1 && shots_min <= shots_max, ErrorKind::InvalidArgument, "invalid shot range");
        require(queries >= 1, ErrorKind::InvalidArgument, "evaluation needs at least 1 query per class");
        require(episodes >= 1, ErrorKind::InvalidArgument, "evaluation needs at least 1 episode");
    }
};

/// Source-side state every episode starts from.
struct SourceModel {
    PrototypeBank bank;
    ProxyPool pool;
    AdapterState adapter;
};

struct EpisodeFailure {
    std::uint32_t episode = 0;
    std::string reason;
};

struct EvalReport {
    std::string tag;
    std::vector<std::optional<double>> accuracies;  // nullopt marks a failed episode
    std::vector<EpisodeFailure> failures;
    double mean = 0.0;
    double half_width = 0.0;
    std::string config_fingerprint;
    double wall_clock_seconds = 0.0;
};

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;
};

/// mean +- 1.96 s / sqrt(n) with the (n - 1) sample deviation; n = 1 gives 0.
inline Interval confidence_interval(std::span<const double> values) {
    require(!values.empty(), ErrorKind::InvalidArgument, "confidence interval of nothing");
    const double n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    Interval out{sum / n, 0.0};
    if (values.size() < 2) return out;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.half_width = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    return out;
}

inline std::string config_fingerprint(const EpisodeSpec& spec, const FinetuneConfig& cfg, std::uint64_t bank_fp,
                                      std::uint64_t pool_fp) {
    Fingerprint fp;
    fp.u64(spec.ways).u64(spec.shots_min).u64(spec.shots_max).u64(spec.queries).u64(spec.episodes).u64(spec.master_seed);
    fp.u64(static_cast<std::uint64_t>(cfg.steps)).f64(cfg.learning_rate).f64(cfg.lambda);
    fp.f64(cfg.weights.target).f64(cfg.weights.proxy).f64(cfg.weights.align);
    fp.u64(static_cast<std::uint64_t>(cfg.prototypes_per_class)).u64(static_cast<std::uint64_t>(cfg.routing));
    fp.u64(cfg.update_stats ? 1 : 0).f64(cfg.init_noise);
    fp.u64(bank_fp).u64(pool_fp);
    return fp.hex();
}

struct EpisodeOutcome {
    double accuracy = 0.0;
    FinetuneResult state;
    Task task;
};

/// Samples, fine-tunes and scores episode `index` of `spec`.
inline EpisodeOutcome run_episode(const FeatureDataset& target, const SourceModel& source, const EpisodeSpec& spec,
                                  const FinetuneConfig& base, std::uint32_t index) {
    Rng rng = make_rng(spec.master_seed, index);
    TaskSampling sampling{spec.ways, spec.shots_min, spec.queries};
    if (spec.shots_max > spec.shots_min) {
        std::uniform_int_distribution<std::uint32_t> k(spec.shots_min, spec.shots_max);
        sampling.shots = k(rng);
    }
    EpisodeOutcome out;
    out.task = split_support_query(target, sampling, rng);
    const FeatureBatch support = gather(target, out.task.support);
    const FeatureBatch query = gather(target, out.task.query);
    FinetuneConfig cfg = base;
    cfg.seed = derive_seed(spec.master_seed, 0xE0000000ULL + index);
    out.state = finetune_episode(support, spec.ways, source.bank, source.pool, source.adapter, cfg);
    out.accuracy = accuracy(predict(query, out.state.bank, out.state.adapter, cfg.lambda), query.labels);
    return out;
}

/// Runs every episode, `workers` at a time. Results are gathered by episode
/// index, so the report does not depend on the worker count.
inline EvalReport run_evaluation(const FeatureDataset& target, const SourceModel& source, const EpisodeSpec& spec,
                                 const FinetuneConfig& cfg, unsigned workers = 1) {
    spec.check();
    require(target.class_count() >= spec.ways, ErrorKind::InsufficientSamples,
            "target has " + std::to_string(target.class_count()) + " classes, episodes need " +
                std::to_string(spec.ways));
    const auto by_class = target.indices_by_class();
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        require(by_class[c].size() >= std::size_t{spec.shots_max} + spec.queries, ErrorKind::InsufficientSamples,
                "class '" + target.labels.names[c] + "' has " + std::to_string(by_class[c].size()) +
                    " records, episodes need " + std::to_string(spec.shots_max + spec.queries));
    }
    require(source.adapter.dim() == target.shape.dim() && source.bank.dim() == target.shape.dim(),
            ErrorKind::DimensionMismatch, "source model and target channel counts differ");

    const auto started = std::chrono::steady_clock::now();
    EvalReport report;
    report.accuracies.assign(spec.episodes, std::nullopt);
    std::vector<std::string> errors(spec.episodes);
    std::atomic<std::uint32_t> next{0};
    auto work = [&] {
        for (std::uint32_t e = next++; e < spec.episodes; e = next++) {
            try {
                report.accuracies[e] = run_episode(target, source, spec, cfg, e).accuracy;
            } catch (const Error& err) {
                if (err.kind() != ErrorKind::DivergedLoss && err.kind() != ErrorKind::SingularSystem) throw;
                errors[e] = err.what();
            }
        }
    };
    workers = std::max(1U, std::min(workers, spec.episodes));
    if (workers == 1) {
        work();
    } else {
        std::vector<std::exception_ptr> thrown(workers);
        {
            std::vector<std::jthread> pool;
            for (unsigned w = 0; w < workers; ++w) {
                pool.emplace_back([&, w] {
                    try {
                        work();
                    } catch (...) {
                        thrown[w] = std::current_exception();
                        next = spec.episodes;
                    }
                });
            }
        }
        for (auto& ex : thrown)
            if (ex) std::rethrow_exception(ex);
    }

    std::vector<double> ok;
    for (std::uint32_t e = 0; e < spec.episodes; ++e) {
        if (report.accuracies[e]) {
            ok.push_back(*report.accuracies[e]);
        } else {
            report.failures.push_back({e, errors[e]});
        }
    }
    if (!ok.empty()) {
        const auto ci = confidence_interval(ok);
        report.mean = ci.mean;
        report.half_width = ci.half_width;
    }
    report.config_fingerprint = config_fingerprint(spec, cfg, source.bank.fingerprint(), source.pool.fingerprint());
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

/// Report as JSON. Wall-clock time is left out so reruns compare byte for byte.
inline nlohmann::ordered_json to_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["tag"] = r.tag;
    j["config_fingerprint"] = r.config_fingerprint;
    j["episodes"] = r.accuracies.size();
    j["mean"] = r.mean;
    j["half_width_95"] = r.half_width;
    auto accs = nlohmann::ordered_json::array();
    for (const auto& a : r.accuracies) accs.push_back(a ? nlohmann::ordered_json(*a) : nlohmann::ordered_json());
    j["accuracies"] = std::move(accs);
    auto fails = nlohmann::ordered_json::array();
    for (const auto& f : r.failures) fails.push_back({{"episode", f.episode}, {"reason", f.reason}});
    j["failures"] = std::move(fails);
    return j;
}

/// "acc ± ci" in percent.
inline std::string summary_line(const EvalReport& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * r.mean, 100.0 * r.half_width);
    return buf;
}

}  // namespace idp
