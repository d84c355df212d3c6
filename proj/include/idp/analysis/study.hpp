#pragma once

#include <cstdint>
#include <vector>

#include "idp/analysis/metrics.hpp"
#include "idp/analysis/synth.hpp"
#include "idp/pipeline.hpp"

// Seeded end-to-end studies on synthetic domains.
namespace idp {

struct BenchmarkConfig {
    SynthLayout layout;
    double magnitude = kDefaultShiftMagnitude;
    double noise = kDefaultContentNoise;
    std::uint64_t shift_seed = 7;
    SourceStageConfig source = default_source_stage();
    FinetuneConfig finetune = default_finetune();
    EpisodeSpec episodes = default_episodes();

    static SourceStageConfig default_source_stage() {
        SourceStageConfig s;
        s.train.prototypes_per_class = 4;
        s.train.steps = 200;
        s.train.seed = 3;
        s.pool_size = 48;
        return s;
    }
    static FinetuneConfig default_finetune() {
        FinetuneConfig f;
        f.prototypes_per_class = 4;
        f.learning_rate = 0.1;
        return f;
    }
    static EpisodeSpec default_episodes() {
        EpisodeSpec e;
        e.episodes = 100;
        e.master_seed = 11;
        return e;
    }
};

struct Benchmark {
    FeatureDataset source;
    FeatureDataset target;
    SourceStageResult stage;
    Matrix source_adapted;  // every source row through the source adapter
    Matrix source_pooled;   // one pooled representation per source sample
};

inline Benchmark make_benchmark(const BenchmarkConfig& cfg) {
    Benchmark b;
    const auto shift = ShiftSpec::from_magnitude(cfg.layout.shape.dim(), cfg.magnitude, cfg.noise, cfg.shift_seed);
    std::tie(b.source, b.target) = synth_domains(shift, cfg.layout);
    b.stage = pretrain_source(b.source, cfg.source);
    b.source_adapted = adapter_forward(b.source.stacked_rows(), b.stage.model.adapter);
    b.source_pooled = pooled(b.source_adapted, b.source.shape.positions());
    return b;
}

struct Prop1Setup {
    SynthLayout layout = small_layout();
    double magnitude = kDefaultShiftMagnitude;
    double noise = kDefaultContentNoise;
    Eigen::Index pool_size = 48;
    std::vector<double> grid = default_lambda_grid();

    static SynthLayout small_layout() {
        SynthLayout l;
        l.source_classes = 8;
        l.target_classes = 4;
        l.samples_per_class = 6;
        return l;
    }
};

/// One proxy-closeness instance: content, style and pool all drawn from `seed`;
/// the pool is k-means of the source rows.
inline Prop1Report prop1_instance(const Prop1Setup& setup, std::uint64_t seed) {
    SynthLayout layout = setup.layout;
    layout.content_seed = seed;
    const auto shift = ShiftSpec::from_magnitude(layout.shape.dim(), setup.magnitude, setup.noise, seed);
    const auto [src, tgt] = synth_domains(shift, layout);
    const Matrix s = src.stacked_rows();
    const Matrix t = tgt.stacked_rows();
    Rng rng = make_rng(seed, 0x9002);
    const Matrix u = kmeans(s, std::min(setup.pool_size, s.rows()), rng).centroids;
    return verify_prop1(s, t, u, setup.grid);
}

struct Prop1Sweep {
    std::vector<Prop1Report> runs;
    double pass_rate = 0.0;
};

inline Prop1Sweep prop1_sweep(const Prop1Setup& setup, std::uint32_t seeds, std::uint64_t master) {
    Prop1Sweep out;
    std::uint32_t passed = 0;
    for (std::uint32_t i = 0; i < seeds; ++i) {
        out.runs.push_back(prop1_instance(setup, derive_seed(master, i)));
        passed += out.runs.back().holds ? 1 : 0;
    }
    out.pass_rate = seeds ? static_cast<double>(passed) / seeds : 0.0;
    return out;
}

/// One episode scored with and without the alignment loss.
struct PairedEpisode {
    std::uint32_t episode = 0;
    double acc_with = 0.0;
    double acc_without = 0.0;
    double disc_with = 0.0;  // disc(S, adapted target queries)
    double disc_without = 0.0;
    double dist_with = 0.0;  // mean unit-normalized distance of pooled sample pairs
    double dist_without = 0.0;
};

struct Prop2Report {
    std::vector<PairedEpisode> episodes;
    double mean_delta_acc = 0.0;
    double mean_delta_disc = 0.0;
    double acc_improved = 0.0;   // fraction of episodes
    double disc_reduced = 0.0;
    double dist_reduced = 0.0;
    Histogram hist_with;
    Histogram hist_without;
};

inline void accumulate(Histogram& into, const Histogram& h) {
    if (into.counts.empty()) into.counts.assign(h.counts.size(), 0);
    for (std::size_t k = 0; k < h.counts.size(); ++k) into.counts[k] += h.counts[k];
}

/// Paired comparison of fine-tuning with `cfg` against the same run with the
/// alignment weight zeroed. Both arms share tasks, seeds and histogram pairs.
inline Prop2Report verify_prop2(const Benchmark& b, const EpisodeSpec& spec, const FinetuneConfig& cfg,
                                std::size_t pairs = 2000) {
    FinetuneConfig without = cfg;
    without.weights.align = 0.0;
    Prop2Report out;
    double sum_with = 0.0;
    double sum_without = 0.0;
    std::uint32_t acc_up = 0, disc_down = 0, dist_down = 0;
    for (std::uint32_t e = 0; e < spec.episodes; ++e) {
        PairedEpisode row{e};
        const auto arm = [&](const FinetuneConfig& c, double& acc, double& disc, double& dist) {
            const auto run = run_episode(b.target, b.stage.model, spec, c, e);
            const Matrix query = adapter_forward(gather(b.target, run.task.query).rows, run.state.adapter);
            acc = run.accuracy;
            disc = discrepancy(b.source_adapted, query);
            Rng rng = make_rng(spec.master_seed, 0xF1600000ULL + e);
            const auto h = alignment_histogram(b.source_pooled, pooled(query, b.target.shape.positions()), pairs, rng);
            dist = h.mean;
            return h;
        };
        accumulate(out.hist_with, arm(cfg, row.acc_with, row.disc_with, row.dist_with));
        sum_with += row.dist_with;
        accumulate(out.hist_without, arm(without, row.acc_without, row.disc_without, row.dist_without));
        sum_without += row.dist_without;
        out.mean_delta_acc += row.acc_with - row.acc_without;
        out.mean_delta_disc += row.disc_with - row.disc_without;
        acc_up += row.acc_with > row.acc_without;
        disc_down += row.disc_with < row.disc_without;
        dist_down += row.dist_with < row.dist_without;
        out.episodes.push_back(row);
    }
    const double n = spec.episodes;
    out.mean_delta_acc /= n;
    out.mean_delta_disc /= n;
    out.acc_improved = acc_up / n;
    out.disc_reduced = disc_down / n;
    out.dist_reduced = dist_down / n;
    out.hist_with.mean = sum_with / n;
    out.hist_without.mean = sum_without / n;
    return out;
}

}  // namespace idp
