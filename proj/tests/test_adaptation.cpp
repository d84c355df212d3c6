#include <gtest/gtest.h>

#include <cmath>

#include "idp/analysis/study.hpp"
#include "toy_episode.hpp"

using namespace idp;
using idp::test::random_matrix;
using idp::test::ToyEpisode;
using Term = ToyEpisode::Term;

TEST(BatchStats, Examples) {
    const auto c = batch_stats(Matrix::Constant(5, 3, 2.5));
    EXPECT_TRUE(c.mean.isApprox(RowVector::Constant(3, 2.5)));
    EXPECT_EQ(c.var.maxCoeff(), 0.0);

    Matrix two(2, 1);
    two << 0.0, 2.0;
    const auto s = batch_stats(two);
    EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(s.var[0], 1.0);

    EXPECT_THROW((void)batch_stats(Matrix(0, 3)), Error);
}

TEST(BatchStats, MatchesTwoPassOracle) {
    Rng rng = make_rng(1, 0);
    const Matrix x = random_matrix(37, 6, rng, 3.0);
    const auto s = batch_stats(x);
    for (Eigen::Index d = 0; d < 6; ++d) {
        double mean = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) mean += x(i, d);
        mean /= 37.0;
        double var = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) var += (x(i, d) - mean) * (x(i, d) - mean);
        var /= 37.0;
        EXPECT_NEAR(s.mean[d], mean, 1e-10);
        EXPECT_NEAR(s.var[d], var, 1e-10);
    }
}

TEST(Momentum, ScheduleValues) {
    EXPECT_EQ(MomentumSchedule::weight_at(10.0, 0), 0.5);
    EXPECT_NEAR(MomentumSchedule::weight_at(10.0, 100), 0.9999546, 1e-7);
    double prev = 0.0;
    for (std::int64_t t = 0; t < 200; ++t) {
        const double g = MomentumSchedule::weight_at(10.0, t);
        EXPECT_GT(g, prev);
        EXPECT_LE(g, 1.0);
        prev = g;
    }
}

TEST(Momentum, FirstStepIsEvenBlend) {
    NormLayerState s{RowVector::Constant(2, 4.0), RowVector::Constant(2, 1.0), RowVector::Ones(2), RowVector::Zero(2)};
    const BatchStats b{RowVector::Constant(2, 2.0), RowVector::Constant(2, 3.0)};
    const auto next = momentum_update(s, b, MomentumSchedule{10.0, 0});
    EXPECT_DOUBLE_EQ(next.mean[0], 3.0);
    EXPECT_DOUBLE_EQ(next.var[1], 2.0);
    const auto late = momentum_update(s, b, MomentumSchedule{10.0, 100});
    EXPECT_NEAR(late.mean[0], 2.0, 2.0 * 1e-4);
}

TEST(Momentum, ConstantStreamMatchesRecurrence) {
    NormLayerState s{RowVector::Constant(3, 5.0), RowVector::Constant(3, 2.0), RowVector::Ones(3), RowVector::Zero(3)};
    const BatchStats b{RowVector::Constant(3, -1.0), RowVector::Constant(3, 0.5)};
    double mu = 5.0;
    for (std::int64_t t = 0; t < 50; ++t) {
        s = momentum_update(s, b, MomentumSchedule{10.0, t});
        const double g = 1.0 / (1.0 + std::exp(-static_cast<double>(t) / 10.0));
        mu = (1.0 - g) * mu + g * -1.0;
        EXPECT_NEAR(s.mean[0], mu, 1e-12);
    }
    EXPECT_NEAR(s.mean[2], -1.0, 1e-3);
}

TEST(Momentum, EnvelopeAndNonnegativeVariance) {
    Rng rng = make_rng(2, 0);
    std::uniform_int_distribution<std::int64_t> step(0, 200);
    NormLayerState s{RowVector::Zero(4), RowVector::Ones(4), RowVector::Ones(4), RowVector::Zero(4)};
    for (int k = 0; k < 10000; ++k) {
        BatchStats b{random_matrix(1, 4, rng, 3.0), random_matrix(1, 4, rng).cwiseAbs()};
        const auto next = momentum_update(s, b, MomentumSchedule{10.0, step(rng)});
        for (Eigen::Index d = 0; d < 4; ++d) {
            EXPECT_GE(next.mean[d], std::min(s.mean[d], b.mean[d]));
            EXPECT_LE(next.mean[d], std::max(s.mean[d], b.mean[d]));
            EXPECT_GE(next.var[d], 0.0);
        }
        s = next;
    }
}

TEST(Adapter, IdentityParameters) {
    Rng rng = make_rng(3, 0);
    AdapterState a;
    a.layers.push_back({RowVector::Zero(5), RowVector::Ones(5), RowVector::Ones(5), RowVector::Zero(5), 1e-12});
    const Matrix x = random_matrix(7, 5, rng);
    EXPECT_LE(max_abs_diff(adapter_forward(x, a), x), 1e-6);
}

TEST(Adapter, ConstantInputAtItsMeanGivesBeta) {
    AdapterState a;
    const RowVector beta = RowVector::LinSpaced(3, -1.0, 1.0);
    a.layers.push_back({RowVector::Constant(3, 2.0), RowVector::Ones(3), RowVector::Constant(3, 4.0), beta, 1e-5});
    const Matrix out = adapter_forward(Matrix::Constant(4, 3, 2.0), a);
    for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LE((out.row(i) - beta).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Adapter, OwnStatsStandardize) {
    Rng rng = make_rng(4, 0);
    const Matrix x = (random_matrix(50, 6, rng, 2.0).rowwise() + RowVector::LinSpaced(6, -3, 3)).eval();
    const auto a = seed_adapter(x, 1, 1e-12, 10.0);
    const auto s = batch_stats(adapter_forward(x, a));
    EXPECT_LE(s.mean.cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LE((s.var.array() - 1.0).abs().maxCoeff(), 1e-6);
}

TEST(Adapter, UpdatingModeBlendsStatistics) {
    Rng rng = make_rng(5, 0);
    auto a = seed_adapter(random_matrix(30, 4, rng), 2, 1e-5, 10.0);
    const auto before = a;
    const Matrix batch = random_matrix(12, 4, rng, 3.0);
    const auto stats = batch_stats(batch);
    (void)adapter_forward(batch, a, AdapterMode::Updating);
    EXPECT_LE(max_abs_diff(a.layers[0].mean, 0.5 * before.layers[0].mean + 0.5 * stats.mean), 1e-12);
    EXPECT_TRUE(a.layers[0].gamma == before.layers[0].gamma);
    EXPECT_FALSE(a.layers[1].mean == before.layers[1].mean);
}

TEST(Adapter, RecordedForwardMatchesDirect) {
    ToyEpisode toy;
    ad::Tape t;
    const auto p = ad::adapter_parameters(t, toy.adapter);
    const auto out = ad::record_adapter(t, t.constant(toy.support.rows), toy.adapter, p);
    EXPECT_LE(max_abs_diff(t.value(out), adapter_forward(toy.support.rows, toy.adapter)), 1e-12);
}

// With affine-only routing the alignment term is deliberately not
// differentiated through the prototypes, so its finite-difference comparison
// covers gamma and beta; full routing checks every parameter.
TEST(Losses, GradientsMatchFiniteDifferences) {
    using Scope = ToyEpisode::Scope;
    const ToyEpisode toy;
    EXPECT_LE(toy.max_rel_error(Term::Target), 1e-4);
    EXPECT_LE(toy.max_rel_error(Term::Proxy), 1e-4);
    EXPECT_LE(toy.max_rel_error(Term::Align, Scope::Affine), 1e-4);
    EXPECT_LE(toy.max_rel_error(Term::Total, Scope::Affine), 1e-4);
    const ToyEpisode routed(AlignRouting::AllParameters);
    EXPECT_LE(routed.max_rel_error(Term::Align), 1e-4);
    EXPECT_LE(routed.max_rel_error(Term::Total), 1e-4);
}

namespace {

struct Recorded {
    double target, proxy, align, total;
    std::vector<Matrix> grads;
};

Recorded record(const ToyEpisode& toy, const FinetuneConfig& cfg, const FrozenTargets& frozen) {
    ad::Tape t;
    std::vector<ad::Var> bank;
    for (const auto& v : toy.bank.classes) bank.push_back(t.parameter(v));
    const auto affine = ad::adapter_parameters(t, toy.adapter);
    const auto l = ad::record_episode_losses(t, toy.support, toy.adapter, affine, bank, frozen, cfg);
    t.backward(l.total);
    Recorded r{t.scalar(l.target), t.scalar(l.proxy), t.scalar(l.align), t.scalar(l.total), {}};
    for (const auto& v : bank) r.grads.push_back(t.grad(v));
    r.grads.push_back(t.grad(affine.gamma[0]));
    r.grads.push_back(t.grad(affine.beta[0]));
    return r;
}

}  // namespace

TEST(Losses, AlignGradientIsMaskedFromPrototypes) {
    const ToyEpisode toy;
    FinetuneConfig cfg = toy.cfg;
    cfg.weights = {0.0, 0.0, 1.0};
    const auto r = record(toy, cfg, toy.frozen);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(max_abs(r.grads[static_cast<std::size_t>(c)]), 0.0);
    EXPECT_GT(max_abs(r.grads[3]), 0.0);

    cfg.routing = AlignRouting::AllParameters;
    EXPECT_GT(max_abs(record(toy, cfg, toy.frozen).grads[0]), 0.0);
}

TEST(Losses, AlignIsZeroAtMatchingDistributionAndNonnegative) {
    const ToyEpisode toy;
    EXPECT_GE(record(toy, toy.cfg, toy.frozen).align, 0.0);
    FrozenTargets same = toy.frozen;
    same.proxy_probs = ClassProjectors(toy.bank, toy.cfg.lambda)
                           .probabilities(adapter_forward(toy.support.rows, toy.adapter), toy.support.positions);
    EXPECT_NEAR(record(toy, toy.cfg, same).align, 0.0, 1e-12);
}

TEST(Losses, WeightedTotal) {
    const ToyEpisode toy;
    FinetuneConfig cfg = toy.cfg;
    const auto all = record(toy, cfg, toy.frozen);
    EXPECT_DOUBLE_EQ(all.total, all.target + all.proxy + all.align);
    cfg.weights = {1.0, 0.0, 0.0};
    const auto only = record(toy, cfg, toy.frozen);
    EXPECT_DOUBLE_EQ(only.total, only.target);
}

TEST(Losses, TargetLossExamples) {
    ToyEpisode toy;
    for (auto& v : toy.bank.classes) v = toy.bank.classes[0];
    EXPECT_NEAR(record(toy, toy.cfg, toy.frozen).target, std::log(3.0), 1e-12);

    ToyEpisode single;
    single.support.labels.assign(6, 0);
    single.bank.classes.resize(1);
    ProxyGenerator gen;
    const auto frozen = freeze_targets(adapter_forward(single.support.rows, single.adapter), single.support.labels, 4,
                                       single.bank, single.pool, single.cfg.lambda, gen);
    const auto r = record(single, single.cfg, frozen);
    EXPECT_DOUBLE_EQ(r.target, 0.0);
    EXPECT_DOUBLE_EQ(r.proxy, 0.0);
}

namespace {

SourceModel toy_source(const ToyEpisode& toy) {
    Rng rng = make_rng(77, 0);
    SourceModel m;
    m.bank = init_bank(4, 8, 3, rng);
    m.pool = cluster_prototypes(m.bank, 10, 5);
    m.adapter = toy.adapter;
    return m;
}

}  // namespace

TEST(Finetune, ZeroStepsLeaveAdapterUnchanged) {
    const ToyEpisode toy;
    const auto src = toy_source(toy);
    FinetuneConfig cfg;
    cfg.steps = 0;
    cfg.prototypes_per_class = 3;
    const auto r = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
    EXPECT_TRUE(r.trace.empty());
    EXPECT_TRUE(r.adapter.layers[0].mean == src.adapter.layers[0].mean);
    EXPECT_TRUE(r.adapter.layers[0].gamma == src.adapter.layers[0].gamma);
    EXPECT_EQ(r.bank.class_count(), 3U);
}

TEST(Finetune, ZeroLearningRateOnlyMovesStatistics) {
    const ToyEpisode toy;
    const auto src = toy_source(toy);
    FinetuneConfig cfg;
    cfg.steps = 5;
    cfg.prototypes_per_class = 3;
    FinetuneConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    const auto moved = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
    const auto still = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, frozen);
    FinetuneConfig none = frozen;
    none.steps = 1;
    const auto initial = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, none);
    EXPECT_FALSE(moved.bank == still.bank);
    EXPECT_TRUE(still.bank == initial.bank) << "target prototypes moved with lr 0";
    EXPECT_TRUE(still.adapter.layers[0].gamma == src.adapter.layers[0].gamma);
    EXPECT_FALSE(still.adapter.layers[0].mean == src.adapter.layers[0].mean);
    EXPECT_EQ(still.trace.size(), 5U);
}

TEST(Finetune, AlignOnlyStepTouchesAffineOnly) {
    const ToyEpisode toy;
    const auto src = toy_source(toy);
    FinetuneConfig cfg;
    cfg.steps = 1;
    cfg.prototypes_per_class = 3;
    cfg.weights = {0.0, 0.0, 1.0};
    cfg.learning_rate = 0.5;
    FinetuneConfig none = cfg;
    none.learning_rate = 0.0;
    const auto source_before = src.bank;
    const auto after = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
    const auto initial = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, none);
    EXPECT_TRUE(after.bank == initial.bank);
    EXPECT_TRUE(src.bank == source_before);
    EXPECT_FALSE(after.adapter.layers[0].gamma == src.adapter.layers[0].gamma);
    EXPECT_FALSE(after.adapter.layers[0].beta == src.adapter.layers[0].beta);
}

TEST(Finetune, DeterministicAndTraced) {
    const ToyEpisode toy;
    const auto src = toy_source(toy);
    FinetuneConfig cfg;
    cfg.steps = 4;
    cfg.prototypes_per_class = 3;
    cfg.seed = 9;
    const auto a = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
    const auto b = finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
    EXPECT_TRUE(a.bank == b.bank);
    ASSERT_EQ(a.trace.size(), 4U);
    EXPECT_DOUBLE_EQ(a.trace[2].momentum, MomentumSchedule::weight_at(10.0, 2));
    EXPECT_NEAR(a.trace[0].total, a.trace[0].target + a.trace[0].proxy + a.trace[0].align, 1e-12);

    std::ostringstream csv;
    write_loss_trace_csv(csv, a.trace);
    const std::string text = csv.str();
    EXPECT_EQ(text.substr(0, 37), "step,L_tar,L_proxy,L_align,L_sum,G_t\n");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

TEST(Finetune, DivergenceRaises) {
    const ToyEpisode toy;
    const auto src = toy_source(toy);
    FinetuneConfig cfg;
    cfg.steps = 30;
    cfg.prototypes_per_class = 3;
    cfg.learning_rate = 1e150;
    try {
        (void)finetune_episode(toy.support, 3, src.bank, src.pool, src.adapter, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_TRUE(e.kind() == ErrorKind::DivergedLoss || e.kind() == ErrorKind::SingularSystem) << e.what();
    }
}

TEST(InitTargetBank, SparseClassesAreResampled) {
    Rng rng = make_rng(6, 0);
    const std::vector<Matrix> rows = {random_matrix(2, 4, rng), random_matrix(10, 4, rng)};
    const auto bank = init_target_bank(rows, 5, 1e-3, rng);
    EXPECT_EQ(bank.per_class(), 5);
    EXPECT_LE((bank.classes[0].row(1) - rows[0].row(1)).cwiseAbs().maxCoeff(), 1e-2);
    EXPECT_THROW((void)init_target_bank(std::vector<Matrix>{Matrix(0, 4)}, 2, 1e-3, rng), Error);
}

TEST(Predict, IdempotentAndNormalized) {
    const ToyEpisode toy;
    const auto before = toy.adapter;
    const Matrix a = predict(toy.support, toy.bank, toy.adapter, 0.1);
    const Matrix b = predict(toy.support, toy.bank, toy.adapter, 0.1);
    EXPECT_TRUE(a == b);
    EXPECT_TRUE(toy.adapter.layers[0].mean == before.layers[0].mean);
    for (Eigen::Index i = 0; i < a.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
}

TEST(Predict, SupportCopyIsRecognized) {
    Rng rng = make_rng(7, 0);
    AdapterState adapter = seed_adapter(random_matrix(40, 9, rng), 1, 1e-5, 10.0);
    FeatureBatch support;
    support.positions = 2;
    support.rows = Matrix::Zero(4, 9);
    support.rows.block(0, 0, 2, 4) = random_matrix(2, 4, rng, 3.0);
    support.rows.block(2, 5, 2, 4) = random_matrix(2, 4, rng, 3.0);
    support.labels = {0, 1};
    const Matrix adapted = adapter_forward(support.rows, adapter);
    PrototypeBank bank{{adapted.topRows(2), adapted.bottomRows(2)}};
    const Matrix p = predict(support, bank, adapter, 0.0);
    EXPECT_EQ(accuracy(p, support.labels), 1.0);
}

// Two-way one-shot pipeline recomputed by hand: explicit normalization, explicit
// inverse and explicit softmax.
TEST(Predict, MatchesHandComputation) {
    Rng rng = make_rng(8, 0);
    const Eigen::Index d = 5, r = 3;
    AdapterState adapter = seed_adapter(random_matrix(20, d, rng), 1, 1e-5, 10.0);
    adapter.layers[0].gamma = (RowVector::Ones(d) + random_matrix(1, d, rng, 0.1)).eval();
    adapter.layers[0].beta = random_matrix(1, d, rng, 0.1);
    PrototypeBank bank = init_bank(2, d, 2, rng);
    FeatureBatch query;
    query.positions = r;
    query.rows = random_matrix(2 * r, d, rng);
    query.labels = {0, 1};
    const double lambda = 0.3;
    const Matrix got = predict(query, bank, adapter, lambda);

    const auto& l = adapter.layers[0];
    for (Eigen::Index q = 0; q < 2; ++q) {
        Matrix f(r, d);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index k = 0; k < d; ++k)
                f(i, k) = l.gamma[k] * (query.rows(q * r + i, k) - l.mean[k]) / std::sqrt(l.var[k] + l.eps) + l.beta[k];
        double e[2];
        for (int c = 0; c < 2; ++c) {
            const Matrix& v = bank.classes[static_cast<std::size_t>(c)];
            const Matrix w = f * v.transpose() * (v * v.transpose() + lambda * Matrix::Identity(2, 2)).inverse();
            e[c] = std::exp(-(w * v - f).squaredNorm() / static_cast<double>(r));
        }
        EXPECT_NEAR(got(q, 0), e[0] / (e[0] + e[1]), 1e-8);
        EXPECT_NEAR(got(q, 1), e[1] / (e[0] + e[1]), 1e-8);
    }
}

namespace {

const Benchmark& shifted() {
    static const Benchmark b = make_benchmark(BenchmarkConfig{});
    return b;
}

}  // namespace

TEST(FinetuneBenchmark, BeatsBaselineOnNinetyOfHundredEpisodes) {
    const BenchmarkConfig cfg;
    const auto& b = shifted();
    FinetuneConfig baseline = cfg.finetune;
    baseline.steps = 0;
    int better = 0;
    for (std::uint32_t e = 0; e < 100; ++e) {
        const double tuned = run_episode(b.target, b.stage.model, cfg.episodes, cfg.finetune, e).accuracy;
        const double base = run_episode(b.target, b.stage.model, cfg.episodes, baseline, e).accuracy;
        better += tuned > base;
    }
    EXPECT_GE(better, 90);
}

TEST(FinetuneBenchmark, AlignmentHarmlessWithoutShift) {
    BenchmarkConfig cfg;
    cfg.magnitude = 0.0;
    const auto b = make_benchmark(cfg);
    FinetuneConfig without = cfg.finetune;
    without.weights.align = 0.0;
    double delta = 0.0;
    for (std::uint32_t e = 0; e < 100; ++e) {
        delta += run_episode(b.target, b.stage.model, cfg.episodes, cfg.finetune, e).accuracy -
                 run_episode(b.target, b.stage.model, cfg.episodes, without, e).accuracy;
    }
    EXPECT_LE(std::abs(delta / 100.0), 0.02);
}
