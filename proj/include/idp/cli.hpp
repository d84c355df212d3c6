#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "idp/analysis/study.hpp"
#include "idp/artifacts.hpp"

// Command-line driver: ingest, pretrain, eval, analyze, synth.
namespace idp::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kConfig = 1, kDiverged = 2, kInsufficient = 3 };

inline int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::DivergedLoss:
        case ErrorKind::SingularSystem:
        case ErrorKind::NonFiniteGradient:
            return kDiverged;
        case ErrorKind::InsufficientSamples:
        case ErrorKind::EmptyBatch:
        case ErrorKind::EmptyBank:
            return kInsufficient;
        default:
            return kConfig;
    }
}

struct SynthSection {
    SynthLayout layout;
    double magnitude = kDefaultShiftMagnitude;
    double noise = kDefaultContentNoise;
    std::uint64_t shift_seed = 7;
};

struct AnalysisSection {
    std::uint32_t prop1_seeds = 1000;
    std::uint32_t prop2_episodes = 50;
    std::size_t pairs = 2000;
    std::size_t bins = 20;
    std::vector<Eigen::Index> pool_sizes{1, 5, 20, 50};
};

struct RunConfig {
    struct Paths {
        std::string source;
        std::string target;
        std::string model;  // defaults to <out>/model.idpm
        std::string out = "out";
    } paths;
    double lambda = 0.1;
    SourceStageConfig source;
    FinetuneConfig finetune;
    EpisodeSpec episodes;
    std::uint64_t seed = 0;
    unsigned workers = 0;  // 0: available parallelism
    SynthSection synth;
    AnalysisSection analysis;

    [[nodiscard]] fs::path model_path() const {
        return paths.model.empty() ? fs::path(paths.out) / "model.idpm" : fs::path(paths.model);
    }
    [[nodiscard]] unsigned worker_count() const {
        return workers ? workers : std::max(1U, std::thread::hardware_concurrency());
    }

    /// Pushes the shared fields (lambda, seed) into the stage configs.
    void sync() {
        source.train.lambda = lambda;
        finetune.lambda = lambda;
        source.train.seed = seed;
        episodes.master_seed = seed;
    }

    void check() const {
        const auto bad = [](const std::string& what) { fail(ErrorKind::ConfigError, what); };
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) bad("lambda must be finite and >= 0");
        if (source.train.prototypes_per_class < 1) bad("source.prototypes_per_class must be >= 1");
        if (!(source.train.learning_rate > 0.0)) bad("source.learning_rate must be > 0");
        if (source.train.steps < 0) bad("source.steps must be >= 0");
        if (source.train.batch_size < 1) bad("source.batch_size must be >= 1");
        if (source.pool_size < 1) bad("source.pool_size must be >= 1");
        if (source.adapter_depth < 1) bad("source.adapter_depth must be >= 1");
        if (!(source.alpha > 0.0)) bad("source.alpha must be > 0");
        if (!(source.eps > 0.0)) bad("source.eps must be > 0");
        if (finetune.prototypes_per_class < 1) bad("finetune.prototypes_per_class must be >= 1");
        if (!(finetune.learning_rate > 0.0)) bad("finetune.learning_rate must be > 0");
        if (finetune.steps < 0) bad("finetune.steps must be >= 0");
        for (double w : {finetune.weights.target, finetune.weights.proxy, finetune.weights.align})
            if (!(w >= 0.0) || !std::isfinite(w)) bad("loss weights must be finite and >= 0");
        if (!(finetune.init_noise >= 0.0)) bad("finetune.init_noise must be >= 0");
        try {
            episodes.check();
        } catch (const Error& e) {
            bad(std::string("episodes: ") + e.what());
        }
        if (!(synth.magnitude >= 0.0)) bad("synth.magnitude must be >= 0");
        if (!(synth.noise >= 0.0)) bad("synth.noise must be >= 0");
        if (analysis.prop1_seeds < 1 || analysis.prop2_episodes < 1) bad("analysis counts must be >= 1");
        if (analysis.bins < 1) bad("analysis.bins must be >= 1");
        if (analysis.pool_sizes.empty()) bad("analysis.pool_sizes is empty");
    }
};

namespace detail {

/// Reads a TOML table into `cfg`, rejecting unknown keys.
class TomlReader {
public:
    explicit TomlReader(const toml::table& root) : root_(root) {}

    void read(RunConfig& c) {
        scalar(root_, "", "seed", c.seed);
        scalar(root_, "", "workers", c.workers);
        scalar(root_, "", "lambda", c.lambda);
        known("", {"seed", "workers", "lambda", "paths", "source", "finetune", "episodes", "synth", "analysis"});

        if (const auto* t = table("paths")) {
            scalar(*t, "paths", "source", c.paths.source);
            scalar(*t, "paths", "target", c.paths.target);
            scalar(*t, "paths", "model", c.paths.model);
            scalar(*t, "paths", "out", c.paths.out);
            known("paths", {"source", "target", "model", "out"});
        }
        if (const auto* t = table("source")) {
            scalar(*t, "source", "prototypes_per_class", c.source.train.prototypes_per_class);
            scalar(*t, "source", "learning_rate", c.source.train.learning_rate);
            scalar(*t, "source", "steps", c.source.train.steps);
            scalar(*t, "source", "batch_size", c.source.train.batch_size);
            scalar(*t, "source", "pool_size", c.source.pool_size);
            scalar(*t, "source", "adapter_depth", c.source.adapter_depth);
            scalar(*t, "source", "alpha", c.source.alpha);
            scalar(*t, "source", "eps", c.source.eps);
            known("source", {"prototypes_per_class", "learning_rate", "steps", "batch_size", "pool_size",
                             "adapter_depth", "alpha", "eps"});
        }
        if (const auto* t = table("finetune")) {
            scalar(*t, "finetune", "prototypes_per_class", c.finetune.prototypes_per_class);
            scalar(*t, "finetune", "learning_rate", c.finetune.learning_rate);
            scalar(*t, "finetune", "steps", c.finetune.steps);
            scalar(*t, "finetune", "w_target", c.finetune.weights.target);
            scalar(*t, "finetune", "w_proxy", c.finetune.weights.proxy);
            scalar(*t, "finetune", "w_align", c.finetune.weights.align);
            scalar(*t, "finetune", "update_stats", c.finetune.update_stats);
            scalar(*t, "finetune", "init_noise", c.finetune.init_noise);
            std::string routing;
            if (scalar(*t, "finetune", "routing", routing)) c.finetune.routing = parse_routing(routing);
            known("finetune", {"prototypes_per_class", "learning_rate", "steps", "w_target", "w_proxy", "w_align",
                               "update_stats", "init_noise", "routing"});
        }
        if (const auto* t = table("episodes")) {
            std::uint32_t shots = 0;
            if (scalar(*t, "episodes", "shots", shots)) c.episodes.shots_min = c.episodes.shots_max = shots;
            scalar(*t, "episodes", "shots_min", c.episodes.shots_min);
            scalar(*t, "episodes", "shots_max", c.episodes.shots_max);
            scalar(*t, "episodes", "ways", c.episodes.ways);
            scalar(*t, "episodes", "queries", c.episodes.queries);
            scalar(*t, "episodes", "count", c.episodes.episodes);
            known("episodes", {"shots", "shots_min", "shots_max", "ways", "queries", "count"});
        }
        if (const auto* t = table("synth")) {
            auto& l = c.synth.layout;
            scalar(*t, "synth", "magnitude", c.synth.magnitude);
            scalar(*t, "synth", "noise", c.synth.noise);
            scalar(*t, "synth", "shift_seed", c.synth.shift_seed);
            scalar(*t, "synth", "content_seed", l.content_seed);
            scalar(*t, "synth", "source_classes", l.source_classes);
            scalar(*t, "synth", "target_classes", l.target_classes);
            scalar(*t, "synth", "samples_per_class", l.samples_per_class);
            scalar(*t, "synth", "width", l.shape.width);
            scalar(*t, "synth", "height", l.shape.height);
            scalar(*t, "synth", "channels", l.shape.channels);
            scalar(*t, "synth", "content_rank", l.content_rank);
            scalar(*t, "synth", "vocabulary", l.vocabulary);
            scalar(*t, "synth", "parts_per_class", l.parts_per_class);
            scalar(*t, "synth", "part_norm", l.part_norm);
            scalar(*t, "synth", "within_class_spread", l.within_class_spread);
            scalar(*t, "synth", "base_noise", l.base_noise);
            scalar(*t, "synth", "novel_target_classes", l.novel_target_classes);
            known("synth", {"magnitude", "noise", "shift_seed", "content_seed", "source_classes", "target_classes",
                            "samples_per_class", "width", "height", "channels", "content_rank", "vocabulary",
                            "parts_per_class", "part_norm", "within_class_spread", "base_noise",
                            "novel_target_classes"});
        }
        if (const auto* t = table("analysis")) {
            scalar(*t, "analysis", "prop1_seeds", c.analysis.prop1_seeds);
            scalar(*t, "analysis", "prop2_episodes", c.analysis.prop2_episodes);
            scalar(*t, "analysis", "pairs", c.analysis.pairs);
            scalar(*t, "analysis", "bins", c.analysis.bins);
            if (const auto* arr = (*t)["pool_sizes"].as_array()) {
                c.analysis.pool_sizes.clear();
                for (const auto& v : *arr) {
                    const auto k = v.value<std::int64_t>();
                    require(k.has_value(), ErrorKind::ConfigError, "analysis.pool_sizes must hold integers");
                    c.analysis.pool_sizes.push_back(static_cast<Eigen::Index>(*k));
                }
            }
            known("analysis", {"prop1_seeds", "prop2_episodes", "pairs", "bins", "pool_sizes"});
        }
    }

    static AlignRouting parse_routing(const std::string& s) {
        if (s == "affine") return AlignRouting::AffineOnly;
        if (s == "all") return AlignRouting::AllParameters;
        fail(ErrorKind::ConfigError, "routing must be 'affine' or 'all', got '" + s + "'");
    }

private:
    const toml::table* table(const char* name) {
        const auto node = root_[name];
        if (!node) return nullptr;
        const auto* t = node.as_table();
        require(t != nullptr, ErrorKind::ConfigError, std::string("[") + name + "] must be a table");
        return t;
    }

    void known(const std::string& section, std::initializer_list<std::string_view> keys) {
        const toml::table& t = section.empty() ? root_ : *root_[section].as_table();
        for (const auto& [k, v] : t) {
            if (std::find(keys.begin(), keys.end(), k.str()) == keys.end())
                fail(ErrorKind::ConfigError, "unknown config key '" + (section.empty() ? "" : section + ".") +
                                                 std::string(k.str()) + "'");
        }
    }

    template <class T>
    static bool scalar(const toml::table& t, const std::string& section, const char* key, T& out) {
        const auto node = t[key];
        if (!node) return false;
        const std::string where = (section.empty() ? "" : section + ".") + key;
        if constexpr (std::is_same_v<T, bool>) {
            const auto v = node.value<bool>();
            require(v.has_value(), ErrorKind::ConfigError, where + " must be a boolean");
            out = *v;
        } else if constexpr (std::is_same_v<T, std::string>) {
            const auto v = node.value<std::string>();
            require(v.has_value(), ErrorKind::ConfigError, where + " must be a string");
            out = *v;
        } else if constexpr (std::is_floating_point_v<T>) {
            const auto v = node.value<double>();
            require(v.has_value(), ErrorKind::ConfigError, where + " must be a number");
            out = *v;
        } else {
            const auto v = node.value<std::int64_t>();
            require(v.has_value() && node.is_integer(), ErrorKind::ConfigError, where + " must be an integer");
            require(*v >= 0 && static_cast<std::uint64_t>(*v) <= std::numeric_limits<T>::max(),
                    ErrorKind::ConfigError, where + " is out of range");
            out = static_cast<T>(*v);
        }
        return true;
    }

    const toml::table& root_;
};

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    out << text;
    require(static_cast<bool>(out), ErrorKind::IoFailure, "write failed for " + path.string());
}

inline void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline fs::path ensure_out(const RunConfig& c) {
    std::error_code ec;
    fs::create_directories(c.paths.out, ec);
    require(!ec, ErrorKind::IoFailure, "cannot create output directory " + c.paths.out + ": " + ec.message());
    return c.paths.out;
}

inline const std::string& need_path(const std::string& p, const char* what) {
    require(!p.empty(), ErrorKind::ConfigError, std::string("no ") + what + " path configured");
    return p;
}

}  // namespace detail

inline RunConfig load_config(const fs::path& path) {
    RunConfig c;
    toml::table root;
    try {
        root = toml::parse_file(path.string());
    } catch (const toml::parse_error& e) {
        const bool missing = !fs::exists(path);
        fail(missing ? ErrorKind::IoFailure : ErrorKind::ConfigError,
             missing ? "cannot open " + path.string() : path.string() + ": " + std::string(e.description()));
    }
    detail::TomlReader(root).read(c);
    return c;
}

/// Fingerprint of everything the source stage depends on.
inline std::uint64_t source_config_fingerprint(const RunConfig& c, std::uint64_t container_fp) {
    const auto& t = c.source.train;
    Fingerprint fp;
    fp.u64(static_cast<std::uint64_t>(t.prototypes_per_class)).f64(t.lambda).f64(t.learning_rate);
    fp.u64(static_cast<std::uint64_t>(t.steps)).u64(t.batch_size).u64(t.seed);
    fp.u64(static_cast<std::uint64_t>(c.source.pool_size)).u64(c.source.adapter_depth);
    fp.f64(c.source.eps).f64(c.source.alpha).u64(container_fp);
    return fp.value();
}

inline std::string report_tag(const FinetuneConfig& f) {
    if (f.steps == 0) return "no-adaptation";
    std::string tag;
    if (f.weights.proxy == 0.0) tag += "no-proxy-loss";
    if (f.weights.align == 0.0) tag += tag.empty() ? "no-align-loss" : "+no-align-loss";
    return tag.empty() ? "full" : tag;
}

struct Flags {
    std::string config;
    std::optional<std::string> source, target, model, out, routing;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;
    std::optional<double> lambda, lr;
    std::optional<int> steps;
    std::optional<std::uint32_t> episodes, ways, shots, queries;
    std::optional<Eigen::Index> pool_size, m;
    bool no_proxy = false;
    bool no_align = false;
    bool force = false;
    std::string container;
};

/// config file < IDP_SEED < flags
inline RunConfig resolve(const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
    if (const char* env = std::getenv("IDP_SEED"); env && *env) {
        std::uint64_t v = 0;
        const auto [end, ec] = std::from_chars(env, env + std::strlen(env), v);
        require(ec == std::errc{} && *end == '\0', ErrorKind::ConfigError,
                std::string("IDP_SEED is not an unsigned integer: '") + env + "'");
        c.seed = v;
    }
    if (f.source) c.paths.source = *f.source;
    if (f.target) c.paths.target = *f.target;
    if (f.model) c.paths.model = *f.model;
    if (f.out) c.paths.out = *f.out;
    if (f.seed) c.seed = *f.seed;
    if (f.workers) c.workers = *f.workers;
    if (f.lambda) c.lambda = *f.lambda;
    if (f.lr) c.finetune.learning_rate = *f.lr;
    if (f.steps) c.finetune.steps = *f.steps;
    if (f.episodes) c.episodes.episodes = *f.episodes;
    if (f.ways) c.episodes.ways = *f.ways;
    if (f.shots) c.episodes.shots_min = c.episodes.shots_max = *f.shots;
    if (f.queries) c.episodes.queries = *f.queries;
    if (f.pool_size) c.source.pool_size = *f.pool_size;
    if (f.m) c.source.train.prototypes_per_class = c.finetune.prototypes_per_class = *f.m;
    if (f.routing) c.finetune.routing = detail::TomlReader::parse_routing(*f.routing);
    if (f.no_proxy) c.finetune.weights.proxy = 0.0;
    if (f.no_align) c.finetune.weights.align = 0.0;
    c.sync();
    c.check();
    return c;
}

inline ojson dataset_summary(const FeatureDataset& ds, std::uint64_t fp) {
    ojson j;
    j["role"] = ds.labels.role == DomainRole::Source ? "source" : "target";
    j["width"] = ds.shape.width;
    j["height"] = ds.shape.height;
    j["channels"] = ds.shape.channels;
    j["classes"] = ds.class_count();
    j["records"] = ds.records.size();
    j["fingerprint"] = hex64(fp);
    return j;
}

inline int cmd_ingest(const Flags& f, std::ostream& out) {
    RunConfig c = resolve(f);
    std::vector<std::string> paths;
    if (!f.container.empty()) paths.push_back(f.container);
    if (paths.empty()) {
        if (!c.paths.source.empty()) paths.push_back(c.paths.source);
        if (!c.paths.target.empty()) paths.push_back(c.paths.target);
    }
    require(!paths.empty(), ErrorKind::ConfigError, "nothing to ingest: pass --container or configure paths");
    ojson report = ojson::array();
    for (const auto& p : paths) {
        const auto bytes = read_file_bytes(p);
        const auto ds = decode_container(bytes);
        auto j = dataset_summary(ds, bytes_fingerprint(bytes));
        j["path"] = p;
        out << p << ": " << ds.records.size() << " records, " << ds.class_count() << " classes, " << ds.shape.width
            << "x" << ds.shape.height << "x" << ds.shape.channels << "\n";
        report.push_back(std::move(j));
    }
    detail::write_json(detail::ensure_out(c) / "ingest.json", report);
    return kOk;
}

inline int cmd_synth(const Flags& f, std::ostream& out) {
    RunConfig c = resolve(f);
    const auto dir = detail::ensure_out(c);
    const auto& s = c.synth;
    const auto shift = ShiftSpec::from_magnitude(s.layout.shape.dim(), s.magnitude, s.noise, s.shift_seed);
    const auto [src, tgt] = synth_domains(shift, s.layout);
    write_container(src, dir / "source.idpf");
    write_container(tgt, dir / "target.idpf");
    ojson j;
    j["magnitude"] = s.magnitude;
    j["noise"] = s.noise;
    j["shift_seed"] = s.shift_seed;
    j["content_seed"] = s.layout.content_seed;
    j["scale"] = std::vector<double>(shift.scale.data(), shift.scale.data() + shift.scale.size());
    j["offset"] = std::vector<double>(shift.offset.data(), shift.offset.data() + shift.offset.size());
    detail::write_json(dir / "synth.json", j);
    out << "wrote " << (dir / "source.idpf").string() << " and " << (dir / "target.idpf").string() << "\n";
    return kOk;
}

inline int cmd_pretrain(const Flags& f, std::ostream& out) {
    RunConfig c = resolve(f);
    const auto bytes = read_file_bytes(detail::need_path(c.paths.source, "source container"));
    const auto source = decode_container(bytes);
    const auto dir = detail::ensure_out(c);

    const auto stage = pretrain_source(source, c.source);
    SourceArtifact a;
    a.model = stage.model;
    quantize_model(a.model);
    a.lambda = c.lambda;
    a.class_names = source.labels.names;
    a.source_fingerprint = bytes_fingerprint(bytes);
    a.config_fingerprint = source_config_fingerprint(c, a.source_fingerprint);
    const auto model_path = c.model_path();
    if (model_path.has_parent_path()) fs::create_directories(model_path.parent_path());
    write_artifact(a, model_path);

    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < stage.loss_trace.size(); ++i) csv += std::to_string(i) + "," + detail::fmt(stage.loss_trace[i]) + "\n";
    detail::write_text(dir / "source_loss.csv", csv);

    ojson j;
    j["config_fingerprint"] = hex64(a.config_fingerprint);
    j["source_container"] = hex64(a.source_fingerprint);
    j["bank_fingerprint"] = hex64(a.model.bank.fingerprint());
    j["pool_fingerprint"] = hex64(a.model.pool.fingerprint());
    j["train_accuracy"] = stage.train_accuracy;
    j["final_loss"] = stage.loss_trace.empty() ? 0.0 : stage.loss_trace.back();
    j["model"] = model_path.string();
    detail::write_json(dir / "pretrain.json", j);
    out << "source accuracy " << detail::fmt(100.0 * stage.train_accuracy) << "%, model " << model_path.string()
        << "\n";
    return kOk;
}

inline int cmd_eval(const Flags& f, std::ostream& out) {
    RunConfig c = resolve(f);
    const auto model_path = c.model_path();
    const auto artifact = read_artifact(model_path);
    if (!c.paths.source.empty()) {
        const auto fp = bytes_fingerprint(read_file_bytes(c.paths.source));
        require(fp == artifact.source_fingerprint || f.force, ErrorKind::ConfigError,
                model_path.string() + " was trained on a different source container than " + c.paths.source +
                    " (" + hex64(artifact.source_fingerprint) + " vs " + hex64(fp) + "); pass --force to use it");
    }
    const auto target = read_container(detail::need_path(c.paths.target, "target container"));
    const auto dir = detail::ensure_out(c);

    auto report = run_evaluation(target, artifact.model, c.episodes, c.finetune, c.worker_count());
    report.tag = report_tag(c.finetune);
    detail::write_json(dir / "eval.json", to_json(report));
    std::string csv = "episode,accuracy,status\n";
    for (std::size_t e = 0; e < report.accuracies.size(); ++e) {
        const auto& a = report.accuracies[e];
        csv += std::to_string(e) + "," + (a ? detail::fmt(*a) : "") + "," + (a ? "ok" : "failed") + "\n";
    }
    detail::write_text(dir / "episodes.csv", csv);
    out << report.tag << ": " << summary_line(report) << "\n";
    return kOk;
}

inline ojson curve_json(const std::vector<CurvePoint>& curve, const char* x, const char* y) {
    ojson arr = ojson::array();
    for (const auto& p : curve) arr.push_back({{x, p.x}, {y, p.y}});
    return arr;
}

inline int cmd_analyze(const Flags& f, std::ostream& out) {
    RunConfig c = resolve(f);
    const auto dir = detail::ensure_out(c);
    const auto& a = c.analysis;

    Prop1Setup p1;
    p1.magnitude = c.synth.magnitude;
    p1.noise = c.synth.noise;
    const auto sweep = prop1_sweep(p1, a.prop1_seeds, c.seed);
    {
        ojson j;
        j["seeds"] = a.prop1_seeds;
        j["pass_rate"] = sweep.pass_rate;
        j["lambda_grid"] = p1.grid;
        ojson runs = ojson::array();
        for (const auto& r : sweep.runs)
            runs.push_back({{"disc_source_target", r.source_target}, {"best_lambda", r.best_lambda},
                            {"best_disc_proxy_target", r.best}, {"holds", r.holds}});
        j["runs"] = std::move(runs);
        detail::write_json(dir / "prop1.json", j);
        std::string csv = "seed_index,lambda,disc_proxy_target,disc_source_target\n";
        for (std::size_t i = 0; i < sweep.runs.size(); ++i)
            for (const auto& p : sweep.runs[i].curve)
                csv += std::to_string(i) + "," + detail::fmt(p.x) + "," + detail::fmt(p.y) + "," +
                       detail::fmt(sweep.runs[i].source_target) + "\n";
        detail::write_text(dir / "prop1_curves.csv", csv);
    }

    // One raw-feature instance for F(lambda), the pool sweep and the distance study.
    SynthLayout layout = c.synth.layout;
    const auto shift = ShiftSpec::from_magnitude(layout.shape.dim(), c.synth.magnitude, c.synth.noise,
                                                 c.synth.shift_seed);
    const auto [src, tgt] = synth_domains(shift, layout);
    const Matrix s_rows = src.stacked_rows();
    const Matrix t_rows = tgt.stacked_rows();
    Rng rng = make_rng(c.seed, 0xA11A);
    const Eigen::Index pool_n = std::min<Eigen::Index>(c.source.pool_size, std::min(s_rows.rows(), t_rows.rows()));
    const Matrix pool = kmeans(s_rows, pool_n, rng).centroids;

    // F(lambda) on matched shapes; at most D rows keeps the pool full rank at lambda = 0.
    const Eigen::Index f_n = std::min<Eigen::Index>(pool_n, layout.shape.dim());
    const Matrix f_t = t_rows.topRows(f_n);
    const Matrix f_u = pool.topRows(f_n);
    const double f_zero = f_lambda(f_t, f_u, 0.0);
    {
        std::string csv = "lambda,f_lambda\n0," + detail::fmt(f_zero) + "\n";
        for (const auto& p : f_lambda_curve(f_t, f_u, p1.grid)) csv += detail::fmt(p.x) + "," + detail::fmt(p.y) + "\n";
        detail::write_text(dir / "f_lambda.csv", csv);
    }

    const Eigen::Index largest = *std::max_element(a.pool_sizes.begin(), a.pool_sizes.end());
    require(largest <= s_rows.rows(), ErrorKind::ConfigError, "pool sizes exceed the source row count");
    Rng sweep_rng = make_rng(c.seed, 0xA11B);
    const Matrix nested = kmeans(s_rows, largest, sweep_rng).centroids;
    const auto pool_curve = nested_pool_residuals(t_rows.topRows(layout.shape.positions()), nested, a.pool_sizes);
    {
        std::string csv = "pool_size,residual\n";
        for (const auto& p : pool_curve) csv += detail::fmt(p.x) + "," + detail::fmt(p.y) + "\n";
        detail::write_text(dir / "pool_sweep.csv", csv);
    }

    {
        const auto r = layout.shape.positions();
        const RidgeFactor factor(pool, c.lambda);
        const Matrix proj = factor.projector();
        std::vector<Matrix> s_samples, t_samples, p_samples;
        for (const auto& rec : src.records) s_samples.push_back(rec.data);
        for (const auto& rec : tgt.records) {
            t_samples.push_back(rec.data);
            p_samples.push_back(rec.data * proj);
        }
        const std::size_t n = std::min(s_samples.size(), t_samples.size());
        const std::span<const Matrix> s_span(s_samples.data(), n), t_span(t_samples.data(), n);
        ojson j;
        j["source_target"] = {{"style", style_distance(s_samples, t_samples)},
                              {"content", content_distance(s_span, t_span)},
                              {"discrepancy", discrepancy(s_rows, t_rows)}};
        j["proxy_target"] = {{"style", style_distance(p_samples, t_samples)},
                             {"content", content_distance(p_samples, t_samples)},
                             {"discrepancy", discrepancy(vstack(p_samples), t_rows)}};
        j["pool_size"] = pool_n;
        j["positions"] = r;
        detail::write_json(dir / "distances.json", j);
    }

    BenchmarkConfig bc;
    bc.layout = c.synth.layout;
    bc.magnitude = c.synth.magnitude;
    bc.noise = c.synth.noise;
    bc.shift_seed = c.synth.shift_seed;
    bc.source = c.source;
    bc.finetune = c.finetune;
    bc.episodes = c.episodes;
    bc.episodes.episodes = a.prop2_episodes;
    const auto bench = make_benchmark(bc);
    const auto p2 = verify_prop2(bench, bc.episodes, bc.finetune, a.pairs);
    {
        ojson j;
        j["episodes"] = a.prop2_episodes;
        j["mean_delta_accuracy"] = p2.mean_delta_acc;
        j["mean_delta_discrepancy"] = p2.mean_delta_disc;
        j["accuracy_improved_fraction"] = p2.acc_improved;
        j["discrepancy_reduced_fraction"] = p2.disc_reduced;
        j["pair_distance_reduced_fraction"] = p2.dist_reduced;
        j["mean_pair_distance_with_align"] = p2.hist_with.mean;
        j["mean_pair_distance_without_align"] = p2.hist_without.mean;
        ojson rows = ojson::array();
        for (const auto& e : p2.episodes)
            rows.push_back({{"episode", e.episode}, {"acc_with", e.acc_with}, {"acc_without", e.acc_without},
                            {"disc_with", e.disc_with}, {"disc_without", e.disc_without},
                            {"dist_with", e.dist_with}, {"dist_without", e.dist_without}});
        j["rows"] = std::move(rows);
        detail::write_json(dir / "prop2.json", j);
        std::string csv = "bin_lo,bin_hi,with_align,without_align\n";
        const double w = p2.hist_with.bin_width();
        for (std::size_t k = 0; k < p2.hist_with.counts.size(); ++k)
            csv += detail::fmt(k * w) + "," + detail::fmt((k + 1) * w) + "," +
                   std::to_string(p2.hist_with.counts[k]) + "," + std::to_string(p2.hist_without.counts[k]) + "\n";
        detail::write_text(dir / "alignment_hist.csv", csv);
    }

    ojson summary;
    summary["prop1_pass_rate"] = sweep.pass_rate;
    summary["f_lambda_at_0"] = f_zero;
    summary["pool_sweep"] = curve_json(pool_curve, "pool_size", "residual");
    summary["prop2_mean_delta_accuracy"] = p2.mean_delta_acc;
    summary["prop2_mean_delta_discrepancy"] = p2.mean_delta_disc;
    summary["files"] = {"prop1.json", "prop1_curves.csv", "f_lambda.csv", "pool_sweep.csv",
                        "distances.json", "prop2.json", "alignment_hist.csv"};
    detail::write_json(dir / "analysis.json", summary);
    out << "prop1 pass rate " << detail::fmt(sweep.pass_rate) << ", prop2 mean delta accuracy "
        << detail::fmt(p2.mean_delta_acc) << "\n";
    return kOk;
}

inline void add_common(CLI::App& sub, Flags& f) {
    sub.add_option("-c,--config", f.config, "TOML run configuration");
    sub.add_option("--out", f.out, "output directory");
    sub.add_option("--seed", f.seed, "master seed (overrides IDP_SEED and the config)");
    sub.add_option("--workers", f.workers, "episode worker threads, 0 for all cores");
    sub.add_option("--lambda", f.lambda, "ridge regularization");
}

inline void add_model_flags(CLI::App& sub, Flags& f) {
    sub.add_option("--source", f.source, "source feature container");
    sub.add_option("--model", f.model, "source model artifact");
    sub.add_option("--pool-size", f.pool_size, "proxy pool size");
    sub.add_option("-m,--prototypes", f.m, "prototypes per class");
}

inline void add_episode_flags(CLI::App& sub, Flags& f) {
    sub.add_option("--target", f.target, "target feature container");
    sub.add_option("--steps", f.steps, "fine-tuning steps per episode");
    sub.add_option("--lr", f.lr, "fine-tuning learning rate");
    sub.add_option("--episodes", f.episodes, "episode count");
    sub.add_option("--ways", f.ways, "classes per episode");
    sub.add_option("--shots", f.shots, "support samples per class");
    sub.add_option("--queries", f.queries, "query samples per class");
    sub.add_option("--routing", f.routing, "where the alignment loss flows: affine or all");
    sub.add_flag("--no-proxy-loss", f.no_proxy, "drop the proxy loss");
    sub.add_flag("--no-align-loss", f.no_align, "drop the alignment loss");
}

/// Runs one command line. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Intermediate-domain-proxy few-shot adaptation on frozen feature maps", "idp"};
    app.require_subcommand(1);
    Flags f;
    auto* ingest = app.add_subcommand("ingest", "validate feature containers");
    add_common(*ingest, f);
    ingest->add_option("--container", f.container, "container to validate");
    ingest->add_option("--source", f.source, "source feature container");
    ingest->add_option("--target", f.target, "target feature container");
    auto* pretrain = app.add_subcommand("pretrain", "train source prototypes and the proxy pool");
    add_common(*pretrain, f);
    add_model_flags(*pretrain, f);
    auto* eval = app.add_subcommand("eval", "episodic fine-tuning and evaluation on the target");
    add_common(*eval, f);
    add_model_flags(*eval, f);
    add_episode_flags(*eval, f);
    eval->add_flag("--force", f.force, "accept a model trained on a different source container");
    auto* analyze = app.add_subcommand("analyze", "synthetic-domain studies");
    add_common(*analyze, f);
    add_episode_flags(*analyze, f);
    analyze->add_option("--pool-size", f.pool_size, "proxy pool size");
    analyze->add_option("-m,--prototypes", f.m, "prototypes per class");
    auto* synth = app.add_subcommand("synth", "write a synthetic source/target container pair");
    add_common(*synth, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << "idp: " << e.what() << "\n";
        return kConfig;
    }

    try {
        if (app.got_subcommand(ingest)) return cmd_ingest(f, out);
        if (app.got_subcommand(pretrain)) return cmd_pretrain(f, out);
        if (app.got_subcommand(eval)) return cmd_eval(f, out);
        if (app.got_subcommand(analyze)) return cmd_analyze(f, out);
        return cmd_synth(f, out);
    } catch (const Error& e) {
        err << "idp: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "idp: " << e.what() << "\n";
        return kConfig;
    }
}

}  // namespace idp::cli
