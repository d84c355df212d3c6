#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "idp/embeddings/container.hpp"
#include "idp/episodes.hpp"

// Source-model artifact (integers little-endian):
//   "IDPM" | u32 version=1 | u32 header_len | header_len bytes of JSON
//   | f32 payload: bank (C x m x D), pool (P x D), then per adapter layer
//     mean, var, gamma, beta (D each)
namespace idp {

inline constexpr std::array<char, 4> kArtifactMagic = {'I', 'D', 'P', 'M'};
inline constexpr std::uint32_t kArtifactVersion = 1;

struct SourceArtifact {
    SourceModel model;
    std::vector<std::string> class_names;
    std::uint64_t config_fingerprint = 0;
    std::uint64_t source_fingerprint = 0;  // hash of the source container bytes
    double lambda = 0.1;
};

/// Rounds every stored value to float32 and re-points the pool at the rounded
/// bank, so a written model reloads to exactly the in-memory one.
inline void quantize_model(SourceModel& m) {
    const auto round = [](auto& x) { x = x.template cast<float>().template cast<double>(); };
    const bool pool_current = m.pool.source_fingerprint == m.bank.fingerprint();
    for (auto& c : m.bank.classes) round(c);
    round(m.pool.centroids);
    for (auto& l : m.adapter.layers) {
        round(l.mean);
        round(l.var);
        round(l.gamma);
        round(l.beta);
    }
    if (pool_current) m.pool.source_fingerprint = m.bank.fingerprint();
}

inline std::string hex64(std::uint64_t v) {
    std::string out(16, '0');
    static constexpr char digits[] = "0123456789abcdef";
    for (int i = 0; i < 16; ++i) out[15 - i] = digits[(v >> (4 * i)) & 0xF];
    return out;
}

inline std::uint64_t parse_hex64(const std::string& s) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    require(ec == std::errc{} && end == s.data() + s.size() && s.size() == 16, ErrorKind::CorruptRecord,
            "bad fingerprint '" + s + "'");
    return v;
}

inline std::uint64_t bytes_fingerprint(std::span<const std::uint8_t> bytes) {
    return Fingerprint{}.bytes(bytes.data(), bytes.size()).value();
}

inline std::vector<std::uint8_t> encode_artifact(const SourceArtifact& a) {
    const auto& m = a.model;
    m.bank.check();
    require(m.pool.centroids.cols() == m.bank.dim(), ErrorKind::DimensionMismatch, "pool and bank channel counts");
    nlohmann::ordered_json h;
    h["kind"] = "source-model";
    h["config_fingerprint"] = hex64(a.config_fingerprint);
    h["source_container"] = hex64(a.source_fingerprint);
    h["classes"] = m.bank.class_count();
    h["per_class"] = m.bank.per_class();
    h["dim"] = m.bank.dim();
    h["pool_size"] = m.pool.size();
    h["pool_seed"] = hex64(m.pool.seed);
    PrototypeBank stored = m.bank;
    for (auto& c : stored.classes) c = c.cast<float>().cast<double>();
    h["bank_fingerprint"] = hex64(stored.fingerprint());
    h["pool_source_fingerprint"] = hex64(m.pool.source_fingerprint);
    h["lambda"] = a.lambda;
    h["alpha"] = m.adapter.schedule.alpha;
    auto layers = nlohmann::ordered_json::array();
    for (const auto& l : m.adapter.layers) layers.push_back({{"eps", l.eps}});
    h["layers"] = layers;
    h["class_names"] = a.class_names;
    const std::string header = h.dump();

    detail::ByteWriter w;
    w.raw(std::string_view(kArtifactMagic.data(), kArtifactMagic.size()));
    w.u32(kArtifactVersion);
    w.u32(static_cast<std::uint32_t>(header.size()));
    w.raw(header);
    const auto put = [&](const auto& mat) {
        for (Eigen::Index i = 0; i < mat.size(); ++i) w.f32(static_cast<float>(mat.data()[i]));
    };
    for (const auto& c : m.bank.classes) put(c);
    put(m.pool.centroids);
    for (const auto& l : m.adapter.layers) {
        require(l.dim() == m.bank.dim(), ErrorKind::DimensionMismatch, "adapter and bank channel counts");
        put(l.mean);
        put(l.var);
        put(l.gamma);
        put(l.beta);
    }
    return w.bytes();
}

inline SourceArtifact decode_artifact(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    const std::string magic = r.raw(4);
    require(std::equal(magic.begin(), magic.end(), kArtifactMagic.begin()), ErrorKind::BadMagic,
            "not a source-model artifact");
    const auto version = r.u32();
    require(version == kArtifactVersion, ErrorKind::VersionUnsupported,
            "artifact version " + std::to_string(version) + " is not supported");
    const std::string text = r.raw(r.u32());
    const auto h = nlohmann::json::parse(text, nullptr, false);
    require(!h.is_discarded() && h.is_object(), ErrorKind::CorruptRecord, "artifact header is not valid JSON");

    SourceArtifact a;
    try {
        require(h.at("kind") == "source-model", ErrorKind::CorruptRecord, "unexpected artifact kind");
        a.config_fingerprint = parse_hex64(h.at("config_fingerprint"));
        a.source_fingerprint = parse_hex64(h.at("source_container"));
        const auto classes = h.at("classes").get<std::size_t>();
        const auto per_class = h.at("per_class").get<Eigen::Index>();
        const auto dim = h.at("dim").get<Eigen::Index>();
        const auto pool = h.at("pool_size").get<Eigen::Index>();
        require(classes >= 1 && per_class >= 1 && dim >= 1 && pool >= 1, ErrorKind::CorruptRecord,
                "artifact shape fields must be positive");
        const auto layers = h.at("layers");
        const auto cells = static_cast<std::size_t>(dim);
        const auto vectors = classes * static_cast<std::size_t>(per_class) + static_cast<std::size_t>(pool) +
                             4 * layers.size();
        require(vectors <= r.remaining() / 4 / cells && vectors * cells * 4 == r.remaining(), ErrorKind::CorruptRecord,
                "artifact payload holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                    std::to_string(vectors) + " vectors of " + std::to_string(cells) + " floats");
        const auto get = [&](Eigen::Index rows, Eigen::Index cols) {
            Matrix out(rows, cols);
            for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = r.f32();
            return out;
        };
        for (std::size_t c = 0; c < classes; ++c) a.model.bank.classes.push_back(get(per_class, dim));
        a.model.pool.centroids = get(pool, dim);
        a.model.pool.seed = parse_hex64(h.at("pool_seed"));
        a.model.pool.source_fingerprint = parse_hex64(h.at("pool_source_fingerprint"));
        a.lambda = h.at("lambda").get<double>();
        a.model.adapter.schedule.alpha = h.at("alpha").get<double>();
        for (const auto& l : layers) {
            NormLayerState s;
            s.eps = l.at("eps").get<double>();
            s.mean = get(1, dim);
            s.var = get(1, dim);
            s.gamma = get(1, dim);
            s.beta = get(1, dim);
            a.model.adapter.layers.push_back(std::move(s));
        }
        a.class_names = h.at("class_names").get<std::vector<std::string>>();
        require(parse_hex64(h.at("bank_fingerprint")) == a.model.bank.fingerprint(), ErrorKind::CorruptRecord,
                "bank payload does not match its fingerprint");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::CorruptRecord, std::string("artifact header: ") + e.what());
    }
    a.model.bank.check();
    for (const auto& l : a.model.adapter.layers)
        require(l.mean.allFinite() && l.var.allFinite() && (l.var.array() >= 0.0).all() && l.gamma.allFinite() &&
                    l.beta.allFinite() && l.eps > 0.0,
                ErrorKind::CorruptRecord, "adapter layer holds invalid statistics");
    require(a.model.pool.centroids.allFinite(), ErrorKind::NonFiniteFeature, "pool holds non-finite entries");
    return a;
}

inline SourceArtifact read_artifact(const std::filesystem::path& path) {
    return decode_artifact(read_file_bytes(path));
}

inline void write_artifact(const SourceArtifact& a, const std::filesystem::path& path) {
    write_file_bytes(path, encode_artifact(a));
}

}  // namespace idp
