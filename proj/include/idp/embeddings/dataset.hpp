#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "idp/numerics/matrix.hpp"

namespace idp {

/// Spatial layout of one feature map: W x H positions of D channels.
struct FeatureShape {
    std::uint16_t width = 1;
    std::uint16_t height = 1;
    std::uint32_t channels = 1;

    [[nodiscard]] Eigen::Index positions() const noexcept { return Eigen::Index{width} * Eigen::Index{height}; }
    [[nodiscard]] Eigen::Index dim() const noexcept { return static_cast<Eigen::Index>(channels); }
    [[nodiscard]] bool valid() const noexcept { return width >= 1 && height >= 1 && channels >= 1; }
    /// Flat offset of (h, w, d) in the position-major layout.
    [[nodiscard]] std::size_t index(std::size_t h, std::size_t w, std::size_t d) const noexcept {
        return (h * width + w) * channels + d;
    }
    friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

/// One sample's dense embedding: row p of `data` is the D-vector at position p.
struct FeatureMap {
    std::uint64_t sample_id = 0;
    std::uint32_t label = 0;
    Matrix data;
};

enum class DomainRole : std::uint8_t { Source = 0, Target = 1 };

struct LabelSpace {
    std::vector<std::string> names;
    DomainRole role = DomainRole::Source;

    [[nodiscard]] std::size_t size() const noexcept { return names.size(); }
};

struct FeatureDataset {
    FeatureShape shape;
    LabelSpace labels;
    std::vector<FeatureMap> records;

    [[nodiscard]] std::size_t class_count() const noexcept { return labels.size(); }

    /// Record indices grouped by label, in file order.
    [[nodiscard]] std::vector<std::vector<std::size_t>> indices_by_class() const {
        std::vector<std::vector<std::size_t>> out(labels.size());
        for (std::size_t i = 0; i < records.size(); ++i) out.at(records[i].label).push_back(i);
        return out;
    }

    /// All feature rows of all records stacked (records * r) x D.
    [[nodiscard]] Matrix stacked_rows() const {
        Matrix out(static_cast<Eigen::Index>(records.size()) * shape.positions(), shape.dim());
        for (std::size_t i = 0; i < records.size(); ++i)
            out.middleRows(static_cast<Eigen::Index>(i) * shape.positions(), shape.positions()) = records[i].data;
        return out;
    }
};

/// Checks every structural invariant of a dataset; throws CorruptRecord,
/// NonFiniteFeature or InvalidArgument.
inline void validate(const FeatureDataset& ds) {
    require(ds.shape.valid(), ErrorKind::CorruptRecord, "feature shape has a zero dimension");
    std::set<std::string> seen;
    for (const auto& n : ds.labels.names) {
        require(seen.insert(n).second, ErrorKind::CorruptRecord, "duplicate class name '" + n + "'");
    }
    std::vector<std::size_t> counts(ds.labels.size(), 0);
    for (const auto& rec : ds.records) {
        require(rec.label < ds.labels.size(), ErrorKind::CorruptRecord,
                "record " + std::to_string(rec.sample_id) + " has label out of range");
        require(rec.data.rows() == ds.shape.positions() && rec.data.cols() == ds.shape.dim(),
                ErrorKind::CorruptRecord, "record " + std::to_string(rec.sample_id) + " has wrong dimensions");
        require(rec.data.allFinite(), ErrorKind::NonFiniteFeature,
                "record " + std::to_string(rec.sample_id) + " contains NaN or Inf");
        ++counts[rec.label];
    }
    for (std::size_t c = 0; c < counts.size(); ++c) {
        require(counts[c] > 0, ErrorKind::CorruptRecord, "class '" + ds.labels.names[c] + "' has no records");
    }
}

}  // namespace idp
