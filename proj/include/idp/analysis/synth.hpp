#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>
#include <random>
#include <string>
#include <utility>

#include "idp/embeddings/container.hpp"
#include "idp/numerics/rng.hpp"

// Desk-scale stand-in for a pair of benchmark domains. Classes are Gaussian
// clusters around parts drawn from one vocabulary shared by both domains; the
// target re-renders content with extra noise and a per-channel affine style.
namespace idp {

/// Target-domain style: x -> scale * (x + noise) + offset, channelwise.
struct ShiftSpec {
    RowVector scale;
    RowVector offset;
    double content_noise = 0.0;
    std::uint64_t seed = 0;

    /// Style of strength `magnitude` along fixed random directions:
    /// scale = exp(magnitude * a), offset = magnitude * b with a ~ N(0, 0.25), b ~ N(0, 1).
    static ShiftSpec from_magnitude(Eigen::Index dim, double magnitude, double noise, std::uint64_t seed) {
        Rng rng = make_rng(seed, 0x5717E);
        std::normal_distribution<double> normal(0.0, 1.0);
        ShiftSpec s;
        s.scale.resize(dim);
        s.offset.resize(dim);
        for (Eigen::Index d = 0; d < dim; ++d) s.scale[d] = std::exp(magnitude * 0.5 * normal(rng));
        for (Eigen::Index d = 0; d < dim; ++d) s.offset[d] = magnitude * normal(rng);
        s.content_noise = noise;
        s.seed = seed;
        return s;
    }

    void check(Eigen::Index dim) const {
        require(scale.size() == dim && offset.size() == dim, ErrorKind::DimensionMismatch, "shift spec channel count");
        require((scale.array() > 0.0).all(), ErrorKind::InvalidArgument, "style scales must be positive");
        require(content_noise >= 0.0, ErrorKind::InvalidArgument, "content noise must be nonnegative");
    }
};

inline constexpr double kDefaultShiftMagnitude = 1.0;
inline constexpr double kDefaultContentNoise = 1.0;

struct SynthLayout {
    FeatureShape shape{3, 3, 32};
    std::uint32_t source_classes = 16;
    std::uint32_t target_classes = 8;
    std::uint32_t samples_per_class = 40;
    /// Target classes use part combinations never seen as source classes.
    bool novel_target_classes = true;
    Eigen::Index content_rank = 16;
    std::uint32_t vocabulary = 24;
    std::uint32_t parts_per_class = 3;
    double part_norm = 2.5;
    double within_class_spread = 0.3;
    double base_noise = 0.1;
    std::uint64_t content_seed = 1;
};

/// Deterministic content model shared by both domains: a vocabulary of part
/// vectors inside a content subspace; each class is a small set of parts and
/// every position of a sample shows one of its class's parts.
class ContentModel {
public:
    explicit ContentModel(const SynthLayout& layout) : layout_(layout) {
        const auto d = layout.shape.dim();
        require(layout.content_rank >= 1 && layout.content_rank <= d, ErrorKind::InvalidArgument,
                "content rank must be in [1, D]");
        require(layout.parts_per_class >= 1 && layout.parts_per_class <= layout.vocabulary, ErrorKind::InvalidArgument,
                "parts per class must be in [1, vocabulary]");
        Rng rng = make_rng(layout.content_seed, 0xBA515);
        std::normal_distribution<double> normal(0.0, 1.0);
        Matrix g(d, layout.content_rank);
        for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = normal(rng);
        Eigen::HouseholderQR<Matrix> qr(g);
        basis_ = Matrix(qr.householderQ() * Matrix::Identity(d, layout.content_rank)).transpose();
        Matrix coef(layout.vocabulary, layout.content_rank);
        for (Eigen::Index k = 0; k < coef.size(); ++k) coef.data()[k] = normal(rng);
        coef.rowwise().normalize();
        parts_ = layout.part_norm * coef * basis_;
    }

    [[nodiscard]] const Matrix& basis() const noexcept { return basis_; }
    [[nodiscard]] const Matrix& vocabulary() const noexcept { return parts_; }

    /// Vocabulary indices of global class `g`'s parts.
    [[nodiscard]] std::vector<Eigen::Index> class_parts(std::uint64_t g) const {
        Rng rng = make_rng(layout_.content_seed, 0xC1A55000 + g);
        std::vector<Eigen::Index> all(layout_.vocabulary);
        std::iota(all.begin(), all.end(), Eigen::Index{0});
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(layout_.parts_per_class);
        return all;
    }

    /// Sample `j` of global class `g`, (r x D).
    [[nodiscard]] Matrix sample(std::uint64_t g, std::uint64_t j) const {
        const auto parts = class_parts(g);
        Rng rng = make_rng(derive_seed(layout_.content_seed, g), 0x5A000000 + j);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_int_distribution<std::size_t> which(0, parts.size() - 1);
        const auto r = layout_.shape.positions();
        Matrix out(r, layout_.shape.dim());
        for (Eigen::Index p = 0; p < r; ++p) {
            const double gain = 1.0 + 0.2 * normal(rng);
            Vector coef(layout_.content_rank);
            for (Eigen::Index k = 0; k < coef.size(); ++k) coef[k] = layout_.within_class_spread * normal(rng);
            out.row(p) = gain * parts_.row(parts[which(rng)]) + coef.transpose() * basis_;
            for (Eigen::Index d = 0; d < out.cols(); ++d) out(p, d) += layout_.base_noise * normal(rng);
        }
        return out;
    }

private:
    SynthLayout layout_;
    Matrix basis_;  // content_rank x D, orthonormal rows
    Matrix parts_;  // vocabulary x D
};

/// Renders content rows in the target style: scale * (x + noise) + offset.
inline Matrix apply_style(const Matrix& content, const ShiftSpec& shift, std::uint64_t cls, std::uint64_t j) {
    Matrix x = content;
    if (shift.content_noise > 0.0) {
        Rng rng = make_rng(derive_seed(shift.seed, cls), 0x401CE000 + j);
        std::normal_distribution<double> normal(0.0, shift.content_noise);
        for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] += normal(rng);
    }
    return (x.array().rowwise() * shift.scale.array()).rowwise() + shift.offset.array();
}

/// Source and target datasets sharing one content model. Values are rounded
/// to float32 so the in-memory datasets equal their containers.
inline std::pair<FeatureDataset, FeatureDataset> synth_domains(const ShiftSpec& shift, const SynthLayout& layout) {
    require(layout.shape.valid(), ErrorKind::InvalidArgument, "synthetic shape has a zero dimension");
    require(layout.source_classes >= 1 && layout.target_classes >= 1 && layout.samples_per_class >= 1,
            ErrorKind::InvalidArgument, "synthetic layout needs classes and samples");
    shift.check(layout.shape.dim());
    const ContentModel model(layout);

    FeatureDataset src;
    src.shape = layout.shape;
    src.labels.role = DomainRole::Source;
    for (std::uint32_t c = 0; c < layout.source_classes; ++c) {
        src.labels.names.push_back("source_" + std::to_string(c));
        for (std::uint32_t j = 0; j < layout.samples_per_class; ++j)
            src.records.push_back({std::uint64_t{c} * layout.samples_per_class + j, c, model.sample(c, j)});
    }

    FeatureDataset tgt;
    tgt.shape = layout.shape;
    tgt.labels.role = DomainRole::Target;
    const std::uint64_t first = layout.novel_target_classes ? layout.source_classes : 0;
    for (std::uint32_t c = 0; c < layout.target_classes; ++c) {
        tgt.labels.names.push_back("target_" + std::to_string(c));
        for (std::uint32_t j = 0; j < layout.samples_per_class; ++j) {
            Matrix x = apply_style(model.sample(first + c, j), shift, c, j);
            tgt.records.push_back({std::uint64_t{c} * layout.samples_per_class + j, c, std::move(x)});
        }
    }
    quantize_to_f32(src);
    quantize_to_f32(tgt);
    return {std::move(src), std::move(tgt)};
}

}  // namespace idp
