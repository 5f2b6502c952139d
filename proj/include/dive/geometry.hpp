#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dive/data.hpp"
#include "dive/encoder.hpp"
#include "dive/errors.hpp"
#include "dive/numeric.hpp"

namespace dive {

// Per-sample embedding changes caused by fine-tuning: u on the image side,
// v on the text side, chords on the unit sphere.
struct DifferenceVectorBatch {
    std::vector<Vec> u;
    std::vector<Vec> v;
    std::vector<std::uint64_t> ids;

    std::size_t size() const { return u.size(); }
};

// EMA average vector m with its previous value. m starts at the zero vector
// because m_p is undefined for the first batch.
struct AverageVectorState {
    Vec m;
    Vec m_p;
    double alpha = 0.99;

    static AverageVectorState zero(std::size_t dim, double alpha) {
        AverageVectorState s;
        s.m.assign(dim, 0.0);
        s.m_p.assign(dim, 0.0);
        s.alpha = alpha;
        return s;
    }
};

inline AverageVectorState update_average_vector(const AverageVectorState& state,
                                                const DifferenceVectorBatch& dvb) {
    if (dvb.size() == 0) throw EmptyBatch("update_average_vector: empty batch");
    if (!(state.alpha >= 0.0 && state.alpha <= 1.0))
        throw SpecInvalid("update_average_vector: alpha outside [0, 1]");
    const std::size_t dim = state.m.size();
    Vec batch_mean(dim, 0.0);
    for (std::size_t j = 0; j < dvb.size(); ++j) {
        if (dvb.u[j].size() != dim || dvb.v[j].size() != dim)
            throw ShapeMismatch("update_average_vector: dimension mismatch");
        for (std::size_t k = 0; k < dim; ++k)
            batch_mean[k] += (dvb.u[j][k] + dvb.v[j][k]) / 2.0;
    }
    AverageVectorState next;
    next.alpha = state.alpha;
    next.m_p = state.m;
    next.m.resize(dim);
    const double invb = 1.0 / static_cast<double>(dvb.size());
    for (std::size_t k = 0; k < dim; ++k)
        next.m[k] = state.alpha * state.m[k] + (1.0 - state.alpha) * invb * batch_mean[k];
    return next;
}

// Frozen-model embeddings of a paired dataset, computed once and reused; the
// snapshot never changes, so neither do these.
struct ReferenceCache {
    std::vector<Vec> image;
    std::vector<Vec> text;

    std::size_t size() const { return image.size(); }
    bool has(std::uint64_t id) const { return id < image.size(); }
};

inline ReferenceCache build_reference_cache(const FrozenSnapshot& frozen, const PairedDataset& ds) {
    ReferenceCache cache;
    cache.image.reserve(ds.size());
    cache.text.reserve(ds.size());
    for (const auto& s : ds.samples) {
        cache.image.push_back(forward(frozen.model().image_encoder, s.image_input));
        cache.text.push_back(forward(frozen.model().text_encoder, s.text_input));
    }
    return cache;
}

// u_j = f_ft(x_j) - f_pre(x_j); v_j = g_ft(t_j) - g_pre(t_j). The pre side
// comes from the cache; ids index into the dataset the cache was built from.
inline DifferenceVectorBatch difference_vectors(const TwoTowerModel& ft_model,
                                                const ReferenceCache& cache,
                                                const PairedDataset& ds,
                                                std::span<const std::size_t> indices) {
    if (indices.empty()) throw EmptyBatch("difference_vectors: empty reference batch");
    DifferenceVectorBatch out;
    out.u.reserve(indices.size());
    out.v.reserve(indices.size());
    out.ids.reserve(indices.size());
    for (std::size_t idx : indices) {
        if (!cache.has(idx) || idx >= ds.size())
            throw MissingCache("difference_vectors: no cached pre-embedding for sample");
        const auto& s = ds.samples[idx];
        out.u.push_back(sub(forward(ft_model.image_encoder, s.image_input), cache.image[idx]));
        out.v.push_back(sub(forward(ft_model.text_encoder, s.text_input), cache.text[idx]));
        out.ids.push_back(idx);
    }
    return out;
}

inline DifferenceVectorBatch difference_vectors(const TwoTowerModel& ft_model,
                                                const ReferenceCache& cache,
                                                const PairedDataset& ds) {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return difference_vectors(ft_model, cache, ds, all);
}

// RDM over one embedding set: D[i][j] = 1 - cos(e_i, e_j). Symmetric with an
// exactly zero diagonal.
inline Matrix rdm(const std::vector<Vec>& embeddings) {
    const std::size_t m = embeddings.size();
    if (m < 2) throw TooFew("rdm: needs at least 2 embeddings");
    for (const auto& e : embeddings)
        if (!is_unit_norm(e)) throw NotNormalized("rdm: embeddings must be unit-norm");
    Matrix out(m, m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i + 1; j < m; ++j) {
            const double d = 1.0 - cosine_similarity(embeddings[i], embeddings[j]);
            out(i, j) = d;
            out(j, i) = d;
        }
    }
    return out;
}

// Row-major strictly-upper-triangle vectorization (j > i).
inline Vec upper_triangle(const Matrix& m) {
    Vec out;
    out.reserve(m.rows * (m.rows - 1) / 2);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j) out.push_back(m(i, j));
    return out;
}

// Pearson correlation between the upper triangles of the two RDMs.
inline double rsa_score(const std::vector<Vec>& set_a, const std::vector<Vec>& set_b) {
    if (set_a.size() != set_b.size()) throw ShapeMismatch("rsa_score: set sizes differ");
    if (set_a.size() < 3) throw TooFew("rsa_score: needs at least 3 embeddings");
    return pearson_correlation(upper_triangle(rdm(set_a)), upper_triangle(rdm(set_b)));
}

struct DiffNormStats {
    double mean_norm = 0.0;   // mean of |u_j| and |v_j| pooled
    double max_norm = 0.0;
    double mean_u_v_gap = 0.0;  // mean of |u_j - v_j|
};

inline DiffNormStats diff_norm_stats(const DifferenceVectorBatch& dvb) {
    if (dvb.size() == 0) throw EmptyBatch("diff_norm_stats: empty batch");
    DiffNormStats stats;
    for (std::size_t j = 0; j < dvb.size(); ++j) {
        const double nu = norm(dvb.u[j]);
        const double nv = norm(dvb.v[j]);
        stats.mean_norm += nu + nv;
        stats.max_norm = std::max({stats.max_norm, nu, nv});
        stats.mean_u_v_gap += norm(sub(dvb.u[j], dvb.v[j]));
    }
    stats.mean_norm /= static_cast<double>(2 * dvb.size());
    stats.mean_u_v_gap /= static_cast<double>(dvb.size());
    return stats;
}

}  // namespace dive
