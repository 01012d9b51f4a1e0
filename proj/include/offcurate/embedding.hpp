#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "offcurate/error.hpp"

namespace offcurate {

/// Identifies the vector space an embedding lives in. Embeddings from
/// different spaces are never compared.
struct EmbeddingSpace {
    std::size_t dimension = 0;
    std::string backend_id;

    friend bool operator==(const EmbeddingSpace&, const EmbeddingSpace&) = default;
};

/// A vector in the joint image/text space. Math is done in double even
/// though caches store float.
struct Embedding {
    std::string id;
    std::vector<double> vector;

    std::size_t dimension() const noexcept { return vector.size(); }
};

inline void require_same_space(const EmbeddingSpace& a, const EmbeddingSpace& b) {
    if (a != b) {
        fail(ErrorCode::DimensionMismatch,
             "space (" + a.backend_id + ", " + std::to_string(a.dimension) + ") vs (" +
                 b.backend_id + ", " + std::to_string(b.dimension) + ")");
    }
}

inline void check_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) fail(ErrorCode::NonFinite, "vector contains a non-finite component");
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        fail(ErrorCode::DimensionMismatch,
             std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
    return sum;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline constexpr double kMinNorm = 1e-12;

/// Returns v / ||v||. Throws ZeroNorm or NonFinite.
inline std::vector<double> normalized(std::span<const double> v) {
    check_finite(v);
    const double n = l2_norm(v);
    if (n < kMinNorm) fail(ErrorCode::ZeroNorm, "cannot normalize a zero vector");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

inline Embedding normalize(const Embedding& e) { return {e.id, normalized(e.vector)}; }

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    check_finite(a);
    check_finite(b);
    const double ab = dot(a, b);
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na < kMinNorm || nb < kMinNorm) fail(ErrorCode::ZeroNorm, "cosine of a zero vector");
    return std::clamp(ab / (na * nb), -1.0, 1.0);
}

inline double cosine_similarity(const Embedding& a, const Embedding& b) {
    return cosine_similarity(a.vector, b.vector);
}

struct Neighbor {
    std::string id;
    double similarity = 0.0;

    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Descending similarity, ascending id on ties.
inline bool neighbor_before(const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
}

/// Exact top-k cosine search. Result length is min(k, corpus size).
inline std::vector<Neighbor> nearest_neighbors(const Embedding& query,
                                               std::span<const Embedding> corpus,
                                               std::size_t k) {
    if (k == 0) fail(ErrorCode::InvalidArgument, "k must be at least 1");
    if (corpus.empty()) fail(ErrorCode::EmptyCorpus, "nearest_neighbors over an empty corpus");

    const auto q = normalized(query.vector);
    std::vector<Neighbor> scored;
    scored.reserve(corpus.size());
    for (const auto& item : corpus) {
        if (item.dimension() != q.size()) {
            fail(ErrorCode::DimensionMismatch, "corpus item '" + item.id + "' has dimension " +
                                                   std::to_string(item.dimension()));
        }
        scored.push_back({item.id, cosine_similarity(q, item.vector)});
    }
    const std::size_t n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n),
                      scored.end(), neighbor_before);
    scored.resize(n);
    return scored;
}

}  // namespace offcurate
