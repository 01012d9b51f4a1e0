#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "offcurate/pca.hpp"
#include "support.hpp"

using namespace offcurate;
using namespace testing_support;
using Catch::Matchers::WithinAbs;

namespace {

/// Independent oracle: covariance matrix eigenvalues by cyclic Jacobi
/// rotations, no linear-algebra library involved.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i][i];
    std::sort(eig.rbegin(), eig.rend());
    return eig;
}

double distance(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("rank-2 data keeps pairwise distances", "[pca][property]") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t dim = 16;
        const auto origin = random_vector(rng, dim);
        const auto u = random_vector(rng, dim);
        const auto v = random_vector(rng, dim);
        std::vector<Embedding> points;
        for (std::size_t i = 0; i < 30; ++i) {
            const double a = rng.gaussian() * 3.0, b = rng.gaussian();
            std::vector<double> p(dim);
            for (std::size_t d = 0; d < dim; ++d) p[d] = origin[d] + a * u[d] + b * v[d];
            points.push_back({pad_id(i), p});
        }
        const auto proj = pca_project(points, {.components = 2, .normalize_inputs = false});
        REQUIRE(proj.points.size() == points.size());
        for (std::size_t i = 0; i < points.size(); ++i) {
            CHECK(proj.points[i].id == points[i].id);
            for (std::size_t j = i + 1; j < points.size(); ++j) {
                CHECK_THAT(distance(proj.points[i].coords, proj.points[j].coords),
                           WithinAbs(distance(points[i].vector, points[j].vector), 1e-6));
            }
        }
        CHECK_THAT(proj.explained_variance[0] + proj.explained_variance[1], WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("explained variance matches a covariance eigensolve", "[pca]") {
    Rng rng(99);
    const std::size_t n = 50, dim = 512;
    std::vector<Embedding> cloud;
    for (std::size_t i = 0; i < n; ++i) {
        auto v = random_vector(rng, dim);
        v[0] *= 4.0;  // make the leading directions well separated
        v[1] *= 3.0;
        cloud.push_back({pad_id(i), v});
    }
    const auto proj = pca_project(cloud, {.components = 2, .normalize_inputs = false});

    // covariance via the Gram trick: nonzero eigenvalues of X X^T equal
    // those of X^T X, and n x n keeps the Jacobi oracle small
    std::vector<double> mean(dim, 0.0);
    for (const auto& e : cloud)
        for (std::size_t d = 0; d < dim; ++d) mean[d] += e.vector[d] / n;
    std::vector<std::vector<double>> gram(n, std::vector<double>(n, 0.0));
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t d = 0; d < dim; ++d) s += (cloud[i].vector[d] - mean[d]) * (cloud[j].vector[d] - mean[d]);
            gram[i][j] = s;
        }
        trace += gram[i][i];
    }
    const auto eig = jacobi_eigenvalues(gram);
    CHECK_THAT(proj.explained_variance[0], WithinAbs(eig[0] / trace, 1e-6));
    CHECK_THAT(proj.explained_variance[1], WithinAbs(eig[1] / trace, 1e-6));
    CHECK(proj.explained_variance[0] >= proj.explained_variance[1]);
}

TEST_CASE("sign convention and determinism", "[pca]") {
    Rng rng(1);
    std::vector<Embedding> cloud;
    for (std::size_t i = 0; i < 20; ++i) cloud.push_back({pad_id(i), random_vector(rng, 8)});
    const auto a = pca_project(cloud);
    auto reversed = cloud;
    std::reverse(reversed.begin(), reversed.end());
    const auto b = pca_project(reversed);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& pa = a.points[i];
        const auto& pb = b.points[cloud.size() - 1 - i];
        REQUIRE(pa.id == pb.id);
        for (std::size_t c = 0; c < 2; ++c) CHECK_THAT(pa.coords[c], WithinAbs(pb.coords[c], 1e-9));
    }
    for (double v : a.explained_variance) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("degenerate inputs", "[pca]") {
    std::vector<Embedding> same(5, Embedding{"x", {1.0, 2.0, 3.0}});
    CHECK_THROWS_AS(pca_project(same), Error);
    try {
        pca_project(same);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InsufficientData);
    }
    std::vector<Embedding> two{{"a", {1, 0, 0}}, {"b", {0, 1, 0}}};
    try {
        pca_project(two, {.components = 2});
        FAIL("expected InsufficientData");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InsufficientData);
    }
}
