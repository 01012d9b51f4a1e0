#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "offcurate/embedding.hpp"

namespace offcurate {

struct ProjectedPoint {
    std::string id;
    std::vector<double> coords;  // one coordinate per component (u, v, ...)
};

struct Projection {
    std::vector<ProjectedPoint> points;
    /// Fraction of total variance captured by each component, descending.
    std::vector<double> explained_variance;
};

struct PcaOptions {
    std::size_t components = 2;
    /// L2-normalize every embedding before centering.
    bool normalize_inputs = true;
};

/// Mean-centered PCA via SVD of the data matrix. Each component's sign is
/// fixed so that its largest-magnitude loading is positive.
inline Projection pca_project(std::span<const Embedding> embeddings, PcaOptions options = {}) {
    if (options.components == 0) fail(ErrorCode::InvalidArgument, "components must be >= 1");
    if (embeddings.size() < options.components + 1) {
        fail(ErrorCode::InsufficientData, "need at least " + std::to_string(options.components + 1) +
                                              " embeddings, got " +
                                              std::to_string(embeddings.size()));
    }
    const auto rows = static_cast<Eigen::Index>(embeddings.size());
    const auto dim = static_cast<Eigen::Index>(embeddings.front().dimension());
    if (static_cast<std::size_t>(dim) < options.components) {
        fail(ErrorCode::InsufficientData, "dimension smaller than component count");
    }

    Eigen::MatrixXd data(rows, dim);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& e = embeddings[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(e.dimension()) != dim) {
            fail(ErrorCode::DimensionMismatch, "embedding '" + e.id + "' has a different dimension");
        }
        check_finite(e.vector);
        const auto v = options.normalize_inputs ? normalized(e.vector) : e.vector;
        for (Eigen::Index c = 0; c < dim; ++c) data(r, c) = v[static_cast<std::size_t>(c)];
    }
    const Eigen::RowVectorXd mean = data.colwise().mean();
    data.rowwise() -= mean;

    const double total = data.squaredNorm();
    if (total <= 1e-24 * static_cast<double>(rows)) {
        fail(ErrorCode::InsufficientData, "zero covariance (all points identical)");
    }

    Eigen::BDCSVD<Eigen::MatrixXd> svd(data, Eigen::ComputeThinV);
    const auto& singular = svd.singularValues();
    Eigen::MatrixXd basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(options.components));

    Projection out;
    for (Eigen::Index c = 0; c < basis.cols(); ++c) {
        Eigen::Index arg = 0;
        basis.col(c).cwiseAbs().maxCoeff(&arg);
        if (basis(arg, c) < 0.0) basis.col(c) *= -1.0;
        const double s = c < singular.size() ? singular(c) : 0.0;
        out.explained_variance.push_back(s * s / total);
    }

    const Eigen::MatrixXd projected = data * basis;
    out.points.reserve(embeddings.size());
    for (Eigen::Index r = 0; r < rows; ++r) {
        ProjectedPoint p{embeddings[static_cast<std::size_t>(r)].id, {}};
        for (Eigen::Index c = 0; c < projected.cols(); ++c) p.coords.push_back(projected(r, c));
        out.points.push_back(std::move(p));
    }
    return out;
}

}  // namespace offcurate
