#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "offcurate/smid.hpp"

namespace offcurate {

struct LogisticModel {
    std::vector<double> weights;
    double bias = 0.0;

    double probability(std::span<const double> x) const {
        const double z = dot(weights, x) + bias;
        return 1.0 / (1.0 + std::exp(-z));
    }
    Label predict(std::span<const double> x) const {
        return probability(x) > 0.5 ? Label::Offensive : Label::NonOffensive;
    }
};

/// L2-regularized logistic regression (bias unpenalized) on normalized
/// embeddings, fitted by Newton's method.
inline LogisticModel fit_logistic(const std::vector<LabeledExample>& train, double regularization,
                                  std::size_t max_iterations = 50) {
    if (train.empty()) fail(ErrorCode::EmptyTrainSet, "no training examples");
    if (!(regularization >= 0.0)) fail(ErrorCode::InvalidArgument, "regularization must be >= 0");
    const auto n = static_cast<Eigen::Index>(train.size());
    const auto d = static_cast<Eigen::Index>(train.front().embedding.dimension());
    Eigen::MatrixXd X(n, d + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto& e = train[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(e.embedding.dimension()) != d) {
            fail(ErrorCode::DimensionMismatch, "example '" + e.id() + "' has a different dimension");
        }
        const auto v = normalized(e.embedding.vector);
        for (Eigen::Index c = 0; c < d; ++c) X(r, c) = v[static_cast<std::size_t>(c)];
        X(r, d) = 1.0;
        y(r) = e.label == Label::Offensive ? 1.0 : 0.0;
    }
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(d + 1, regularization * static_cast<double>(n));
    penalty(d) = 0.0;

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d + 1);
    for (std::size_t it = 0; it < max_iterations; ++it) {
        const Eigen::VectorXd z = X * w;
        const Eigen::VectorXd p = (1.0 + (-z.array()).exp()).inverse().matrix();
        const Eigen::VectorXd weight = (p.array() * (1.0 - p.array())).matrix();
        const Eigen::VectorXd gradient = X.transpose() * (p - y) + penalty.cwiseProduct(w);
        Eigen::MatrixXd hessian = X.transpose() * weight.asDiagonal() * X;
        hessian.diagonal() += penalty;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
            fail(ErrorCode::SingularProblem, "Hessian is not positive definite");
        }
        const Eigen::VectorXd step = ldlt.solve(gradient);
        if (!step.allFinite() || ldlt.rcond() < 1e-14) {
            fail(ErrorCode::SingularProblem, "ill-conditioned Newton system; increase regularization");
        }
        w -= step;
        if (step.norm() < 1e-10 * (1.0 + w.norm())) break;
    }
    if (!w.allFinite()) fail(ErrorCode::SingularProblem, "weights diverged");

    LogisticModel model;
    model.weights.assign(w.data(), w.data() + d);
    model.bias = w(d);
    return model;
}

/// Embedding-space baseline: logistic regression on frozen embeddings,
/// scored with the same metrics as the prompt classifier.
inline Metrics linear_probe_baseline(const std::vector<LabeledExample>& train,
                                     const std::vector<LabeledExample>& test, double regularization = 1e-3) {
    if (test.empty()) fail(ErrorCode::EmptyDataset, "no test examples");
    const auto model = fit_logistic(train, regularization);
    ConfusionMatrix cm;
    for (const auto& e : test) {
        const bool pred = model.predict(normalized(e.embedding.vector)) == Label::Offensive;
        const bool truth = e.label == Label::Offensive;
        if (pred && truth) ++cm.tp;
        else if (pred) ++cm.fp;
        else if (truth) ++cm.fn;
        else ++cm.tn;
    }
    return metrics_from_confusion(cm);
}

}  // namespace offcurate
