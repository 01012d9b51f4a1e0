#pragma once

// Soft-prompt tuning in the joint embedding space. The class anchors are the
// only trainable parameters; image and text encoders stay frozen. Training
// minimizes the mean cross-entropy of softmax(tau * cos(x, z)) by mini-batch
// gradient descent, projecting anchors back onto the unit sphere after each
// step.

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "offcurate/prompts.hpp"
#include "offcurate/random.hpp"
#include "offcurate/smid.hpp"

namespace offcurate {

/// Gradient for every anchor, indexed [class][anchor][component].
using AnchorGradients = std::vector<std::vector<std::vector<double>>>;

namespace detail {

inline void require_batch(const PromptSet& prompts, const std::vector<LabeledExample>& batch) {
    if (batch.empty()) fail(ErrorCode::EmptyBatch, "batch is empty");
    for (const auto& e : batch) {
        if (e.embedding.dimension() != prompts.space.dimension) {
            fail(ErrorCode::DimensionMismatch, "example '" + e.id() + "' has dimension " +
                                                   std::to_string(e.embedding.dimension()));
        }
    }
}

}  // namespace detail

/// Mean cross-entropy over the batch. Uses log-softmax directly, so the
/// value stays finite even when a probability underflows.
inline double tuning_loss(const PromptSet& prompts, const std::vector<LabeledExample>& batch) {
    detail::require_batch(prompts, batch);
    double total = 0.0;
    for (const auto& e : batch) {
        const auto unit = normalized(e.embedding.vector);
        const auto logits = detail::logits(prompts, detail::class_scores(prompts, unit));
        const auto target = prompts.class_index(e.label);
        total += cross_entropy(logits, target);
    }
    return total / static_cast<double>(batch.size());
}

/// Analytic gradient of tuning_loss with respect to each anchor z_c.
///
/// With unit x, s_c = x.z_c / |z_c| and p = softmax(tau * s), each example
/// contributes tau * (p_c - y_c) * (x / |z_c| - s_c * z_c / |z_c|^2) to the
/// gradient of the anchor that attains the class maximum; other anchors of
/// the class receive nothing.
inline AnchorGradients tuning_gradient(const PromptSet& prompts, const std::vector<LabeledExample>& batch) {
    detail::require_batch(prompts, batch);
    const std::size_t dim = prompts.space.dimension;
    AnchorGradients grad(prompts.classes.size());
    for (std::size_t c = 0; c < prompts.classes.size(); ++c) {
        grad[c].assign(prompts.classes[c].anchors.size(), std::vector<double>(dim, 0.0));
    }

    const double scale = prompts.temperature / static_cast<double>(batch.size());
    for (const auto& e : batch) {
        const auto x = normalized(e.embedding.vector);
        const auto scores = detail::class_scores(prompts, x);
        const auto p = softmax(detail::logits(prompts, scores));
        const auto target = prompts.class_index(e.label);
        for (std::size_t c = 0; c < prompts.classes.size(); ++c) {
            // p_t - 1 rounds to zero once p_t saturates; the sum of the other
            // probabilities keeps the tiny residual exact
            double residual = p[c];
            if (c == target) {
                residual = 0.0;
                for (std::size_t j = 0; j < p.size(); ++j) {
                    if (j != target) residual -= p[j];
                }
            }
            if (residual == 0.0) continue;
            const auto a = scores.best_anchor[c];
            const auto& z = prompts.classes[c].anchors[a];
            const double norm = l2_norm(z);
            const double s = scores.similarity[c];
            auto& g = grad[c][a];
            const double coef = scale * residual;
            for (std::size_t i = 0; i < dim; ++i) {
                g[i] += coef * (x[i] / norm - s * z[i] / (norm * norm));
            }
        }
    }
    return grad;
}

struct TuneConfig {
    double learning_rate = 0.1;
    std::size_t max_epochs = 100;
    /// 0 means no limit beyond max_epochs.
    std::size_t max_steps = 0;
    std::size_t batch_size = 32;
    /// Overrides the prompt set's temperature when set.
    std::optional<double> temperature;
    std::size_t patience = 10;
    std::string early_stop_metric = "accuracy";  // accuracy | loss
    std::uint64_t seed = 0;
    bool renormalize = true;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            fail(ErrorCode::InvalidArgument, "learning rate must be finite and >= 0");
        }
        if (batch_size == 0) fail(ErrorCode::InvalidArgument, "batch size must be >= 1");
        if (patience == 0) fail(ErrorCode::InvalidArgument, "patience must be >= 1");
        if (max_epochs == 0) fail(ErrorCode::InvalidArgument, "max_epochs must be >= 1");
        if (temperature && !(*temperature > 0.0)) fail(ErrorCode::InvalidArgument, "temperature must be > 0");
        if (early_stop_metric != "accuracy" && early_stop_metric != "loss") {
            fail(ErrorCode::InvalidArgument, "early_stop_metric must be 'accuracy' or 'loss'");
        }
    }
};

inline nlohmann::json to_json(const TuneConfig& c) {
    nlohmann::json j{{"learning_rate", c.learning_rate},
                     {"max_epochs", c.max_epochs},
                     {"max_steps", c.max_steps},
                     {"batch_size", c.batch_size},
                     {"patience", c.patience},
                     {"early_stop_metric", c.early_stop_metric},
                     {"seed", c.seed},
                     {"renormalize", c.renormalize}};
    j["temperature"] = c.temperature ? nlohmann::json(*c.temperature) : nlohmann::json(nullptr);
    return j;
}

/// Missing keys keep their defaults.
inline TuneConfig tune_config_from_json(const nlohmann::json& j) {
    TuneConfig c;
    try {
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.patience = j.value("patience", c.patience);
        c.early_stop_metric = j.value("early_stop_metric", c.early_stop_metric);
        c.seed = j.value("seed", c.seed);
        c.renormalize = j.value("renormalize", c.renormalize);
        if (j.contains("temperature") && !j.at("temperature").is_null()) {
            c.temperature = j.at("temperature").get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("tune config: ") + e.what());
    }
    c.validate();
    return c;
}

enum class StopReason { MaxEpochs, MaxSteps, EarlyStop };

inline constexpr std::string_view to_string(StopReason r) noexcept {
    switch (r) {
        case StopReason::MaxEpochs: return "max_epochs";
        case StopReason::MaxSteps: return "max_steps";
        case StopReason::EarlyStop: return "early_stop";
    }
    return "unknown";
}

struct TuneReport {
    std::vector<double> loss_per_epoch;        // full training-set loss after each epoch
    std::vector<double> validation_per_epoch;  // early-stop metric after each epoch
    double initial_validation = 0.0;
    std::size_t best_epoch = 0;                // 0 = the initial prompts were never beaten
    PromptSet prompts;                         // best-validation snapshot
    std::size_t steps = 0;
    StopReason stop_reason = StopReason::MaxEpochs;
};

inline nlohmann::json to_json(const TuneReport& r) {
    return {{"loss_per_epoch", r.loss_per_epoch},
            {"validation_per_epoch", r.validation_per_epoch},
            {"initial_validation", r.initial_validation},
            {"best_epoch", r.best_epoch},
            {"steps", r.steps},
            {"stop_reason", std::string(to_string(r.stop_reason))},
            {"prompts", to_json(r.prompts)}};
}

/// Argmax accuracy of `prompts` on `examples`.
inline double accuracy(const PromptSet& prompts, const std::vector<LabeledExample>& examples) {
    if (examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& e : examples) {
        if (classify(prompts, e.embedding).predicted == prompts.class_index(e.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

/// Binary metrics with Offensive as the positive class.
inline Metrics evaluate(const PromptSet& prompts, const std::vector<LabeledExample>& examples) {
    ConfusionMatrix cm;
    const auto offensive = prompts.class_index(Label::Offensive);
    for (const auto& e : examples) {
        const bool pred = classify(prompts, e.embedding).predicted == offensive;
        const bool truth = e.label == Label::Offensive;
        if (pred && truth) ++cm.tp;
        else if (pred) ++cm.fp;
        else if (truth) ++cm.fn;
        else ++cm.tn;
    }
    return metrics_from_confusion(cm);
}

inline void apply_step(PromptSet& prompts, const AnchorGradients& grad, double lr, bool renormalize) {
    for (std::size_t c = 0; c < prompts.classes.size(); ++c) {
        for (std::size_t a = 0; a < prompts.classes[c].anchors.size(); ++a) {
            auto& z = prompts.classes[c].anchors[a];
            for (std::size_t i = 0; i < z.size(); ++i) {
                z[i] -= lr * grad[c][a][i];
                if (!std::isfinite(z[i])) fail(ErrorCode::Divergence, "anchor became non-finite");
            }
            if (renormalize) z = normalized(z);
        }
    }
}

/// Mini-batch projected gradient descent with early stopping. When
/// `validation` is empty the training set is monitored instead. Returns the
/// best-validation snapshot; bit-identical for identical inputs and seed.
using EpochCallback = std::function<void(std::size_t epoch, double loss, double validation)>;

inline TuneReport tune(const PromptSet& initial, const std::vector<LabeledExample>& train,
                       const std::vector<LabeledExample>& validation, const TuneConfig& config,
                       const EpochCallback& on_epoch = {}) {
    config.validate();
    if (train.empty()) fail(ErrorCode::EmptyTrainSet, "no training examples");
    initial.validate();

    PromptSet current = initial;
    if (config.temperature) current.temperature = *config.temperature;
    const auto& monitor = validation.empty() ? train : validation;
    const bool use_loss = config.early_stop_metric == "loss";
    // higher is better for both after negating loss
    auto score = [&](const PromptSet& p) {
        return use_loss ? -tuning_loss(p, monitor) : accuracy(p, monitor);
    };

    TuneReport report;
    double best = score(current);
    report.initial_validation = use_loss ? -best : best;
    report.prompts = current;
    std::size_t stale = 0;

    std::vector<std::size_t> order(train.size());
    std::vector<LabeledExample> batch;
    bool step_limit_hit = false;
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(mix_seed(config.seed, epoch));
        rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
            const auto grad = tuning_gradient(current, batch);
            for (const auto& per_class : grad) {
                for (const auto& g : per_class) {
                    for (double v : g) {
                        if (!std::isfinite(v)) fail(ErrorCode::Divergence, "non-finite gradient");
                    }
                }
            }
            apply_step(current, grad, config.learning_rate, config.renormalize);
            ++report.steps;
            if (config.max_steps != 0 && report.steps >= config.max_steps) {
                step_limit_hit = true;
                break;
            }
        }

        const double loss = tuning_loss(current, train);
        if (!std::isfinite(loss)) fail(ErrorCode::Divergence, "training loss became non-finite");
        report.loss_per_epoch.push_back(loss);
        const double s = score(current);
        report.validation_per_epoch.push_back(use_loss ? -s : s);
        if (on_epoch) on_epoch(epoch, loss, report.validation_per_epoch.back());
        if (s > best) {
            best = s;
            report.prompts = current;
            report.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= config.patience) {
            report.stop_reason = StopReason::EarlyStop;
            break;
        }
        if (step_limit_hit) {
            report.stop_reason = StopReason::MaxSteps;
            break;
        }
    }

    report.prompts.provenance.kind = "tuned";
    report.prompts.provenance.details = {{"config", to_json(config)},
                                         {"best_epoch", report.best_epoch},
                                         {"steps", report.steps},
                                         {"initialized_from", to_json(initial.provenance)}};
    // content-derived id so identical runs produce identical reports
    std::string fingerprint = to_json(config).dump();
    for (const auto& e : train) fingerprint += e.id() + (e.label == Label::Offensive ? "+" : "-");
    for (const auto& c : initial.classes) {
        for (const auto& a : c.anchors) fingerprint += std::to_string(a.front());
    }
    report.prompts.provenance.run_id = "tune-" + sha256_hex(fingerprint).substr(0, 12);
    return report;
}

struct CurvePoint {
    double fraction = 0.0;
    std::size_t train_size = 0;
    MeanStd accuracy;
    std::vector<double> accuracies;  // one per repeat
};

/// Test accuracy as a function of training-set fraction. Fraction 0 is the
/// untuned (zero-shot) prompt set.
inline std::vector<CurvePoint> learning_curve(const PromptSet& prompts, const std::vector<LabeledExample>& train,
                                              const std::vector<LabeledExample>& test,
                                              const std::vector<double>& fractions, const TuneConfig& config,
                                              std::size_t repeats = 1) {
    if (repeats == 0) fail(ErrorCode::InvalidArgument, "repeats must be >= 1");
    if (test.empty()) fail(ErrorCode::EmptyDataset, "test set is empty");
    std::vector<CurvePoint> curve;
    for (std::size_t f = 0; f < fractions.size(); ++f) {
        const double fraction = fractions[f];
        if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::InvalidArgument, "fractions must be in [0, 1]");
        CurvePoint point;
        point.fraction = fraction;
        if (fraction == 0.0) {
            point.accuracies.push_back(accuracy(prompts, test));
        } else {
            for (std::size_t r = 0; r < repeats; ++r) {
                const auto stream = mix_seed(config.seed, (f + 1) * 1000003ULL + r);
                const auto subset = stratified_subsample(train, fraction, stream);
                point.train_size = subset.size();
                TuneConfig run = config;
                run.seed = stream;
                const auto report = tune(prompts, subset, {}, run);
                point.accuracies.push_back(accuracy(report.prompts, test));
            }
        }
        point.accuracy = mean_std(point.accuracies);
        curve.push_back(std::move(point));
    }
    return curve;
}

}  // namespace offcurate
