#pragma once

// Rated images joined with cached embeddings, and k-fold evaluation of the
// zero-shot, tuned-prompt and linear-probe classifiers.

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "offcurate/cache.hpp"
#include "offcurate/error.hpp"
#include "offcurate/linear_probe.hpp"
#include "offcurate/prompts.hpp"
#include "offcurate/smid.hpp"
#include "offcurate/tuning.hpp"

namespace offcurate {

struct LabeledSet {
    std::vector<LabeledExample> examples;
    std::size_t excluded = 0;  // ratings between the thresholds
};

/// Labels every rated image outside the neutral band and attaches its cached
/// embedding. The cache id is the path column when present, otherwise the
/// rating id, falling back to a unique cache id with the same stem
/// ("img_1" matches "img_1.jpg").
inline LabeledSet label_examples(const EmbeddingCache& cache, const std::vector<RatedImage>& ratings,
                                 Thresholds thresholds = kSmidThresholds) {
    std::unordered_map<std::string, std::optional<std::size_t>> by_stem;
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const auto& id = cache.ids()[i];
        const auto stem = (std::filesystem::path(id).parent_path() / std::filesystem::path(id).stem()).string();
        auto [it, inserted] = by_stem.emplace(stem, i);
        if (!inserted) it->second.reset();  // ambiguous
    }

    LabeledSet out;
    std::vector<std::string> missing;
    for (const auto& r : ratings) {
        const auto cls = discretize_rating(r.moral_mean, thresholds);
        if (cls == RatingClass::Excluded) {
            ++out.excluded;
            continue;
        }
        const std::string key = r.path.empty() ? r.id : r.path;
        auto index = cache.find(key);
        if (!index) {
            const auto it = by_stem.find(key);
            if (it != by_stem.end()) index = it->second;
        }
        if (!index) {
            missing.push_back(key);
            continue;
        }
        auto e = cache.embedding(*index);
        e.id = r.id;
        out.examples.push_back({std::move(e), cls == RatingClass::Offensive ? Label::Offensive : Label::NonOffensive});
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
        if (missing.size() > 20) list += ", ...";
        fail(ErrorCode::MissingEmbeddings,
             std::to_string(missing.size()) + " rated images have no cached embedding: " + list);
    }
    return out;
}

enum class EvalMode { ZeroShot, Tune, Probe };

inline constexpr std::string_view to_string(EvalMode m) noexcept {
    switch (m) {
        case EvalMode::ZeroShot: return "zero-shot";
        case EvalMode::Tune: return "tune";
        case EvalMode::Probe: return "probe";
    }
    return "zero-shot";
}

inline EvalMode eval_mode_from_string(std::string_view s) {
    if (s == "zero-shot") return EvalMode::ZeroShot;
    if (s == "tune") return EvalMode::Tune;
    if (s == "probe") return EvalMode::Probe;
    fail(ErrorCode::InvalidArgument, "mode must be zero-shot, tune or probe");
}

struct EvalOptions {
    EvalMode mode = EvalMode::Tune;
    std::size_t folds = 10;
    std::uint64_t seed = 0;
    TuneConfig tune;
    /// Share of each training fold held out for early stopping (0 = monitor
    /// the training set).
    double validation_fraction = 0.1;
    double probe_regularization = 1e-3;
    std::size_t workers = 1;
};

struct FoldResult {
    std::size_t fold = 0;
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    Metrics metrics;
    nlohmann::json detail = nlohmann::json::object();  // tuning curve etc.
};

struct EvalResult {
    FoldPlan plan;
    std::vector<FoldResult> folds;
    CvSummary summary;
};

namespace detail {

inline std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>> validation_split(
    const std::vector<LabeledExample>& train, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0) return {train, {}};
    auto split = train_test_split(train, fraction, seed);
    return {std::move(split.train), std::move(split.test)};
}

}  // namespace detail

/// Tunes `initial` on `examples`, holding out `validation_fraction` for
/// early stopping.
inline TuneReport tune_with_validation(const PromptSet& initial, const std::vector<LabeledExample>& examples,
                                       const TuneConfig& config, double validation_fraction) {
    const auto [train, validation] = detail::validation_split(examples, validation_fraction, mix_seed(config.seed, 1));
    return tune(initial, train, validation, config);
}

/// Stratified k-fold evaluation. Folds run in parallel up to `workers`; the
/// result does not depend on the worker count.
inline EvalResult cross_validate(const PromptSet* initial, const std::vector<LabeledExample>& examples,
                                 const EvalOptions& options) {
    if (options.folds < 2) fail(ErrorCode::InvalidArgument, "--folds must be >= 2");
    if (options.workers == 0) fail(ErrorCode::InvalidArgument, "workers must be >= 1");
    if (options.mode != EvalMode::Probe && !initial) {
        fail(ErrorCode::InvalidArgument, "zero-shot and tune modes need an initial prompt set");
    }
    if (options.mode == EvalMode::Tune) options.tune.validate();

    EvalResult result;
    result.plan = make_folds(examples, options.folds, options.seed);
    result.folds.resize(options.folds);
    std::vector<std::exception_ptr> errors(options.folds);

    auto run_fold = [&](std::size_t f) {
        try {
            const auto split = fold_split(examples, result.plan, f);
            FoldResult& out = result.folds[f];
            out.fold = f;
            out.train_size = split.train.size();
            out.test_size = split.test.size();
            switch (options.mode) {
                case EvalMode::ZeroShot: out.metrics = evaluate(*initial, split.test); break;
                case EvalMode::Probe:
                    out.metrics = linear_probe_baseline(split.train, split.test, options.probe_regularization);
                    break;
                case EvalMode::Tune: {
                    TuneConfig config = options.tune;
                    config.seed = mix_seed(options.seed, 1000 + f);
                    const auto report = tune_with_validation(*initial, split.train, config, options.validation_fraction);
                    out.metrics = evaluate(report.prompts, split.test);
                    out.detail = to_json(report);
                    out.detail.erase("prompts");
                    out.detail["zero_shot_accuracy"] = accuracy(*initial, split.test);
                    break;
                }
            }
        } catch (...) {
            errors[f] = std::current_exception();
        }
    };

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t f = next++; f < options.folds; f = next++) run_fold(f);
    };
    const std::size_t threads = std::min(options.workers, options.folds);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    std::vector<Metrics> metrics;
    for (const auto& f : result.folds) metrics.push_back(f.metrics);
    result.summary = aggregate_cv(metrics);
    return result;
}

inline nlohmann::json to_json(const EvalResult& r, EvalMode mode) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.folds) {
        nlohmann::json j{{"fold", f.fold},
                         {"train_size", f.train_size},
                         {"test_size", f.test_size},
                         {"metrics", to_json(f.metrics)}};
        if (!f.detail.empty()) j["tuning"] = f.detail;
        folds.push_back(std::move(j));
    }
    return {{"mode", std::string(to_string(mode))},
            {"folds", r.plan.k},
            {"seed", r.plan.seed},
            {"summary", to_json(r.summary)},
            {"per_fold", folds},
            {"fold_plan", fold_plan_to_json(r.plan)}};
}

}  // namespace offcurate
