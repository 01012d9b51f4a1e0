#pragma once

// Moral-rating protocol: rating ingestion, three-way discretization,
// stratified splits and folds, binary metrics and cross-validation summaries.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "offcurate/csv.hpp"
#include "offcurate/embedding.hpp"
#include "offcurate/random.hpp"

namespace offcurate {

/// Binary label. The numeric value is the class index in the default
/// prompt ordering [NonOffensive, Offensive].
enum class Label : int { NonOffensive = 0, Offensive = 1 };

inline constexpr std::string_view to_string(Label l) noexcept {
    return l == Label::Offensive ? "Offensive" : "NonOffensive";
}

enum class RatingClass { Offensive, NonOffensive, Excluded };

struct Thresholds {
    double negative = 2.5;
    double positive = 3.5;
};

inline constexpr Thresholds kSmidThresholds{2.5, 3.5};
/// Stricter preset targeting strongly offensive material.
inline constexpr Thresholds kStrongOffensiveThresholds{1.5, 3.5};

inline constexpr double kMinRating = 1.0;
inline constexpr double kMaxRating = 5.0;

/// Strict inequalities on both sides: ratings equal to a threshold fall in
/// the neutral band.
inline RatingClass discretize_rating(double moral_mean, Thresholds t = kSmidThresholds) {
    if (!std::isfinite(t.negative) || !std::isfinite(t.positive) || t.negative > t.positive) {
        fail(ErrorCode::InvalidThresholds, "need negative_threshold <= positive_threshold");
    }
    if (!std::isfinite(moral_mean) || moral_mean < kMinRating || moral_mean > kMaxRating) {
        fail(ErrorCode::RatingOutOfRange, "rating " + std::to_string(moral_mean) + " outside [1, 5]");
    }
    if (moral_mean < t.negative) return RatingClass::Offensive;
    if (moral_mean > t.positive) return RatingClass::NonOffensive;
    return RatingClass::Excluded;
}

struct RatedImage {
    std::string id;
    std::string path;
    double moral_mean = 0.0;
    /// Remaining CSV columns, carried through untouched.
    std::map<std::string, std::string> extra;
};

struct ColumnMap {
    std::string id_column;
    std::string rating_column;
    /// Optional; when empty, `path` is left empty.
    std::string path_column;
};

inline double parse_real(std::string_view text, std::size_t line) {
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(value)) {
        fail(ErrorCode::ParseFailure, "row on line " + std::to_string(line) + ": '" + std::string(text) +
                                          "' is not a number");
    }
    return value;
}

inline std::vector<RatedImage> parse_ratings(std::string_view csv_text, const ColumnMap& columns) {
    if (columns.id_column.empty() || columns.rating_column.empty()) {
        fail(ErrorCode::MissingColumn, "column map must name the id and rating columns");
    }
    const auto records = parse_csv(csv_text);
    if (records.empty()) fail(ErrorCode::ParseFailure, "ratings file has no header row");
    const auto& header = records.front().fields;
    auto column_index = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) fail(ErrorCode::MissingColumn, "no column named '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto id_col = column_index(columns.id_column);
    const auto rating_col = column_index(columns.rating_column);
    constexpr std::size_t no_column = static_cast<std::size_t>(-1);
    const std::size_t path_col = columns.path_column.empty() ? no_column : column_index(columns.path_column);

    std::vector<RatedImage> out;
    std::unordered_set<std::string> seen;
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.fields.size() != header.size()) {
            fail(ErrorCode::ParseFailure, "row on line " + std::to_string(rec.line) + " has " +
                                              std::to_string(rec.fields.size()) + " fields, header has " +
                                              std::to_string(header.size()));
        }
        RatedImage img;
        img.id = rec.fields[id_col];
        if (img.id.empty()) fail(ErrorCode::ParseFailure, "empty id on line " + std::to_string(rec.line));
        img.moral_mean = parse_real(rec.fields[rating_col], rec.line);
        if (img.moral_mean < kMinRating || img.moral_mean > kMaxRating) {
            fail(ErrorCode::RatingOutOfRange, "rating on line " + std::to_string(rec.line) + " outside [1, 5]");
        }
        if (path_col != no_column) img.path = rec.fields[path_col];
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (c != id_col && c != rating_col && c != path_col) {
                img.extra.emplace(header[c], rec.fields[c]);
            }
        }
        if (!seen.insert(img.id).second) {
            fail(ErrorCode::DuplicateId, "id '" + img.id + "' repeated on line " + std::to_string(rec.line));
        }
        out.push_back(std::move(img));
    }
    return out;
}

inline std::vector<RatedImage> load_ratings(const std::filesystem::path& path, const ColumnMap& columns) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_ratings(buffer.str(), columns);
}

struct LabeledExample {
    Embedding embedding;
    Label label = Label::NonOffensive;

    const std::string& id() const noexcept { return embedding.id; }
};

// ---------------------------------------------------------------------------
// Splits and folds

namespace detail {

/// Examples grouped by label (NonOffensive, Offensive), each group sorted by
/// id and then shuffled with a label-specific stream of `seed`.
template <typename T, typename LabelOf, typename IdOf>
std::array<std::vector<T>, 2> shuffled_groups(const std::vector<T>& items, std::uint64_t seed,
                                              LabelOf label_of, IdOf id_of) {
    std::array<std::vector<T>, 2> groups;
    for (const auto& item : items) groups[static_cast<int>(label_of(item))].push_back(item);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::sort(groups[g].begin(), groups[g].end(),
                  [&](const T& a, const T& b) { return id_of(a) < id_of(b); });
        Rng rng(mix_seed(seed, g));
        rng.shuffle(groups[g]);
    }
    return groups;
}

/// Largest-remainder allocation of round(total * fraction) across groups.
inline std::array<std::size_t, 2> allocate(const std::array<std::size_t, 2>& sizes, double fraction) {
    const std::size_t total = sizes[0] + sizes[1];
    const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(total) * fraction));
    std::array<std::size_t, 2> quota{};
    std::array<double, 2> remainder{};
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < 2; ++g) {
        const double exact = static_cast<double>(sizes[g]) * fraction;
        quota[g] = static_cast<std::size_t>(std::floor(exact));
        remainder[g] = exact - std::floor(exact);
        assigned += quota[g];
    }
    std::array<std::size_t, 2> order{0, 1};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t g : order) {
        if (assigned >= target) break;
        if (quota[g] < sizes[g]) {
            ++quota[g];
            ++assigned;
        }
    }
    return quota;
}

}  // namespace detail

struct Split {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
};

inline std::array<std::size_t, 2> class_counts(const std::vector<LabeledExample>& examples) {
    std::array<std::size_t, 2> counts{};
    for (const auto& e : examples) ++counts[static_cast<int>(e.label)];
    return counts;
}

/// Stratified train/test split, deterministic under `seed` and independent
/// of input order. Every class keeps at least one member on each side.
inline Split train_test_split(const std::vector<LabeledExample>& examples, double test_fraction,
                              std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        fail(ErrorCode::InvalidArgument, "test_fraction must be in (0, 1)");
    }
    const auto counts = class_counts(examples);
    for (std::size_t g = 0; g < 2; ++g) {
        if (counts[g] < 2) {
            fail(ErrorCode::TooFewExamples, std::string(to_string(static_cast<Label>(g))) + " has " +
                                                std::to_string(counts[g]) + " examples, need >= 2");
        }
    }
    auto groups = detail::shuffled_groups(
        examples, seed, [](const LabeledExample& e) { return e.label; },
        [](const LabeledExample& e) -> const std::string& { return e.id(); });
    auto quota = detail::allocate(counts, test_fraction);
    Split split;
    for (std::size_t g = 0; g < 2; ++g) {
        const std::size_t q = std::clamp<std::size_t>(quota[g], 1, counts[g] - 1);
        for (std::size_t i = 0; i < groups[g].size(); ++i) {
            (i < q ? split.test : split.train).push_back(std::move(groups[g][i]));
        }
    }
    return split;
}

/// Stratified subsample holding round(|examples| * fraction) items (at least
/// one per present class for fraction > 0). fraction 1 returns everything.
inline std::vector<LabeledExample> stratified_subsample(const std::vector<LabeledExample>& examples,
                                                        double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::InvalidArgument, "fraction must be in [0, 1]");
    if (fraction == 0.0) return {};
    const auto counts = class_counts(examples);
    auto groups = detail::shuffled_groups(
        examples, seed, [](const LabeledExample& e) { return e.label; },
        [](const LabeledExample& e) -> const std::string& { return e.id(); });
    const auto quota = detail::allocate(counts, fraction);
    std::vector<LabeledExample> out;
    for (std::size_t g = 0; g < 2; ++g) {
        const std::size_t q = counts[g] == 0 ? 0 : std::clamp<std::size_t>(quota[g], 1, counts[g]);
        for (std::size_t i = 0; i < q; ++i) out.push_back(std::move(groups[g][i]));
    }
    return out;
}

struct FoldPlan {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::size_t> assignment;

    std::vector<std::string> fold_ids(std::size_t fold) const {
        std::vector<std::string> ids;
        for (const auto& [id, f] : assignment) {
            if (f == fold) ids.push_back(id);
        }
        return ids;
    }
};

/// Stratified k-fold partition: each class is shuffled and dealt round-robin,
/// continuing across classes, so per-class and total fold sizes differ by at
/// most one.
inline FoldPlan make_folds(const std::vector<LabeledExample>& examples, std::size_t k, std::uint64_t seed) {
    if (k < 2) fail(ErrorCode::InvalidArgument, "k must be >= 2");
    const auto counts = class_counts(examples);
    for (std::size_t g = 0; g < 2; ++g) {
        if (counts[g] < k) {
            fail(ErrorCode::TooFewExamples, std::string(to_string(static_cast<Label>(g))) + " has " +
                                                std::to_string(counts[g]) + " examples, need >= k = " +
                                                std::to_string(k));
        }
    }
    const auto groups = detail::shuffled_groups(
        examples, seed, [](const LabeledExample& e) { return e.label; },
        [](const LabeledExample& e) -> const std::string& { return e.id(); });
    FoldPlan plan{k, seed, {}};
    std::size_t position = 0;
    // Offensive first, then NonOffensive
    for (int g : {1, 0}) {
        for (const auto& e : groups[static_cast<std::size_t>(g)]) {
            if (!plan.assignment.emplace(e.id(), position++ % k).second) {
                fail(ErrorCode::DuplicateId, "id '" + e.id() + "' appears twice");
            }
        }
    }
    return plan;
}

/// Train/test examples for one fold of a plan.
inline Split fold_split(const std::vector<LabeledExample>& examples, const FoldPlan& plan, std::size_t fold) {
    Split split;
    for (const auto& e : examples) {
        const auto it = plan.assignment.find(e.id());
        if (it == plan.assignment.end()) fail(ErrorCode::IdMismatch, "id '" + e.id() + "' not in fold plan");
        (it->second == fold ? split.test : split.train).push_back(e);
    }
    return split;
}

inline nlohmann::json fold_plan_to_json(const FoldPlan& plan) {
    nlohmann::json assignments = nlohmann::json::object();
    for (const auto& [id, fold] : plan.assignment) assignments[id] = fold;
    return {{"seed", plan.seed}, {"k", plan.k}, {"assignments", assignments}};
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j) {
    FoldPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.k = j.at("k").get<std::size_t>();
    for (const auto& [id, fold] : j.at("assignments").items()) {
        const auto f = fold.get<std::size_t>();
        if (f >= plan.k) fail(ErrorCode::ParseFailure, "fold index out of range for '" + id + "'");
        plan.assignment.emplace(id, f);
    }
    return plan;
}

inline nlohmann::json split_to_json(const Split& split, double test_fraction, std::uint64_t seed) {
    nlohmann::json assignments = nlohmann::json::object();
    for (const auto& e : split.train) assignments[e.id()] = "train";
    for (const auto& e : split.test) assignments[e.id()] = "test";
    return {{"seed", seed}, {"test_fraction", test_fraction}, {"assignments", assignments}};
}

// ---------------------------------------------------------------------------
// Metrics

struct ConfusionMatrix {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support_positive = 0;
    std::size_t support_negative = 0;
    /// Set when precision (or recall) had a zero denominator and was reported as 0.
    bool precision_undefined = false;
    bool recall_undefined = false;
};

inline Metrics metrics_from_confusion(const ConfusionMatrix& cm) {
    Metrics m;
    const auto total = cm.total();
    m.accuracy = total == 0 ? 0.0 : static_cast<double>(cm.tp + cm.tn) / static_cast<double>(total);
    if (cm.tp + cm.fp == 0) {
        m.precision_undefined = true;
    } else {
        m.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
    }
    if (cm.tp + cm.fn == 0) {
        m.recall_undefined = true;
    } else {
        m.recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
    }
    const double pr = m.precision + m.recall;
    m.f1 = pr > 0.0 ? 2.0 * m.precision * m.recall / pr : 0.0;
    m.support_positive = cm.tp + cm.fn;
    m.support_negative = cm.fp + cm.tn;
    return m;
}

inline ConfusionMatrix confusion(const std::unordered_map<std::string, Label>& predictions,
                                 const std::unordered_map<std::string, Label>& truth,
                                 Label positive = Label::Offensive) {
    if (predictions.size() != truth.size()) {
        fail(ErrorCode::IdMismatch, std::to_string(predictions.size()) + " predictions for " +
                                        std::to_string(truth.size()) + " labels");
    }
    ConfusionMatrix cm;
    for (const auto& [id, actual] : truth) {
        const auto it = predictions.find(id);
        if (it == predictions.end()) fail(ErrorCode::IdMismatch, "no prediction for '" + id + "'");
        const bool pred_pos = it->second == positive;
        const bool true_pos = actual == positive;
        if (pred_pos && true_pos) ++cm.tp;
        else if (pred_pos) ++cm.fp;
        else if (true_pos) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

inline Metrics compute_metrics(const std::unordered_map<std::string, Label>& predictions,
                               const std::unordered_map<std::string, Label>& truth,
                               Label positive = Label::Offensive) {
    return metrics_from_confusion(confusion(predictions, truth, positive));
}

inline nlohmann::json to_json(const Metrics& m) {
    return {{"accuracy", m.accuracy},
            {"precision", m.precision},
            {"recall", m.recall},
            {"f1", m.f1},
            {"support", {{"Offensive", m.support_positive}, {"NonOffensive", m.support_negative}}},
            {"precision_undefined", m.precision_undefined},
            {"recall_undefined", m.recall_undefined}};
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1)
};

inline MeanStd mean_std(const std::vector<double>& values) {
    MeanStd out;
    if (values.empty()) return out;
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

struct CvSummary {
    MeanStd accuracy, precision, recall, f1;
};

inline CvSummary aggregate_cv(const std::vector<Metrics>& per_fold) {
    if (per_fold.size() < 2) fail(ErrorCode::TooFewFolds, "need metrics from at least 2 folds");
    auto column = [&](double Metrics::*field) {
        std::vector<double> v;
        for (const auto& m : per_fold) v.push_back(m.*field);
        return mean_std(v);
    };
    return {column(&Metrics::accuracy), column(&Metrics::precision), column(&Metrics::recall),
            column(&Metrics::f1)};
}

inline nlohmann::json to_json(const CvSummary& s) {
    auto ms = [](const MeanStd& v) { return nlohmann::json{{"mean", v.mean}, {"std", v.std}}; };
    return {{"accuracy", ms(s.accuracy)},
            {"precision", ms(s.precision)},
            {"recall", ms(s.recall)},
            {"f1", ms(s.f1)}};
}

}  // namespace offcurate
