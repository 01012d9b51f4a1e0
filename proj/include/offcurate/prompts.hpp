#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "offcurate/backend.hpp"
#include "offcurate/embedding.hpp"
#include "offcurate/smid.hpp"

namespace offcurate {

inline constexpr std::string_view kDefaultTemplate = "This image is about something {label}.";
inline constexpr double kDefaultTemperature = 100.0;
inline constexpr int kPromptSetVersion = 1;

struct PromptClass {
    std::string name;
    std::vector<std::vector<double>> anchors;  // unit-norm
};

struct Provenance {
    std::string kind = "manual";  // zero_shot | tuned | manual
    std::string template_text;
    std::vector<std::string> labels;
    std::string run_id;
    nlohmann::json details = nlohmann::json::object();
};

/// Class anchors in the joint space plus the softmax temperature. The
/// anchors are the object being tuned.
struct PromptSet {
    EmbeddingSpace space;
    double temperature = kDefaultTemperature;
    std::vector<PromptClass> classes;
    Provenance provenance;

    std::size_t class_index(std::string_view name) const {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i].name == name) return i;
        }
        fail(ErrorCode::InvalidArgument, "prompt set has no class '" + std::string(name) + "'");
    }
    std::size_t class_index(Label label) const { return class_index(to_string(label)); }

    /// Throws unless every anchor is finite, unit-norm and in `space`.
    void validate() const {
        if (!(temperature > 0.0) || !std::isfinite(temperature)) {
            fail(ErrorCode::InvalidArgument, "temperature must be positive");
        }
        if (classes.size() < 2) fail(ErrorCode::InvalidArgument, "need at least two classes");
        for (const auto& c : classes) {
            if (c.anchors.empty()) fail(ErrorCode::InvalidArgument, "class '" + c.name + "' has no anchor");
            for (const auto& a : c.anchors) {
                if (a.size() != space.dimension) {
                    fail(ErrorCode::DimensionMismatch, "anchor of '" + c.name + "' has dimension " +
                                                           std::to_string(a.size()));
                }
                check_finite(a);
                if (std::abs(l2_norm(a) - 1.0) > 1e-6) {
                    fail(ErrorCode::InvalidArgument, "anchor of '" + c.name + "' is not unit-norm");
                }
            }
        }
    }
};

/// Label-word presets: {NonOffensive word, Offensive word}.
inline const std::map<std::string, std::pair<std::string, std::string>>& label_presets() {
    static const std::map<std::string, std::pair<std::string, std::string>> presets{
        {"positive-negative", {"positive", "negative"}},
        {"good-bad-behavior", {"good behavior", "bad behavior"}},
        {"praiseworthy-blameworthy", {"praiseworthy", "blameworthy"}},
        {"moral-immoral", {"moral", "immoral"}},
    };
    return presets;
}

inline std::string fill_template(std::string_view templ, std::string_view label) {
    static constexpr std::string_view placeholder = "{label}";
    const auto first = templ.find(placeholder);
    if (first == std::string_view::npos || templ.find(placeholder, first + 1) != std::string_view::npos) {
        fail(ErrorCode::BadTemplate, "template must contain {label} exactly once: '" + std::string(templ) + "'");
    }
    std::string out(templ.substr(0, first));
    out += label;
    out += templ.substr(first + placeholder.size());
    return out;
}

/// One anchor per class from the filled template. `labels` follow the
/// class order [NonOffensive, Offensive].
inline PromptSet build_zero_shot(const EncoderBackend& backend, std::string_view templ,
                                 const std::vector<std::string>& labels,
                                 double temperature = kDefaultTemperature) {
    if (labels.size() != 2) fail(ErrorCode::InvalidArgument, "need one label word per class (2)");
    PromptSet set;
    set.space = backend.space();
    set.temperature = temperature;
    const std::string names[2] = {std::string(to_string(Label::NonOffensive)),
                                  std::string(to_string(Label::Offensive))};
    for (std::size_t i = 0; i < 2; ++i) {
        const auto prompt = fill_template(templ, labels[i]);
        set.classes.push_back({names[i], {encode_text(backend, prompt).vector}});
    }
    set.provenance.kind = "zero_shot";
    set.provenance.template_text = std::string(templ);
    set.provenance.labels = labels;
    set.validate();
    return set;
}

struct Classification {
    std::string id;
    std::vector<double> probabilities;
    std::size_t predicted = 0;
    double offensive_score = 0.0;
};

/// Numerically stable softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
    const double top = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - top));
    for (double& v : p) v /= sum;
    return p;
}

inline double log_sum_exp(std::span<const double> logits) {
    const double top = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits) sum += std::exp(l - top);
    return top + std::log(sum);
}

/// -log softmax(logits)[target], computed from the margins l_j - l_target so
/// that nearly saturated examples keep full relative precision.
inline double cross_entropy(std::span<const double> logits, std::size_t target) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j != target) top = std::max(top, logits[j] - logits[target]);
    }
    if (top <= 0.0) {
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.size(); ++j) {
            if (j != target) sum += std::exp(logits[j] - logits[target]);
        }
        return std::log1p(sum);
    }
    double sum = std::exp(-top);
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j != target) sum += std::exp(logits[j] - logits[target] - top);
    }
    return top + std::log(sum);
}

namespace detail {

struct ClassScores {
    std::vector<double> similarity;     // aggregated (max) cosine per class
    std::vector<std::size_t> best_anchor;
};

/// `x` must already be unit-norm.
inline ClassScores class_scores(const PromptSet& prompts, std::span<const double> x) {
    ClassScores s;
    for (const auto& c : prompts.classes) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t a = 0; a < c.anchors.size(); ++a) {
            const double sim = cosine_similarity(x, c.anchors[a]);
            if (sim > best) {
                best = sim;
                arg = a;
            }
        }
        s.similarity.push_back(best);
        s.best_anchor.push_back(arg);
    }
    return s;
}

inline std::vector<double> logits(const PromptSet& prompts, const ClassScores& s) {
    std::vector<double> l(s.similarity);
    for (double& v : l) v *= prompts.temperature;
    return l;
}

}  // namespace detail

/// Softmax over temperature-scaled max-cosine similarities to each class.
/// Argmax ties go to the earlier class.
inline Classification classify(const PromptSet& prompts, const Embedding& x) {
    if (x.dimension() != prompts.space.dimension) {
        fail(ErrorCode::DimensionMismatch, "embedding '" + x.id + "' has dimension " +
                                               std::to_string(x.dimension()) + ", prompts use " +
                                               std::to_string(prompts.space.dimension));
    }
    const auto unit = normalized(x.vector);
    const auto scores = detail::class_scores(prompts, unit);
    Classification out;
    out.id = x.id;
    out.probabilities = softmax(detail::logits(prompts, scores));
    out.predicted = static_cast<std::size_t>(
        std::max_element(out.probabilities.begin(), out.probabilities.end()) - out.probabilities.begin());
    out.offensive_score = out.probabilities[prompts.class_index(Label::Offensive)];
    return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Provenance& p) {
    nlohmann::json j{{"kind", p.kind}};
    if (!p.template_text.empty()) j["template"] = p.template_text;
    if (!p.labels.empty()) j["labels"] = p.labels;
    if (!p.run_id.empty()) j["run_id"] = p.run_id;
    if (!p.details.empty()) j["details"] = p.details;
    return j;
}

inline Provenance provenance_from_json(const nlohmann::json& j) {
    Provenance p;
    p.kind = j.value("kind", std::string("manual"));
    p.template_text = j.value("template", std::string());
    p.labels = j.value("labels", std::vector<std::string>{});
    p.run_id = j.value("run_id", std::string());
    p.details = j.value("details", nlohmann::json::object());
    return p;
}

/// Anchors are written as f32 values.
inline nlohmann::json to_json(const PromptSet& set) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : set.classes) {
        nlohmann::json anchors = nlohmann::json::array();
        for (const auto& a : c.anchors) {
            nlohmann::json values = nlohmann::json::array();
            for (double v : a) values.push_back(static_cast<float>(v));
            anchors.push_back(std::move(values));
        }
        classes.push_back({{"name", c.name}, {"anchors", std::move(anchors)}});
    }
    return {{"version", kPromptSetVersion},
            {"backend_id", set.space.backend_id},
            {"dimension", set.space.dimension},
            {"temperature", set.temperature},
            {"classes", std::move(classes)},
            {"provenance", to_json(set.provenance)}};
}

/// Anchors are renormalized after the f32 round trip; anything further than
/// 1e-4 from unit norm is rejected.
inline PromptSet prompt_set_from_json(const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != kPromptSetVersion) {
            fail(ErrorCode::VersionUnsupported, "prompt set version " + j.at("version").dump());
        }
        PromptSet set;
        set.space.backend_id = j.at("backend_id").get<std::string>();
        set.space.dimension = j.at("dimension").get<std::size_t>();
        set.temperature = j.at("temperature").get<double>();
        for (const auto& c : j.at("classes")) {
            PromptClass pc{c.at("name").get<std::string>(), {}};
            for (const auto& a : c.at("anchors")) {
                std::vector<double> v;
                for (const auto& x : a) v.push_back(static_cast<double>(x.get<float>()));
                const double n = l2_norm(v);
                if (std::abs(n - 1.0) > 1e-4) fail(ErrorCode::InvalidArgument, "anchor is not unit-norm");
                pc.anchors.push_back(normalized(v));
            }
            set.classes.push_back(std::move(pc));
        }
        set.provenance = provenance_from_json(j.value("provenance", nlohmann::json::object()));
        set.validate();
        (void)set.class_index(Label::Offensive);
        return set;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("prompt set: ") + e.what());
    }
}

inline void save_prompt_set(const std::filesystem::path& path, const PromptSet& set) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
    out << to_json(set).dump(2) << '\n';
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

inline PromptSet load_prompt_set(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    try {
        return prompt_set_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::ParseFailure, path.string() + ": " + e.what());
    }
}

}  // namespace offcurate
