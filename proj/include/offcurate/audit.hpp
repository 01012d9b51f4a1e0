#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "offcurate/cache.hpp"
#include "offcurate/prompts.hpp"

namespace offcurate {

struct AuditRecord {
    std::string id;
    std::string class_dir;
    double offensive_score = 0.0;
    std::string predicted;
    bool flagged = false;

    friend bool operator==(const AuditRecord&, const AuditRecord&) = default;
};

struct ClassCount {
    std::string class_dir;
    std::size_t flagged = 0;

    friend bool operator==(const ClassCount&, const ClassCount&) = default;
};

struct AuditSummary {
    std::size_t total_scanned = 0;
    std::size_t total_flagged = 0;
    /// Classes with at least one flag; descending count, then name.
    std::vector<ClassCount> per_class;
    double flag_threshold = 0.5;
    std::string backend_id;
    nlohmann::json prompt_provenance = nlohmann::json::object();
    /// Left unset by default so reruns stay byte-identical.
    std::optional<std::string> timestamp;
};

/// Name of the directory that directly contains the image, or "" for files
/// at the dataset root.
inline std::string class_dir_of(std::string_view id) {
    const auto slash = id.rfind('/');
    if (slash == std::string_view::npos) return {};
    const auto parent = id.substr(0, slash);
    const auto prev = parent.rfind('/');
    return std::string(prev == std::string_view::npos ? parent : parent.substr(prev + 1));
}

inline std::string format_score(double score) {
    char buffer[32];
    std::snprintf(buffer, sizeof buffer, "%.6f", score);
    return buffer;
}

/// One JSON object per line, fixed key order, score at 6 decimals.
inline std::string to_jsonl(const AuditRecord& r) {
    std::string line = "{\"id\":" + nlohmann::json(r.id).dump();
    line += ",\"class_dir\":" + nlohmann::json(r.class_dir).dump();
    line += ",\"offensive_score\":" + format_score(r.offensive_score);
    line += ",\"predicted\":" + nlohmann::json(r.predicted).dump();
    line += std::string(",\"flagged\":") + (r.flagged ? "true" : "false") + "}";
    return line;
}

inline AuditRecord audit_record_from_json(const nlohmann::json& j) {
    try {
        return {j.at("id").get<std::string>(), j.at("class_dir").get<std::string>(),
                j.at("offensive_score").get<double>(), j.at("predicted").get<std::string>(),
                j.at("flagged").get<bool>()};
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("audit record: ") + e.what());
    }
}

inline std::vector<AuditRecord> read_audit_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
    std::vector<AuditRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            records.push_back(audit_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorCode::ParseFailure, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

/// Folds one record into a summary; order-independent apart from the final
/// sort done by finish_summary.
class SummaryBuilder {
public:
    void add(const AuditRecord& r) {
        ++scanned_;
        if (r.flagged) {
            ++flagged_;
            ++counts_[r.class_dir];
        }
    }

    AuditSummary finish(double threshold, std::string backend_id, nlohmann::json provenance) const {
        AuditSummary s;
        s.total_scanned = scanned_;
        s.total_flagged = flagged_;
        for (const auto& [name, n] : counts_) s.per_class.push_back({name, n});
        std::stable_sort(s.per_class.begin(), s.per_class.end(),
                         [](const ClassCount& a, const ClassCount& b) { return a.flagged > b.flagged; });
        s.flag_threshold = threshold;
        s.backend_id = std::move(backend_id);
        s.prompt_provenance = std::move(provenance);
        return s;
    }

private:
    std::size_t scanned_ = 0;
    std::size_t flagged_ = 0;
    std::map<std::string, std::size_t> counts_;
};

inline nlohmann::json to_json(const AuditSummary& s) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& c : s.per_class) per_class.push_back({{"class_dir", c.class_dir}, {"flagged", c.flagged}});
    nlohmann::json run{{"flag_threshold", s.flag_threshold},
                       {"backend_id", s.backend_id},
                       {"prompt_provenance", s.prompt_provenance}};
    if (s.timestamp) run["timestamp"] = *s.timestamp;
    return {{"version", 1},
            {"total_scanned", s.total_scanned},
            {"total_flagged", s.total_flagged},
            {"per_class", per_class},
            {"run", run}};
}

inline AuditSummary audit_summary_from_json(const nlohmann::json& j) {
    try {
        AuditSummary s;
        s.total_scanned = j.at("total_scanned").get<std::size_t>();
        s.total_flagged = j.at("total_flagged").get<std::size_t>();
        for (const auto& c : j.at("per_class")) {
            s.per_class.push_back({c.at("class_dir").get<std::string>(), c.at("flagged").get<std::size_t>()});
        }
        const auto& run = j.at("run");
        s.flag_threshold = run.at("flag_threshold").get<double>();
        s.backend_id = run.at("backend_id").get<std::string>();
        s.prompt_provenance = run.value("prompt_provenance", nlohmann::json::object());
        if (run.contains("timestamp")) s.timestamp = run.at("timestamp").get<std::string>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("audit summary: ") + e.what());
    }
}

struct ScanOptions {
    double flag_threshold = 0.5;
    std::size_t workers = 1;
    std::size_t batch_size = 4096;
};

/// Scores every cached embedding, streams one record per image to `sink` in
/// cache order and returns the matching summary. Output does not depend on
/// the worker count.
inline AuditSummary scan(const EmbeddingCache& cache, const PromptSet& prompts, const ScanOptions& options,
                         const std::function<void(const AuditRecord&)>& sink) {
    if (!(options.flag_threshold > 0.0 && options.flag_threshold < 1.0)) {
        fail(ErrorCode::InvalidArgument, "flag threshold must be in (0, 1)");
    }
    if (options.workers == 0 || options.batch_size == 0) {
        fail(ErrorCode::InvalidArgument, "workers and batch size must be >= 1");
    }
    if (cache.empty()) fail(ErrorCode::EmptyDataset, "cache holds no embeddings");
    require_same_space(cache.space(), prompts.space);
    prompts.validate();

    SummaryBuilder builder;
    std::vector<AuditRecord> batch;
    for (std::size_t start = 0; start < cache.size(); start += options.batch_size) {
        const std::size_t end = std::min(cache.size(), start + options.batch_size);
        batch.assign(end - start, AuditRecord{});
        auto score_range = [&](std::size_t from, std::size_t to) {
            for (std::size_t i = from; i < to; ++i) {
                const auto result = classify(prompts, cache.embedding(i));
                auto& r = batch[i - start];
                r.id = cache.ids()[i];
                r.class_dir = class_dir_of(r.id);
                r.offensive_score = result.offensive_score;
                r.predicted = prompts.classes[result.predicted].name;
                r.flagged = result.offensive_score > options.flag_threshold;
            }
        };
        const std::size_t n = end - start;
        const std::size_t threads = std::min(options.workers, n);
        if (threads <= 1) {
            score_range(start, end);
        } else {
            std::vector<std::jthread> pool;
            const std::size_t chunk = (n + threads - 1) / threads;
            for (std::size_t t = 0; t < threads; ++t) {
                const std::size_t from = start + t * chunk;
                const std::size_t to = std::min(end, from + chunk);
                if (from < to) pool.emplace_back(score_range, from, to);
            }
        }
        for (const auto& r : batch) {
            builder.add(r);
            sink(r);
        }
    }
    return builder.finish(options.flag_threshold, cache.space().backend_id, to_json(prompts.provenance));
}

inline AuditSummary summarize(const std::vector<AuditRecord>& records, double threshold, std::string backend_id,
                              nlohmann::json provenance) {
    SummaryBuilder builder;
    for (const auto& r : records) builder.add(r);
    return builder.finish(threshold, std::move(backend_id), std::move(provenance));
}

/// Descending score, ascending id on ties.
inline bool record_before(const AuditRecord& a, const AuditRecord& b) {
    if (a.offensive_score != b.offensive_score) return a.offensive_score > b.offensive_score;
    return a.id < b.id;
}

inline std::vector<AuditRecord> top_flagged(std::vector<AuditRecord> records, std::size_t k) {
    if (k == 0) fail(ErrorCode::InvalidArgument, "k must be >= 1");
    const std::size_t n = std::min(k, records.size());
    std::partial_sort(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(n), records.end(),
                      record_before);
    records.resize(n);
    return records;
}

struct ExemplarGroup {
    std::string class_dir;
    std::vector<AuditRecord> records;
};

/// Top k per class_dir. Groups are ordered by descending group size, then
/// name.
inline std::vector<ExemplarGroup> top_flagged_by_class(const std::vector<AuditRecord>& records, std::size_t k) {
    if (k == 0) fail(ErrorCode::InvalidArgument, "k must be >= 1");
    std::map<std::string, std::vector<AuditRecord>> by_class;
    for (const auto& r : records) by_class[r.class_dir].push_back(r);
    std::vector<std::pair<std::size_t, ExemplarGroup>> sized;
    for (auto& [name, group] : by_class) {
        const auto size = group.size();
        sized.push_back({size, {name, top_flagged(std::move(group), k)}});
    }
    std::stable_sort(sized.begin(), sized.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<ExemplarGroup> out;
    for (auto& [size, group] : sized) out.push_back(std::move(group));
    return out;
}

struct AnchorEvidence {
    std::string class_name;
    std::size_t anchor_index = 0;
    double record_similarity = 0.0;  // cosine between the record and this anchor
    std::vector<Neighbor> neighbors;
};

struct Evidence {
    std::string id;
    double offensive_score = 0.0;
    std::vector<AnchorEvidence> anchors;
};

/// For each class anchor, the k reference images closest to it.
inline Evidence evidence(const Embedding& record, const PromptSet& prompts, std::span<const Embedding> corpus,
                         std::size_t k) {
    if (k == 0) fail(ErrorCode::InvalidArgument, "k must be >= 1");
    if (corpus.empty()) fail(ErrorCode::EmptyCorpus, "reference corpus is empty");
    Evidence out;
    out.id = record.id;
    out.offensive_score = classify(prompts, record).offensive_score;
    for (const auto& c : prompts.classes) {
        for (std::size_t a = 0; a < c.anchors.size(); ++a) {
            const Embedding anchor{c.name + "#" + std::to_string(a), c.anchors[a]};
            out.anchors.push_back({c.name, a, cosine_similarity(record.vector, c.anchors[a]),
                                   nearest_neighbors(anchor, corpus, k)});
        }
    }
    return out;
}

inline nlohmann::json to_json(const Evidence& e) {
    nlohmann::json anchors = nlohmann::json::array();
    for (const auto& a : e.anchors) {
        nlohmann::json neighbors = nlohmann::json::array();
        for (const auto& n : a.neighbors) neighbors.push_back({{"id", n.id}, {"similarity", n.similarity}});
        anchors.push_back({{"class", a.class_name},
                           {"anchor", a.anchor_index},
                           {"similarity", a.record_similarity},
                           {"neighbors", neighbors}});
    }
    return {{"id", e.id}, {"offensive_score", e.offensive_score}, {"anchors", anchors}};
}

/// Writes audit.jsonl and summary.json into `out_dir`.
inline AuditSummary write_audit(const std::filesystem::path& out_dir, const EmbeddingCache& cache,
                                const PromptSet& prompts, const ScanOptions& options) {
    std::filesystem::create_directories(out_dir);
    std::ofstream jsonl(out_dir / "audit.jsonl", std::ios::binary | std::ios::trunc);
    if (!jsonl) fail(ErrorCode::IoFailure, "cannot write " + (out_dir / "audit.jsonl").string());
    const auto summary = scan(cache, prompts, options, [&](const AuditRecord& r) { jsonl << to_jsonl(r) << '\n'; });
    jsonl.close();
    std::ofstream out(out_dir / "summary.json", std::ios::binary | std::ios::trunc);
    out << to_json(summary).dump(2) << '\n';
    if (!out) fail(ErrorCode::IoFailure, "cannot write summary.json");
    return summary;
}

}  // namespace offcurate
