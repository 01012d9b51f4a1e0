#pragma once

// Review state over one or more audit runs: paginated flagged records,
// curator verdicts (append-only log), image access, anchor evidence and
// re-tuning from verdicts into versioned prompt sets.
//
// Run directory layout:
//   audit.jsonl, summary.json   written by scan
//   prompts.json, run.json      prompt set used by the scan and its manifest
//   verdicts.jsonl              verdict log, appended and fsync'ed per verdict
//   promptsets/v<N>.json        prompt set registry; promptsets/active holds N

#include <fcntl.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "offcurate/audit.hpp"
#include "offcurate/cache.hpp"
#include "offcurate/error.hpp"
#include "offcurate/hash.hpp"
#include "offcurate/image.hpp"
#include "offcurate/manifest.hpp"
#include "offcurate/prompts.hpp"
#include "offcurate/tuning.hpp"

namespace offcurate {

enum class Decision { Keep, Offensive, Unsure };

inline constexpr std::string_view to_string(Decision d) noexcept {
    switch (d) {
        case Decision::Keep: return "keep";
        case Decision::Offensive: return "offensive";
        case Decision::Unsure: return "unsure";
    }
    return "unsure";
}

inline Decision decision_from_string(std::string_view s) {
    if (s == "keep") return Decision::Keep;
    if (s == "offensive") return Decision::Offensive;
    if (s == "unsure") return Decision::Unsure;
    fail(ErrorCode::InvalidArgument, "decision must be keep, offensive or unsure, got '" + std::string(s) + "'");
}

struct Verdict {
    std::string id;
    Decision decision = Decision::Unsure;
    std::string note;
    std::string reviewer;
    std::int64_t timestamp = 0;  // UTC seconds
};

inline nlohmann::json to_json(const Verdict& v) {
    return {{"id", v.id},
            {"decision", std::string(to_string(v.decision))},
            {"note", v.note},
            {"reviewer", v.reviewer},
            {"timestamp", v.timestamp}};
}

inline Verdict verdict_from_json(const nlohmann::json& j) {
    try {
        Verdict v;
        v.id = j.at("id").get<std::string>();
        v.decision = decision_from_string(j.at("decision").get<std::string>());
        if (j.contains("note") && !j.at("note").is_null()) v.note = j.at("note").get<std::string>();
        if (j.contains("reviewer") && !j.at("reviewer").is_null()) v.reviewer = j.at("reviewer").get<std::string>();
        v.timestamp = j.value("timestamp", std::int64_t{0});
        return v;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("verdict: ") + e.what());
    }
}

struct ListFilter {
    std::optional<std::string> class_dir;
    std::optional<double> min_score;
    std::optional<double> max_score;
    std::string status = "any";  // any | unreviewed | reviewed | keep | offensive | unsure
    bool include_unflagged = false;
};

struct ListItem {
    AuditRecord record;
    std::optional<Verdict> verdict;
};

struct Page {
    std::vector<ListItem> items;
    std::optional<std::string> next_cursor;
    std::size_t total = 0;  // size of the filtered set
};

struct ImageData {
    std::vector<std::uint8_t> bytes;
    std::string content_type;
};

enum class JobState { Running, Succeeded, Failed };

inline constexpr std::string_view to_string(JobState s) noexcept {
    switch (s) {
        case JobState::Running: return "running";
        case JobState::Succeeded: return "succeeded";
        case JobState::Failed: return "failed";
    }
    return "failed";
}

struct JobStatus {
    std::string id;
    std::string run;
    JobState state = JobState::Running;
    std::size_t examples = 0;
    std::vector<double> loss_per_epoch;  // grows while running
    std::optional<std::size_t> version;  // prompt set version created on success
    nlohmann::json report;               // TuneReport without the prompts
    std::string error_code;
    std::string error_message;
};

inline nlohmann::json to_json(const JobStatus& s) {
    nlohmann::json j{{"id", s.id},
                     {"run", s.run},
                     {"state", std::string(to_string(s.state))},
                     {"examples", s.examples},
                     {"loss_per_epoch", s.loss_per_epoch}};
    j["version"] = s.version ? nlohmann::json(*s.version) : nlohmann::json(nullptr);
    if (!s.report.is_null()) j["report"] = s.report;
    if (s.state == JobState::Failed) j["error"] = {{"code", s.error_code}, {"message", s.error_message}};
    return j;
}

struct ServiceOptions {
    std::size_t min_verdicts = 20;
    std::optional<std::filesystem::path> prompts;     // initial prompt set instead of <run>/prompts.json
    std::optional<std::filesystem::path> image_root;  // instead of the root recorded in run.json
    std::optional<std::filesystem::path> cache;       // instead of the cache recorded in run.json
    std::size_t max_page = 1000;
};

inline std::string hex_encode(std::string_view s) {
    return to_hex({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::optional<std::string> hex_decode(std::string_view s) {
    if (s.size() % 2 != 0) return std::nullopt;
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    std::string out;
    for (std::size_t i = 0; i < s.size(); i += 2) {
        const int hi = nibble(s[i]), lo = nibble(s[i + 1]);
        if (hi < 0 || lo < 0) return std::nullopt;
        out.push_back(static_cast<char>(hi * 16 + lo));
    }
    return out;
}

inline std::string image_content_type(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    if (ext == ".png") return "image/png";
    if (ext == ".bmp") return "image/bmp";
    if (ext == ".webp") return "image/webp";
    if (ext == ".tif" || ext == ".tiff") return "image/tiff";
    return "application/octet-stream";
}

namespace detail {

inline void fsync_path(const std::filesystem::path& p) {
    const int fd = ::open(p.c_str(), O_RDONLY);
    if (fd >= 0) {
        ::fsync(fd);
        ::close(fd);
    }
}

/// Write to a temporary file, fsync, rename over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) fail(ErrorCode::StorageFailure, "cannot write " + tmp);
    std::size_t done = 0;
    while (done < text.size()) {
        const auto n = ::write(fd, text.data() + done, text.size() - done);
        if (n < 0) {
            ::close(fd);
            fail(ErrorCode::StorageFailure, "write failed: " + tmp);
        }
        done += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) fail(ErrorCode::StorageFailure, "rename failed: " + ec.message());
    fsync_path(path.parent_path());
}

}  // namespace detail

class CurationService {
public:
    /// Each path is either a run directory (holding audit.jsonl) or a
    /// directory whose immediate subdirectories are runs.
    explicit CurationService(const std::vector<std::filesystem::path>& audit_dirs, ServiceOptions options = {})
        : options_(std::move(options)) {
        for (const auto& dir : audit_dirs) {
            if (std::filesystem::is_regular_file(dir / "audit.jsonl")) {
                add_run(dir);
                continue;
            }
            if (!std::filesystem::is_directory(dir)) fail(ErrorCode::UnknownRun, "no audit run at " + dir.string());
            std::vector<std::filesystem::path> children;
            for (const auto& entry : std::filesystem::directory_iterator(dir)) {
                if (entry.is_directory() && std::filesystem::is_regular_file(entry.path() / "audit.jsonl")) {
                    children.push_back(entry.path());
                }
            }
            if (children.empty()) fail(ErrorCode::UnknownRun, "no audit run under " + dir.string());
            std::sort(children.begin(), children.end());
            for (const auto& c : children) add_run(c);
        }
        if (runs_.empty()) fail(ErrorCode::UnknownRun, "no audit runs given");
    }

    CurationService(const CurationService&) = delete;
    CurationService& operator=(const CurationService&) = delete;

    ~CurationService() {
        std::vector<std::jthread> workers;
        {
            std::lock_guard lock(jobs_mu_);
            workers.swap(workers_);
        }
        workers.clear();  // joins
        for (auto& [id, run] : runs_) {
            if (run->log_fd >= 0) ::close(run->log_fd);
        }
    }

    std::size_t min_verdicts() const noexcept { return options_.min_verdicts; }

    std::vector<std::string> run_ids() const {
        std::vector<std::string> ids;
        for (const auto& [id, run] : runs_) ids.push_back(id);
        return ids;
    }

    nlohmann::json list_runs() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& [id, run] : runs_) {
            std::shared_lock lock(run->mu);
            out.push_back({{"id", id},
                           {"total_scanned", run->summary.total_scanned},
                           {"total_flagged", run->summary.total_flagged},
                           {"active_promptset", run->active_version},
                           {"verdicts", run->latest.size()}});
        }
        return out;
    }

    /// summary.json plus review state.
    nlohmann::json summary(const std::string& run_id) const {
        const auto& run = find(run_id);
        std::shared_lock lock(run.mu);
        auto j = run.summary_json;
        std::map<std::string, std::size_t> counts{{"keep", 0}, {"offensive", 0}, {"unsure", 0}};
        for (const auto& [id, v] : run.latest) ++counts[std::string(to_string(v.decision))];
        j["review"] = {{"verdicts", counts},
                       {"labelled", counts["keep"] + counts["offensive"]},
                       {"min_verdicts", options_.min_verdicts},
                       {"active_promptset", {{"version", run.active_version},
                                             {"provenance", to_json(run.active->provenance)}}}};
        return j;
    }

    Page list_flagged(const std::string& run_id, const ListFilter& filter, const std::string& cursor,
                      std::size_t limit) const {
        const auto& run = find(run_id);
        if (limit == 0 || limit > options_.max_page) {
            fail(ErrorCode::InvalidArgument, "limit must be in [1, " + std::to_string(options_.max_page) + "]");
        }
        static const std::vector<std::string> statuses{"any", "unreviewed", "reviewed", "keep", "offensive", "unsure"};
        if (std::find(statuses.begin(), statuses.end(), filter.status) == statuses.end()) {
            fail(ErrorCode::InvalidArgument, "unknown status filter '" + filter.status + "'");
        }
        std::size_t start = 0;
        if (!cursor.empty()) {
            const auto id = hex_decode(cursor);
            const auto it = id ? run.position.find(*id) : run.position.end();
            if (it == run.position.end()) fail(ErrorCode::BadCursor, "invalid cursor");
            start = it->second + 1;
        }

        std::shared_lock lock(run.mu);
        auto matches = [&](const AuditRecord& r) {
            if (!r.flagged && !filter.include_unflagged) return false;
            if (filter.class_dir && r.class_dir != *filter.class_dir) return false;
            if (filter.min_score && r.offensive_score < *filter.min_score) return false;
            if (filter.max_score && r.offensive_score > *filter.max_score) return false;
            if (filter.status == "any") return true;
            const auto v = run.latest.find(r.id);
            if (filter.status == "unreviewed") return v == run.latest.end();
            if (filter.status == "reviewed") return v != run.latest.end();
            return v != run.latest.end() && to_string(v->second.decision) == filter.status;
        };

        Page page;
        for (std::size_t i = 0; i < run.ordered.size(); ++i) {
            const auto& r = run.ordered[i];
            if (!matches(r)) continue;
            ++page.total;
            if (i < start) continue;
            if (page.items.size() == limit) {
                if (!page.next_cursor) page.next_cursor = hex_encode(page.items.back().record.id);
                continue;
            }
            ListItem item{r, std::nullopt};
            if (const auto v = run.latest.find(r.id); v != run.latest.end()) item.verdict = v->second;
            page.items.push_back(std::move(item));
        }
        return page;
    }

    /// Persists the verdict (fsync) before returning it.
    Verdict submit_verdict(const std::string& run_id, Verdict v) {
        auto& run = find(run_id);
        if (!run.position.count(v.id)) fail(ErrorCode::UnknownRecord, "no record '" + v.id + "' in run " + run_id);
        v.timestamp = std::chrono::duration_cast<std::chrono::seconds>(
                          std::chrono::system_clock::now().time_since_epoch())
                          .count();
        const auto line = to_json(v).dump() + "\n";
        {
            std::lock_guard write_lock(run.write_mu);
            std::size_t done = 0;
            while (done < line.size()) {
                const auto n = ::write(run.log_fd, line.data() + done, line.size() - done);
                if (n < 0) fail(ErrorCode::StorageFailure, "cannot append to verdict log");
                done += static_cast<std::size_t>(n);
            }
            if (::fsync(run.log_fd) != 0) fail(ErrorCode::StorageFailure, "fsync of verdict log failed");
            std::unique_lock lock(run.mu);
            apply_verdict(run, v);
        }
        return v;
    }

    std::vector<Verdict> verdict_history(const std::string& run_id, const std::string& id) const {
        const auto& run = find(run_id);
        if (!run.position.count(id)) fail(ErrorCode::UnknownRecord, "no record '" + id + "' in run " + run_id);
        std::shared_lock lock(run.mu);
        const auto it = run.history.find(id);
        return it == run.history.end() ? std::vector<Verdict>{} : it->second;
    }

    ImageData get_image(const std::string& run_id, const std::string& id, bool blur) const {
        const auto& run = find(run_id);
        const std::filesystem::path rel(id);
        if (id.empty() || rel.is_absolute() || rel.has_root_name() || rel.has_root_directory()) {
            fail(ErrorCode::Forbidden, "image id must be a relative path");
        }
        for (const auto& part : rel) {
            if (part == "..") fail(ErrorCode::Forbidden, "image id leaves the dataset root");
        }
        if (run.image_root.empty()) fail(ErrorCode::NotFound, "run " + run_id + " has no image root");
        const auto root = std::filesystem::weakly_canonical(run.image_root);
        const auto full = std::filesystem::weakly_canonical(root / rel);
        const auto [end, unused] = std::mismatch(root.begin(), root.end(), full.begin(), full.end());
        if (end != root.end()) fail(ErrorCode::Forbidden, "image id leaves the dataset root");
        if (!run.position.count(id)) fail(ErrorCode::NotFound, "no record '" + id + "' in run " + run_id);
        if (!std::filesystem::is_regular_file(full)) fail(ErrorCode::NotFound, "image file missing: " + id);

        ImageData out;
        out.bytes = read_file_bytes(full);
        out.content_type = image_content_type(full);
        if (blur) {
            auto ext = full.extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
            if (out.content_type == "application/octet-stream") ext = ".png";
            out.bytes = blur_for_review(out.bytes, ext);
            if (ext == ".png") out.content_type = "image/png";
        }
        return out;
    }

    Evidence evidence(const std::string& run_id, const std::string& id, std::size_t k) const {
        const auto& run = find(run_id);
        if (!run.position.count(id)) fail(ErrorCode::UnknownRecord, "no record '" + id + "' in run " + run_id);
        const auto data = embeddings(run);
        const auto it = data->index.find(id);
        if (it == data->index.end()) fail(ErrorCode::MissingEmbeddings, "no cached embedding for '" + id + "'");
        std::shared_ptr<const PromptSet> prompts;
        {
            std::shared_lock lock(run.mu);
            prompts = run.active;
        }
        return offcurate::evidence(data->corpus[it->second], *prompts, data->corpus, k);
    }

    nlohmann::json list_promptsets(const std::string& run_id) const {
        const auto& run = find(run_id);
        std::shared_lock lock(run.mu);
        nlohmann::json versions = nlohmann::json::array();
        for (std::size_t v = 1; v <= run.latest_version; ++v) {
            const auto set = load_prompt_set(promptset_path(run, v));
            versions.push_back({{"version", v}, {"provenance", to_json(set.provenance)}});
        }
        return {{"active", run.active_version}, {"versions", versions}};
    }

    PromptSet promptset(const std::string& run_id, std::size_t version) const {
        const auto& run = find(run_id);
        std::shared_lock lock(run.mu);
        if (version == 0 || version > run.latest_version) {
            fail(ErrorCode::NotFound, "prompt set version " + std::to_string(version) + " does not exist");
        }
        return load_prompt_set(promptset_path(run, version));
    }

    PromptSet active_promptset(const std::string& run_id) const {
        const auto& run = find(run_id);
        std::shared_lock lock(run.mu);
        return *run.active;
    }

    std::size_t active_version(const std::string& run_id) const {
        const auto& run = find(run_id);
        std::shared_lock lock(run.mu);
        return run.active_version;
    }

    void activate(const std::string& run_id, std::size_t version) {
        auto& run = find(run_id);
        std::lock_guard write_lock(run.write_mu);
        std::size_t latest;
        {
            std::shared_lock lock(run.mu);
            latest = run.latest_version;
        }
        if (version == 0 || version > latest) {
            fail(ErrorCode::NotFound, "prompt set version " + std::to_string(version) + " does not exist");
        }
        auto set = std::make_shared<const PromptSet>(load_prompt_set(promptset_path(run, version)));
        detail::atomic_write(run.dir / "promptsets" / "active", std::to_string(version) + "\n");
        std::unique_lock lock(run.mu);
        run.active = std::move(set);
        run.active_version = version;
    }

    /// Labelled training examples from the latest keep/offensive verdicts,
    /// ordered by id.
    std::vector<LabeledExample> verdict_examples(const std::string& run_id) const {
        const auto& run = find(run_id);
        std::vector<Verdict> labelled;
        {
            std::shared_lock lock(run.mu);
            for (const auto& [id, v] : run.latest) {
                if (v.decision != Decision::Unsure) labelled.push_back(v);
            }
        }
        if (labelled.size() < options_.min_verdicts) {
            fail(ErrorCode::InsufficientVerdicts, std::to_string(labelled.size()) + " keep/offensive verdicts, need " +
                                                      std::to_string(options_.min_verdicts));
        }
        std::sort(labelled.begin(), labelled.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
        const auto data = embeddings(run);
        std::vector<LabeledExample> out;
        std::vector<std::string> missing;
        for (const auto& v : labelled) {
            const auto it = data->index.find(v.id);
            if (it == data->index.end()) {
                missing.push_back(v.id);
                continue;
            }
            out.push_back({data->corpus[it->second],
                           v.decision == Decision::Offensive ? Label::Offensive : Label::NonOffensive});
        }
        if (!missing.empty()) {
            fail(ErrorCode::MissingEmbeddings, std::to_string(missing.size()) + " verdict ids lack embeddings, first '" +
                                                   missing.front() + "'");
        }
        return out;
    }

    /// Starts a background tune of a copy of the active prompt set on the
    /// verdict-labelled embeddings. Returns the job id; the new version is
    /// stored but not activated.
    std::string start_retune(const std::string& run_id, const TuneConfig& config) {
        config.validate();
        auto examples = verdict_examples(run_id);
        auto& run = find(run_id);
        std::shared_ptr<const PromptSet> initial;
        {
            std::shared_lock lock(run.mu);
            initial = run.active;
        }
        std::lock_guard lock(jobs_mu_);
        const std::string job_id = "job-" + std::to_string(++job_counter_);
        auto status = std::make_shared<JobStatus>();
        status->id = job_id;
        status->run = run_id;
        status->examples = examples.size();
        jobs_[job_id] = status;
        workers_.emplace_back([this, &run, status, initial, config, examples = std::move(examples)] {
            run_job(run, *status, *initial, examples, config);
        });
        return job_id;
    }

    JobStatus job(const std::string& job_id) const {
        std::lock_guard lock(jobs_mu_);
        const auto it = jobs_.find(job_id);
        if (it == jobs_.end()) fail(ErrorCode::UnknownJob, "no job '" + job_id + "'");
        return *it->second;
    }

    /// Blocks until the job leaves the running state.
    JobStatus wait_job(const std::string& job_id) const {
        for (;;) {
            auto s = job(job_id);
            if (s.state != JobState::Running) return s;
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        }
    }

private:
    struct EmbeddingData {
        std::vector<Embedding> corpus;
        std::unordered_map<std::string, std::size_t> index;
    };

    struct Run {
        std::string id;
        std::filesystem::path dir;
        AuditSummary summary;
        nlohmann::json summary_json;
        std::vector<AuditRecord> ordered;  // (-score, id)
        std::unordered_map<std::string, std::size_t> position;
        std::filesystem::path image_root;
        std::filesystem::path cache_path;

        mutable std::shared_mutex mu;  // verdict maps, active prompt set
        std::unordered_map<std::string, Verdict> latest;
        std::unordered_map<std::string, std::vector<Verdict>> history;
        std::shared_ptr<const PromptSet> active;
        std::size_t active_version = 0;
        std::size_t latest_version = 0;

        std::mutex write_mu;  // verdict log appends, registry writes
        int log_fd = -1;

        mutable std::mutex cache_mu;
        mutable std::shared_ptr<const EmbeddingData> embeddings;
    };

    Run& find(const std::string& run_id) const {
        const auto it = runs_.find(run_id);
        if (it == runs_.end()) fail(ErrorCode::UnknownRun, "no run '" + run_id + "'");
        return *it->second;
    }

    static std::filesystem::path promptset_path(const Run& run, std::size_t version) {
        return run.dir / "promptsets" / ("v" + std::to_string(version) + ".json");
    }

    static void apply_verdict(Run& run, const Verdict& v) {
        run.latest[v.id] = v;
        run.history[v.id].push_back(v);
    }

    std::shared_ptr<const EmbeddingData> embeddings(const Run& run) const {
        std::lock_guard lock(run.cache_mu);
        if (run.embeddings) return run.embeddings;
        if (run.cache_path.empty()) fail(ErrorCode::MissingEmbeddings, "run " + run.id + " has no embedding cache");
        const auto cache = read_cache(run.cache_path);
        auto data = std::make_shared<EmbeddingData>();
        data->corpus = cache.embeddings();
        for (std::size_t i = 0; i < data->corpus.size(); ++i) data->index[data->corpus[i].id] = i;
        run.embeddings = data;
        return data;
    }

    void add_run(const std::filesystem::path& dir_in) {
        auto run = std::make_unique<Run>();
        run->dir = std::filesystem::absolute(dir_in).lexically_normal();
        if (run->dir.filename().empty()) run->dir = run->dir.parent_path();
        run->id = run->dir.filename().string();
        if (runs_.count(run->id)) fail(ErrorCode::InvalidArgument, "duplicate run id '" + run->id + "'");

        run->ordered = read_audit_jsonl(run->dir / "audit.jsonl");
        std::sort(run->ordered.begin(), run->ordered.end(), record_before);
        for (std::size_t i = 0; i < run->ordered.size(); ++i) {
            if (!run->position.emplace(run->ordered[i].id, i).second) {
                fail(ErrorCode::DuplicateId, "audit lists '" + run->ordered[i].id + "' twice");
            }
        }
        {
            std::ifstream in(run->dir / "summary.json");
            if (!in) fail(ErrorCode::UnknownRun, "missing summary.json in " + run->dir.string());
            try {
                run->summary_json = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorCode::ParseFailure, "summary.json: " + std::string(e.what()));
            }
            run->summary = audit_summary_from_json(run->summary_json);
        }

        nlohmann::json config = nlohmann::json::object();
        if (std::filesystem::is_regular_file(run->dir / "run.json")) config = read_manifest(run->dir / "run.json").config;
        if (options_.image_root) {
            run->image_root = *options_.image_root;
        } else if (config.contains("image_root") && config["image_root"].is_string()) {
            run->image_root = config["image_root"].get<std::string>();
        }
        if (options_.cache) {
            run->cache_path = *options_.cache;
        } else if (config.contains("cache") && config["cache"].is_string()) {
            run->cache_path = config["cache"].get<std::string>();
        }

        load_registry(*run);
        open_verdict_log(*run);
        runs_.emplace(run->id, std::move(run));
    }

    void load_registry(Run& run) const {
        const auto registry = run.dir / "promptsets";
        std::filesystem::create_directories(registry);
        std::size_t latest = 0;
        while (std::filesystem::is_regular_file(registry / ("v" + std::to_string(latest + 1) + ".json"))) ++latest;
        if (latest == 0) {
            const auto initial = options_.prompts ? *options_.prompts : run.dir / "prompts.json";
            if (!std::filesystem::is_regular_file(initial)) {
                fail(ErrorCode::UnknownRun, "no prompt set for run " + run.id + " (expected " + initial.string() + ")");
            }
            const auto set = load_prompt_set(initial);
            detail::atomic_write(registry / "v1.json", to_json(set).dump(2) + "\n");
            detail::atomic_write(registry / "active", "1\n");
            latest = 1;
        }
        std::size_t active = latest;
        if (std::ifstream in(registry / "active"); in) {
            in >> active;
            if (!in || active == 0 || active > latest) {
                fail(ErrorCode::StorageFailure, "promptsets/active points at a missing version");
            }
        }
        run.latest_version = latest;
        run.active_version = active;
        run.active = std::make_shared<const PromptSet>(load_prompt_set(promptset_path(run, active)));
    }

    static void open_verdict_log(Run& run) {
        const auto path = run.dir / "verdicts.jsonl";
        if (std::filesystem::exists(path)) {
            std::ifstream in(path, std::ios::binary);
            std::stringstream ss;
            ss << in.rdbuf();
            const std::string text = ss.str();
            // a crash mid-append leaves an unterminated tail; that verdict was
            // never acknowledged, so drop it
            const auto complete = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
            if (complete != text.size()) std::filesystem::resize_file(path, complete);
            std::size_t line_no = 0, begin = 0;
            while (begin < complete) {
                const auto end = text.find('\n', begin);
                ++line_no;
                const auto line = std::string_view(text).substr(begin, end - begin);
                begin = end + 1;
                if (line.empty()) continue;
                try {
                    apply_verdict(run, verdict_from_json(nlohmann::json::parse(line)));
                } catch (const std::exception& e) {
                    fail(ErrorCode::StorageFailure,
                         "verdicts.jsonl line " + std::to_string(line_no) + ": " + std::string(e.what()));
                }
            }
        }
        run.log_fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
        if (run.log_fd < 0) fail(ErrorCode::StorageFailure, "cannot open " + path.string());
    }

    void run_job(Run& run, JobStatus& status, const PromptSet& initial, const std::vector<LabeledExample>& examples,
                 const TuneConfig& config) {
        try {
            auto report = tune(initial, examples, {}, config, [&](std::size_t, double loss, double) {
                std::lock_guard lock(jobs_mu_);
                status.loss_per_epoch.push_back(loss);
            });
            report.prompts.provenance.details["source"] = "verdicts";
            report.prompts.provenance.details["examples"] = examples.size();
            std::size_t version;
            {
                std::lock_guard write_lock(run.write_mu);
                {
                    std::shared_lock lock(run.mu);
                    version = run.latest_version + 1;
                }
                detail::atomic_write(promptset_path(run, version), to_json(report.prompts).dump(2) + "\n");
                std::unique_lock lock(run.mu);
                run.latest_version = version;
            }
            auto summary = to_json(report);
            summary.erase("prompts");
            std::lock_guard lock(jobs_mu_);
            status.report = std::move(summary);
            status.version = version;
            status.state = JobState::Succeeded;
        } catch (const Error& e) {
            std::lock_guard lock(jobs_mu_);
            status.error_code = std::string(to_string(e.code()));
            status.error_message = e.what();
            status.state = JobState::Failed;
        } catch (const std::exception& e) {
            std::lock_guard lock(jobs_mu_);
            status.error_code = "StorageFailure";
            status.error_message = e.what();
            status.state = JobState::Failed;
        }
    }

    ServiceOptions options_;
    std::map<std::string, std::unique_ptr<Run>> runs_;

    mutable std::mutex jobs_mu_;
    std::map<std::string, std::shared_ptr<JobStatus>> jobs_;
    std::vector<std::jthread> workers_;
    std::size_t job_counter_ = 0;
};

}  // namespace offcurate
