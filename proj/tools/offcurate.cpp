// offcurate: embed -> eval -> scan -> report -> serve.
//
// Exit codes: 0 success, 1 usage error, 2 data or processing error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <unistd.h>
#include <thread>

#include "offcurate/audit.hpp"
#include "offcurate/backend.hpp"
#include "offcurate/cache.hpp"
#include "offcurate/embed_directory.hpp"
#include "offcurate/evaluation.hpp"
#include "offcurate/http.hpp"
#include "offcurate/manifest.hpp"
#include "offcurate/pca.hpp"
#include "offcurate/prompts.hpp"
#include "offcurate/service.hpp"
#include "offcurate/smid.hpp"
#include "offcurate/tuning.hpp"

namespace fs = std::filesystem;
using namespace offcurate;
using json = nlohmann::json;

namespace {

bool quiet = false;

void log(const std::string& message) {
    if (!quiet) std::cerr << "[offcurate] " << message << '\n';
}

/// Thrown after the failure has already been reported.
struct ExitRequest {
    int code;
};

std::string abs_string(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
}

fs::path sibling_manifest(const fs::path& output) { return fs::path(output.string() + ".run.json"); }

// ---------------------------------------------------------------------------
// shared option groups

struct LabelOptions {
    std::string template_text{kDefaultTemplate};
    std::string labels;
    std::string preset = "positive-negative";
    double temperature = kDefaultTemperature;

    void add(CLI::App& app) {
        app.add_option("--template", template_text, "Prompt template containing {label}")->capture_default_str();
        app.add_option("--labels", labels, "Label words NON_OFFENSIVE,OFFENSIVE (overrides --preset)");
        std::vector<std::string> names;
        for (const auto& [name, words] : label_presets()) names.push_back(name);
        app.add_option("--preset", preset, "Label-word preset")->check(CLI::IsMember(names))->capture_default_str();
        app.add_option("--temperature", temperature, "Softmax temperature")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
    }

    std::vector<std::string> words() const {
        if (labels.empty()) {
            const auto& p = label_presets().at(preset);
            return {p.first, p.second};
        }
        const auto comma = labels.find(',');
        if (comma == std::string::npos || labels.find(',', comma + 1) != std::string::npos) {
            throw CLI::ValidationError("--labels", "expected exactly two comma-separated words");
        }
        return {trim(labels.substr(0, comma)), trim(labels.substr(comma + 1))};
    }

    json to_config() const {
        return {{"template", template_text}, {"labels", words()}, {"temperature", temperature}};
    }
};

struct TuneOptions {
    TuneConfig config;
    std::optional<double> temperature;

    void add(CLI::App& app) {
        app.add_option("--lr", config.learning_rate, "Learning rate")->capture_default_str();
        app.add_option("--epochs", config.max_epochs, "Maximum epochs")->capture_default_str();
        app.add_option("--max-steps", config.max_steps, "Stop after this many steps (0 = no limit)")
            ->capture_default_str();
        app.add_option("--batch-size", config.batch_size, "Mini-batch size")->capture_default_str();
        app.add_option("--patience", config.patience, "Early-stopping patience in epochs")->capture_default_str();
        app.add_option("--early-stop", config.early_stop_metric, "Early-stopping metric")
            ->check(CLI::IsMember({"accuracy", "loss"}))
            ->capture_default_str();
        app.add_option("--tune-temperature", temperature, "Temperature used while tuning");
    }

    TuneConfig resolved(std::uint64_t seed) const {
        TuneConfig c = config;
        c.seed = seed;
        c.temperature = temperature;
        c.validate();
        return c;
    }
};

Thresholds thresholds_from(const std::string& preset, std::optional<double> below, std::optional<double> above) {
    Thresholds t = preset == "strong" ? kStrongOffensiveThresholds : kSmidThresholds;
    if (below) t.negative = *below;
    if (above) t.positive = *above;
    if (!(t.negative <= t.positive)) {
        fail(ErrorCode::InvalidThresholds, "offensive threshold must not exceed the non-offensive threshold");
    }
    return t;
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
    fs::path input, backend, out;
    std::size_t workers = 1;
    bool allow_partial = false;
    bool no_reuse = false;
};

int cmd_embed(const EmbedArgs& a) {
    const auto backend = make_backend(BackendConfig::from_file(a.backend));
    std::optional<EmbeddingCache> previous;
    if (!a.no_reuse && fs::exists(a.out)) {
        try {
            previous = read_cache(a.out);
            if (previous->space() != backend->space()) {
                log("existing cache was made by another backend; re-encoding everything");
                previous.reset();
            }
        } catch (const Error& e) {
            log(std::string("ignoring unreadable existing cache: ") + e.what());
        }
    }
    EmbedOptions options;
    options.workers = a.workers;
    options.previous = previous ? &*previous : nullptr;
    const auto result = embed_directory(*backend, a.input, options);

    for (const auto& f : result.failures) std::cerr << "failed: " << f.id << ": " << f.message << '\n';
    std::cout << result.encoded << " encoded, " << result.reused << " cached";
    if (!result.failures.empty()) std::cout << ", " << result.failures.size() << " failed";
    std::cout << '\n';
    if (!result.failures.empty() && (!a.allow_partial || result.cache.empty())) {
        std::cerr << "error: " << result.failures.size() << " image(s) could not be embedded"
                  << (a.allow_partial ? "" : " (use --allow-partial to keep the rest)") << '\n';
        return 2;
    }

    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    write_cache(a.out, result.cache);
    RunManifest m;
    m.command = "embed";
    m.config = {{"input", abs_string(a.input)},
                {"backend", json::parse(std::ifstream(a.backend))},
                {"workers", a.workers},
                {"allow_partial", a.allow_partial},
                {"backend_id", backend->space().backend_id},
                {"dimension", backend->space().dimension}};
    m.add_input("backend", a.backend);
    m.outputs = {abs_string(a.out), abs_string(manifest_path(a.out))};
    write_manifest(sibling_manifest(a.out), m);
    log("wrote " + a.out.string() + " (" + std::to_string(result.cache.size()) + " embeddings)");
    return 0;
}

// ---------------------------------------------------------------------------
// prompts

struct PromptsArgs {
    fs::path backend, out;
    LabelOptions labels;
};

int cmd_prompts(const PromptsArgs& a) {
    const auto backend = make_backend(BackendConfig::from_file(a.backend));
    const auto set = build_zero_shot(*backend, a.labels.template_text, a.labels.words(), a.labels.temperature);
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    save_prompt_set(a.out, set);
    RunManifest m;
    m.command = "prompts";
    m.config = a.labels.to_config();
    m.add_input("backend", a.backend);
    m.outputs = {abs_string(a.out)};
    write_manifest(sibling_manifest(a.out), m);
    std::cout << "zero-shot prompt set (" << set.space.backend_id << ", d=" << set.space.dimension << ") -> "
              << a.out.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    fs::path cache, ratings, out, backend, prompts, prompts_out;
    std::string id_column = "img_name", rating_column = "moral_mean", path_column;
    std::string mode = "tune";
    std::size_t folds = 10;
    std::uint64_t seed = 0;
    std::string thresholds = "smid";
    std::optional<double> offensive_below, non_offensive_above;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    double regularization = 1e-3;
    std::vector<double> fractions;
    std::size_t repeats = 1;
    std::size_t workers = 1;
    LabelOptions labels;
    TuneOptions tune;
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

int cmd_eval(const EvalArgs& a) {
    const auto mode = eval_mode_from_string(a.mode);
    if (a.folds < 2 && a.fractions.empty()) {
        std::cerr << "error: --folds must be >= 2\n";
        return 1;
    }
    const auto thresholds = thresholds_from(a.thresholds, a.offensive_below, a.non_offensive_above);
    const auto cache = read_cache(a.cache);
    const auto ratings = load_ratings(a.ratings, {a.id_column, a.rating_column, a.path_column});
    const auto labelled = label_examples(cache, ratings, thresholds);
    const auto counts = class_counts(labelled.examples);
    log(std::to_string(ratings.size()) + " rated, " + std::to_string(counts[1]) + " offensive, " +
        std::to_string(counts[0]) + " non-offensive, " + std::to_string(labelled.excluded) + " excluded");

    std::optional<PromptSet> initial;
    RunManifest m;
    m.command = "eval";
    if (mode != EvalMode::Probe || !a.prompts_out.empty()) {
        if (!a.prompts.empty()) {
            initial = load_prompt_set(a.prompts);
            m.add_input("prompts", a.prompts);
        } else if (!a.backend.empty()) {
            const auto backend = make_backend(BackendConfig::from_file(a.backend));
            initial = build_zero_shot(*backend, a.labels.template_text, a.labels.words(), a.labels.temperature);
            m.add_input("backend", a.backend);
        } else {
            std::cerr << "error: --mode " << a.mode << " needs --prompts or --backend for the initial prompts\n";
            return 1;
        }
        require_same_space(cache.space(), initial->space);
    }

    EvalOptions options;
    options.mode = mode;
    options.folds = a.folds;
    options.seed = a.seed;
    options.tune = a.tune.resolved(a.seed);
    options.validation_fraction = a.val_fraction;
    options.probe_regularization = a.regularization;
    options.workers = a.workers;

    json report{{"command", "eval"},
                {"dataset",
                 {{"rated", ratings.size()},
                  {"offensive", counts[1]},
                  {"non_offensive", counts[0]},
                  {"excluded", labelled.excluded},
                  {"thresholds",
                   {{"offensive_below", thresholds.negative},
                    {"non_offensive_above", thresholds.positive}}}}}};
    if (initial) report["initial_prompts"] = to_json(initial->provenance);

    if (!a.fractions.empty()) {
        if (mode != EvalMode::Tune) {
            std::cerr << "error: --fractions needs --mode tune\n";
            return 1;
        }
        const auto split = train_test_split(labelled.examples, a.test_fraction, a.seed);
        const auto curve = learning_curve(*initial, split.train, split.test, a.fractions, options.tune, a.repeats);
        json rows = json::array();
        std::cout << "fraction  train  accuracy (mean +- std)\n";
        for (const auto& p : curve) {
            rows.push_back({{"fraction", p.fraction},
                            {"train_size", p.train_size},
                            {"accuracy", {{"mean", p.accuracy.mean}, {"std", p.accuracy.std}}},
                            {"accuracies", p.accuracies}});
            std::cout << fmt(p.fraction, 3) << "  " << p.train_size << "  " << fmt(p.accuracy.mean) << " +- "
                      << fmt(p.accuracy.std) << '\n';
        }
        report["learning_curve"] = {{"test_fraction", a.test_fraction},
                                    {"train_size", split.train.size()},
                                    {"test_size", split.test.size()},
                                    {"repeats", a.repeats},
                                    {"points", rows}};
    } else {
        const auto result = cross_validate(initial ? &*initial : nullptr, labelled.examples, options);
        report["cv"] = to_json(result, mode);
        const auto& s = result.summary;
        std::cout << a.mode << ", " << a.folds << "-fold\n"
                  << "accuracy  " << fmt(s.accuracy.mean) << " +- " << fmt(s.accuracy.std) << '\n'
                  << "precision " << fmt(s.precision.mean) << " +- " << fmt(s.precision.std) << '\n'
                  << "recall    " << fmt(s.recall.mean) << " +- " << fmt(s.recall.std) << '\n'
                  << "f1        " << fmt(s.f1.mean) << " +- " << fmt(s.f1.std) << '\n';
    }

    if (!a.prompts_out.empty()) {
        if (!initial) {
            std::cerr << "error: --prompts-out needs --prompts or --backend\n";
            return 1;
        }
        PromptSet final_set = *initial;
        if (mode == EvalMode::Tune) {
            const auto tuned = tune_with_validation(*initial, labelled.examples, options.tune, a.val_fraction);
            final_set = tuned.prompts;
            auto detail = to_json(tuned);
            detail.erase("prompts");
            report["final_tuning"] = detail;
        }
        if (a.prompts_out.has_parent_path()) fs::create_directories(a.prompts_out.parent_path());
        save_prompt_set(a.prompts_out, final_set);
        m.outputs.push_back(abs_string(a.prompts_out));
        log("wrote prompt set " + a.prompts_out.string());
    }

    write_json(a.out, report);
    m.config = {{"mode", a.mode},
                {"folds", a.folds},
                {"id_column", a.id_column},
                {"rating_column", a.rating_column},
                {"path_column", a.path_column},
                {"thresholds", report["dataset"]["thresholds"]},
                {"validation_fraction", a.val_fraction},
                {"test_fraction", a.test_fraction},
                {"fractions", a.fractions},
                {"repeats", a.repeats},
                {"regularization", a.regularization},
                {"labels", a.labels.to_config()},
                {"tune", to_json(options.tune)},
                {"workers", a.workers}};
    m.seed = a.seed;
    m.add_input("cache", a.cache);
    m.add_input("ratings", a.ratings);
    m.outputs.push_back(abs_string(a.out));
    write_manifest(sibling_manifest(a.out), m);
    return 0;
}

// ---------------------------------------------------------------------------
// scan

struct ScanArgs {
    fs::path cache, prompts, out_dir, image_root;
    double threshold = 0.5;
    std::size_t workers = 1;
};

int cmd_scan(const ScanArgs& a) {
    const auto cache = read_cache(a.cache);
    const auto prompts = load_prompt_set(a.prompts);
    ScanOptions options;
    options.flag_threshold = a.threshold;
    options.workers = a.workers;
    const auto summary = write_audit(a.out_dir, cache, prompts, options);
    save_prompt_set(a.out_dir / "prompts.json", prompts);

    RunManifest m;
    m.command = "scan";
    m.config = {{"cache", abs_string(a.cache)},
                {"prompts", abs_string(a.prompts)},
                {"threshold", a.threshold},
                {"workers", a.workers}};
    const std::string root = a.image_root.empty() ? cache.manifest.root : abs_string(a.image_root);
    if (!root.empty()) m.config["image_root"] = root;
    m.add_input("cache", a.cache);
    m.add_input("prompts", a.prompts);
    for (const char* name : {"audit.jsonl", "summary.json", "prompts.json"}) m.outputs.push_back(abs_string(a.out_dir / name));
    write_manifest(a.out_dir / "run.json", m);

    std::cout << "scanned " << summary.total_scanned << ", flagged " << summary.total_flagged << " (threshold "
              << a.threshold << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
    fs::path audit, out;
    std::size_t top = 20;
    bool by_class = false;
    std::string format = "text";
};

int cmd_report(const ReportArgs& a) {
    const fs::path jsonl = fs::is_directory(a.audit) ? a.audit / "audit.jsonl" : a.audit;
    const auto records = read_audit_jsonl(jsonl);
    const auto summary_path = jsonl.parent_path() / "summary.json";

    AuditSummary stored;
    bool have_summary = false;
    if (fs::is_regular_file(summary_path)) {
        stored = audit_summary_from_json(json::parse(std::ifstream(summary_path)));
        have_summary = true;
    }
    const auto summary = summarize(records, have_summary ? stored.flag_threshold : 0.5,
                                   have_summary ? stored.backend_id : "", have_summary ? stored.prompt_provenance : json::object());
    if (have_summary && to_json(summary) != to_json(stored)) {
        std::cerr << "error: " << summary_path.string() << " does not match " << jsonl.string() << '\n';
        return 2;
    }

    std::vector<AuditRecord> flagged;
    for (const auto& r : records) {
        if (r.flagged) flagged.push_back(r);
    }
    const auto top = flagged.empty() ? std::vector<AuditRecord>{} : top_flagged(flagged, a.top);

    auto record_json = [](const AuditRecord& r) { return json::parse(to_jsonl(r)); };
    json doc{{"total_scanned", summary.total_scanned},
             {"total_flagged", summary.total_flagged},
             {"flag_threshold", summary.flag_threshold},
             {"backend_id", summary.backend_id}};
    json per_class = json::array();
    for (const auto& c : summary.per_class) per_class.push_back({{"class_dir", c.class_dir}, {"flagged", c.flagged}});
    doc["per_class"] = per_class;
    json top_list = json::array();
    for (const auto& r : top) top_list.push_back(record_json(r));
    doc["top"] = top_list;
    std::vector<ExemplarGroup> groups;
    if (a.by_class && !flagged.empty()) {
        groups = top_flagged_by_class(flagged, a.top);
        json g = json::array();
        for (const auto& group : groups) {
            json items = json::array();
            for (const auto& r : group.records) items.push_back(record_json(r));
            g.push_back({{"class_dir", group.class_dir}, {"records", items}});
        }
        doc["top_by_class"] = g;
    }

    if (!a.out.empty()) {
        write_json(a.out, doc);
        RunManifest m;
        m.command = "report";
        m.config = {{"audit", abs_string(jsonl)}, {"top", a.top}, {"by_class", a.by_class}};
        m.add_input("audit", jsonl);
        m.outputs = {abs_string(a.out)};
        write_manifest(sibling_manifest(a.out), m);
    }

    if (a.format == "json") {
        std::cout << doc.dump(2) << '\n';
        return 0;
    }
    std::cout << "scanned " << summary.total_scanned << ", flagged " << summary.total_flagged << " (threshold "
              << summary.flag_threshold << ")\n\n";
    std::size_t width = 9;
    for (const auto& c : summary.per_class) width = std::max(width, c.class_dir.size());
    std::cout << "class_dir" << std::string(width - 9 + 2, ' ') << "flagged\n";
    for (const auto& c : summary.per_class) {
        const auto name = c.class_dir.empty() ? std::string("(root)") : c.class_dir;
        std::cout << name << std::string(width - std::min(width, name.size()) + 2, ' ') << c.flagged << '\n';
    }
    std::cout << "\ntop " << top.size() << " flagged\n";
    for (const auto& r : top) std::cout << format_score(r.offensive_score) << "  " << r.id << '\n';
    for (const auto& g : groups) {
        std::cout << '\n' << (g.class_dir.empty() ? "(root)" : g.class_dir) << '\n';
        for (const auto& r : g.records) std::cout << "  " << format_score(r.offensive_score) << "  " << r.id << '\n';
    }
    return 0;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
    std::vector<fs::path> audit_dirs;
    fs::path prompts, image_root, cache;
    std::string listen = "127.0.0.1:8080";
    std::size_t min_verdicts = 20;
    std::string cors_origin = "*";
};

int cmd_serve(const ServeArgs& a) {
    const auto colon = a.listen.rfind(':');
    if (colon == std::string::npos) {
        std::cerr << "error: --listen expects HOST:PORT\n";
        return 1;
    }
    const std::string host = a.listen.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(a.listen.substr(colon + 1));
    } catch (const std::exception&) {
        std::cerr << "error: bad port in --listen\n";
        return 1;
    }

    // block the shutdown signals before any thread starts so only the waiter sees them
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGTERM);
    sigaddset(&signals, SIGINT);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    ServiceOptions options;
    options.min_verdicts = a.min_verdicts;
    if (!a.prompts.empty()) options.prompts = a.prompts;
    if (!a.image_root.empty()) options.image_root = a.image_root;
    if (!a.cache.empty()) options.cache = a.cache;
    CurationService service(a.audit_dirs, options);
    HttpOptions http;
    http.allowed_origin = a.cors_origin;
    HttpFrontend frontend(service, http);
    const int bound = frontend.bind(host, port);
    std::cerr << "listening on http://" << host << ":" << bound << std::endl;

    std::atomic<bool> signalled{false};
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        signalled = true;
        log("received signal " + std::to_string(sig) + ", shutting down");
        frontend.stop();
    });
    frontend.serve();
    // listener failed on its own: wake the waiter with the still-blocked signal
    if (!signalled) kill(getpid(), SIGTERM);
    waiter.join();
    log("stopped");
    return 0;
}

// ---------------------------------------------------------------------------
// project

struct ProjectArgs {
    fs::path cache, prompts, out;
};

int cmd_project(const ProjectArgs& a) {
    const auto cache = read_cache(a.cache);
    auto points = cache.embeddings();
    std::vector<std::string> kinds(points.size(), "image");
    if (!a.prompts.empty()) {
        const auto prompts = load_prompt_set(a.prompts);
        require_same_space(cache.space(), prompts.space);
        for (const auto& c : prompts.classes) {
            for (std::size_t i = 0; i < c.anchors.size(); ++i) {
                points.push_back({c.name + "#" + std::to_string(i), c.anchors[i]});
                kinds.push_back("anchor");
            }
        }
    }
    const auto projection = pca_project(points);
    std::ofstream out(a.out, std::ios::trunc);
    out << "id,kind,x,y\n";
    for (std::size_t i = 0; i < projection.points.size(); ++i) {
        const auto& p = projection.points[i];
        out << json(p.id).dump() << ',' << kinds[i] << ',' << fmt(p.coords[0], 8) << ',' << fmt(p.coords[1], 8) << '\n';
    }
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + a.out.string());
    RunManifest m;
    m.command = "project";
    m.config = {{"explained_variance", projection.explained_variance}};
    m.add_input("cache", a.cache);
    if (!a.prompts.empty()) m.add_input("prompts", a.prompts);
    m.outputs = {abs_string(a.out)};
    write_manifest(sibling_manifest(a.out), m);
    std::cout << "explained variance " << fmt(projection.explained_variance[0]) << ", "
              << fmt(projection.explained_variance[1]) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Find offensive images in datasets with a frozen vision-language encoder.", "offcurate"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.set_config("--config", "", "Read options from a TOML/INI file; flags override it");
    app.add_flag("-q,--quiet", quiet, "Only print errors");
    app.require_subcommand(1);
    app.fallthrough();

    int status = 0;
    auto guard = [&status](auto fn) {
        return [fn, &status] { status = fn(); };
    };

    EmbedArgs embed;
    auto* c_embed = app.add_subcommand("embed", "Embed every image under a directory into a cache");
    c_embed->add_option("--input", embed.input, "Image directory")->required()->check(CLI::ExistingDirectory);
    c_embed->add_option("--backend", embed.backend, "Backend config JSON")->required()->check(CLI::ExistingFile);
    c_embed->add_option("--out", embed.out, "Cache file to write")->required();
    c_embed->add_option("--workers", embed.workers, "Encoder threads")->check(CLI::PositiveNumber)->capture_default_str();
    c_embed->add_flag("--allow-partial", embed.allow_partial, "Write the cache even if some images fail");
    c_embed->add_flag("--no-reuse", embed.no_reuse, "Re-encode images already in --out");
    c_embed->callback(guard([&] { return cmd_embed(embed); }));

    PromptsArgs prompts;
    auto* c_prompts = app.add_subcommand("prompts", "Build a zero-shot prompt set from label words");
    c_prompts->add_option("--backend", prompts.backend, "Backend config JSON")->required()->check(CLI::ExistingFile);
    c_prompts->add_option("--out", prompts.out, "Prompt set JSON to write")->required();
    prompts.labels.add(*c_prompts);
    c_prompts->callback(guard([&] { return cmd_prompts(prompts); }));

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Cross-validate a classifier on rated images");
    c_eval->add_option("--cache", eval.cache, "Embedding cache")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--ratings", eval.ratings, "Ratings CSV")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--out", eval.out, "Report JSON to write")->required();
    c_eval->add_option("--id-column", eval.id_column, "Image id column")->capture_default_str();
    c_eval->add_option("--rating-column", eval.rating_column, "Mean moral rating column")->capture_default_str();
    c_eval->add_option("--path-column", eval.path_column, "Column holding the cache id, if not the image id");
    c_eval->add_option("--mode", eval.mode, "Classifier")
        ->check(CLI::IsMember({"zero-shot", "tune", "probe"}))
        ->capture_default_str();
    c_eval->add_option("--folds", eval.folds, "Number of folds")->capture_default_str();
    c_eval->add_option("--seed", eval.seed, "Seed for splits and tuning")->capture_default_str();
    c_eval->add_option("--thresholds", eval.thresholds, "Rating thresholds preset")
        ->check(CLI::IsMember({"smid", "strong"}))
        ->capture_default_str();
    c_eval->add_option("--offensive-below", eval.offensive_below, "Override: ratings below are offensive");
    c_eval->add_option("--non-offensive-above", eval.non_offensive_above, "Override: ratings above are non-offensive");
    c_eval->add_option("--backend", eval.backend, "Backend config for zero-shot initial prompts")
        ->check(CLI::ExistingFile);
    c_eval->add_option("--prompts", eval.prompts, "Initial prompt set JSON")->check(CLI::ExistingFile);
    c_eval->add_option("--prompts-out", eval.prompts_out, "Also fit on all labelled images and save the prompt set");
    c_eval->add_option("--val-fraction", eval.val_fraction, "Share of training data held out for early stopping")
        ->check(CLI::Range(0.0, 0.9))
        ->capture_default_str();
    c_eval->add_option("--test-fraction", eval.test_fraction, "Held-out share for --fractions")
        ->check(CLI::Range(0.01, 0.9))
        ->capture_default_str();
    c_eval->add_option("--fractions", eval.fractions, "Learning curve over these training fractions")
        ->delimiter(',')
        ->check(CLI::Range(0.0, 1.0));
    c_eval->add_option("--repeats", eval.repeats, "Repeats per learning-curve point")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    c_eval->add_option("--regularization", eval.regularization, "L2 penalty of the linear probe")->capture_default_str();
    c_eval->add_option("--workers", eval.workers, "Folds evaluated in parallel")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    eval.labels.add(*c_eval);
    eval.tune.add(*c_eval);
    c_eval->callback(guard([&] { return cmd_eval(eval); }));

    ScanArgs scan_args;
    auto* c_scan = app.add_subcommand("scan", "Score every cached image and write an audit run");
    c_scan->add_option("--cache", scan_args.cache, "Embedding cache")->required()->check(CLI::ExistingFile);
    c_scan->add_option("--prompts", scan_args.prompts, "Prompt set JSON")->required()->check(CLI::ExistingFile);
    c_scan->add_option("--out-dir", scan_args.out_dir, "Audit run directory")->required();
    c_scan->add_option("--threshold", scan_args.threshold, "Flag when the offensive probability exceeds this")
        ->capture_default_str();
    c_scan->add_option("--workers", scan_args.workers, "Scoring threads")->check(CLI::PositiveNumber)->capture_default_str();
    c_scan->add_option("--image-root", scan_args.image_root, "Dataset root (default: recorded in the cache)");
    c_scan->callback(guard([&] { return cmd_scan(scan_args); }));

    ReportArgs report;
    auto* c_report = app.add_subcommand("report", "Per-class counts and top flagged images of an audit");
    c_report->add_option("--audit", report.audit, "audit.jsonl or its run directory")->required()->check(CLI::ExistingPath);
    c_report->add_option("--top", report.top, "Number of exemplars")->check(CLI::PositiveNumber)->capture_default_str();
    c_report->add_flag("--by-class", report.by_class, "Also list the top exemplars of each class");
    c_report->add_option("--out", report.out, "Also write the report as JSON");
    c_report->add_option("--format", report.format, "stdout format")
        ->check(CLI::IsMember({"text", "json"}))
        ->capture_default_str();
    c_report->callback(guard([&] { return cmd_report(report); }));

    ServeArgs serve;
    auto* c_serve = app.add_subcommand("serve", "Serve audit runs to the review UI");
    c_serve->add_option("--audit-dir", serve.audit_dirs, "Run directory or a directory of runs (repeatable)")
        ->required();
    c_serve->add_option("--prompts", serve.prompts, "Initial prompt set for runs without one")->check(CLI::ExistingFile);
    c_serve->add_option("--listen", serve.listen, "HOST:PORT (port 0 picks a free one)")->capture_default_str();
    c_serve->add_option("--image-root", serve.image_root, "Dataset root override");
    c_serve->add_option("--cache", serve.cache, "Embedding cache override");
    c_serve->add_option("--min-verdicts", serve.min_verdicts, "Verdicts needed before re-tuning")->capture_default_str();
    c_serve->add_option("--cors-origin", serve.cors_origin, "Allowed browser origin")->capture_default_str();
    c_serve->callback(guard([&] { return cmd_serve(serve); }));

    ProjectArgs project;
    auto* c_project = app.add_subcommand("project", "2-D PCA of cached embeddings and prompt anchors (CSV)");
    c_project->add_option("--cache", project.cache, "Embedding cache")->required()->check(CLI::ExistingFile);
    c_project->add_option("--prompts", project.prompts, "Prompt set whose anchors to include")->check(CLI::ExistingFile);
    c_project->add_option("--out", project.out, "CSV to write")->required();
    c_project->callback(guard([&] { return cmd_project(project); }));

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return status;
}
