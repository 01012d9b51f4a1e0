#include <catch_amalgamated.hpp>

#include <set>
#include <thread>

#include "offcurate/http.hpp"
#include "offcurate/service.hpp"
#include "support.hpp"

using namespace offcurate;
using namespace testing_support;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an offcurate::Error");
    return ErrorCode::InvalidArgument;
}

/// Run directory written from hand-picked records.
void write_run(const std::filesystem::path& dir, const std::vector<AuditRecord>& records, const PromptSet& prompts,
               nlohmann::json config = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    std::ofstream jsonl(dir / "audit.jsonl");
    for (const auto& r : records) jsonl << to_jsonl(r) << '\n';
    jsonl.close();
    std::ofstream(dir / "summary.json") << to_json(summarize(records, 0.5, prompts.space.backend_id, {})).dump(2);
    save_prompt_set(dir / "prompts.json", prompts);
    RunManifest m;
    m.command = "scan";
    m.config = std::move(config);
    write_manifest(dir / "run.json", m);
}

AuditRecord rec(std::string id, double score) {
    return {id, class_dir_of(id), score, score > 0.5 ? "Offensive" : "NonOffensive", score > 0.5};
}

PromptSet some_prompts(std::size_t dim = 8) {
    Rng rng(1);
    return random_prompts(rng, dim, 100.0);
}

/// Planted run: embeddings from two antipodal clusters, images on disk,
/// scanned with random prompts.
struct PlantedRun {
    ClusterData data;
    std::filesystem::path dir;
    std::filesystem::path images;
    std::unordered_map<std::string, Label> truth;
};

PlantedRun planted_run(const TempDir& tmp, std::uint64_t seed = 7) {
    PlantedRun out;
    out.data = planted_clusters(seed, 32, 60, 100, 0.1);
    Rng rng(seed);
    auto prompts = random_prompts(rng, 32, 100.0);
    prompts.space.backend_id = "planted";
    EmbeddingCache cache(prompts.space);
    out.images = tmp / "images";
    for (std::size_t i = 0; i < out.data.train.size(); ++i) {
        auto& e = out.data.train[i];
        const std::string id = std::string(e.label == Label::Offensive ? "weapons/" : "pets/") + e.id() + ".png";
        e.embedding.id = id;
        out.truth[id] = e.label;
        cache.add(id, e.embedding.vector);
        write_png(out.images / id, cv::Scalar(40.0 * static_cast<double>(i % 5), 90, 160), i, 48);
    }
    write_cache(tmp / "cache.bin", cache);
    out.dir = tmp / "runs" / "planted";
    ScanOptions options;
    write_audit(out.dir, cache, prompts, options);
    save_prompt_set(out.dir / "prompts.json", prompts);
    RunManifest m;
    m.command = "scan";
    m.config = {{"cache", (tmp / "cache.bin").string()}, {"image_root", out.images.string()}};
    write_manifest(out.dir / "run.json", m);
    return out;
}

Verdict verdict(std::string id, Decision d, std::string reviewer = "ann") {
    Verdict v;
    v.id = std::move(id);
    v.decision = d;
    v.reviewer = std::move(reviewer);
    return v;
}

std::vector<std::string> all_pages(const CurationService& s, const std::string& run, const ListFilter& f,
                                   std::size_t limit, std::size_t* pages = nullptr) {
    std::vector<std::string> ids;
    std::string cursor;
    std::size_t count = 0;
    for (;;) {
        const auto page = s.list_flagged(run, f, cursor, limit);
        ++count;
        for (const auto& item : page.items) ids.push_back(item.record.id);
        if (!page.next_cursor) break;
        cursor = *page.next_cursor;
    }
    if (pages) *pages = count;
    return ids;
}

}  // namespace

TEST_CASE("pagination contract", "[service]") {
    TempDir tmp;
    write_run(tmp / "r1",
              {rec("a/1.png", 0.9), rec("a/2.png", 0.95), rec("b/3.png", 0.9), rec("b/4.png", 0.6),
               rec("c/5.png", 0.99), rec("c/6.png", 0.2)},
              some_prompts());
    CurationService service({tmp / "r1"});
    CHECK(service.run_ids() == std::vector<std::string>{"r1"});

    std::size_t pages = 0;
    const auto ids = all_pages(service, "r1", {}, 2, &pages);
    CHECK(pages == 3);
    CHECK(ids == std::vector<std::string>{"c/5.png", "a/2.png", "a/1.png", "b/3.png", "b/4.png"});

    ListFilter high;
    high.min_score = 0.9;
    CHECK(all_pages(service, "r1", high, 10) == std::vector<std::string>{"c/5.png", "a/2.png", "a/1.png", "b/3.png"});
    ListFilter cls;
    cls.class_dir = "b";
    CHECK(all_pages(service, "r1", cls, 1) == std::vector<std::string>{"b/3.png", "b/4.png"});
    ListFilter everything;
    everything.include_unflagged = true;
    CHECK(all_pages(service, "r1", everything, 4).size() == 6);
    CHECK(service.list_flagged("r1", high, "", 1).total == 4);

    CHECK(code_of([&] { service.list_flagged("r1", {}, "zz", 2); }) == ErrorCode::BadCursor);
    CHECK(code_of([&] { service.list_flagged("r1", {}, hex_encode("nope"), 2); }) == ErrorCode::BadCursor);
    CHECK(code_of([&] { service.list_flagged("r1", {}, "", 0); }) == ErrorCode::InvalidArgument);
    CHECK(code_of([&] { service.list_flagged("zz", {}, "", 2); }) == ErrorCode::UnknownRun);
    ListFilter bad;
    bad.status = "maybe";
    CHECK(code_of([&] { service.list_flagged("r1", bad, "", 2); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("empty audit gives an empty page", "[service]") {
    TempDir tmp;
    write_run(tmp / "empty", {}, some_prompts());
    CurationService service({tmp / "empty"});
    const auto page = service.list_flagged("empty", {}, "", 10);
    CHECK(page.items.empty());
    CHECK(!page.next_cursor);
    CHECK(page.total == 0);
}

TEST_CASE("pagination completeness under concurrent verdicts", "[service][property]") {
    TempDir tmp;
    Rng rng(3);
    std::vector<AuditRecord> records;
    for (std::size_t i = 0; i < 120; ++i) {
        records.push_back(rec("c" + std::to_string(i % 4) + "/" + pad_id(i) + ".png",
                              0.5 + static_cast<double>(1 + rng.below(10)) / 25.0));
    }
    write_run(tmp / "r", records, some_prompts());
    CurationService service({tmp / "r"});

    for (std::size_t limit : {1u, 3u, 7u, 50u, 1000u}) {
        for (const char* cls : {"", "c2"}) {
            ListFilter f;
            if (*cls) f.class_dir = cls;
            f.min_score = 0.7;
            std::vector<std::string> expected;
            auto sorted = records;
            std::sort(sorted.begin(), sorted.end(), record_before);
            for (const auto& r : sorted) {
                if ((!f.class_dir || r.class_dir == *f.class_dir) && r.offensive_score >= 0.7) expected.push_back(r.id);
            }
            // verdict writes between page fetches must not shift the pages
            std::vector<std::string> got;
            std::string cursor;
            for (;;) {
                const auto page = service.list_flagged("r", f, cursor, limit);
                for (const auto& item : page.items) got.push_back(item.record.id);
                service.submit_verdict("r", verdict(records[rng.below(records.size())].id, Decision::Keep));
                if (!page.next_cursor) break;
                cursor = *page.next_cursor;
            }
            CHECK(got == expected);
        }
    }
}

TEST_CASE("verdicts: read-your-writes, history, durability", "[service]") {
    TempDir tmp;
    write_run(tmp / "r", {rec("a/1.png", 0.9), rec("a/2.png", 0.8), rec("b/3.png", 0.7)}, some_prompts());
    {
        CurationService service({tmp / "r"});
        const auto ack = service.submit_verdict("r", verdict("a/1.png", Decision::Offensive));
        CHECK(ack.timestamp > 1600000000);
        auto page = service.list_flagged("r", {}, "", 10);
        REQUIRE(page.items[0].verdict);
        CHECK(page.items[0].verdict->decision == Decision::Offensive);

        service.submit_verdict("r", verdict("a/1.png", Decision::Keep, "bob"));
        page = service.list_flagged("r", {}, "", 10);
        CHECK(page.items[0].verdict->decision == Decision::Keep);
        CHECK(page.items[0].verdict->reviewer == "bob");
        const auto history = service.verdict_history("r", "a/1.png");
        REQUIRE(history.size() == 2);
        CHECK(history[0].decision == Decision::Offensive);

        ListFilter kept;
        kept.status = "keep";
        CHECK(all_pages(service, "r", kept, 5) == std::vector<std::string>{"a/1.png"});
        ListFilter open;
        open.status = "unreviewed";
        CHECK(all_pages(service, "r", open, 5) == std::vector<std::string>{"a/2.png", "b/3.png"});

        CHECK(code_of([&] { service.submit_verdict("r", verdict("zz.png", Decision::Keep)); }) ==
              ErrorCode::UnknownRecord);
        CHECK(code_of([&] { service.verdict_history("r", "zz.png"); }) == ErrorCode::UnknownRecord);
        CHECK(code_of([] { decision_from_string("maybe"); }) == ErrorCode::InvalidArgument);
    }
    // a torn, unacknowledged tail is dropped on restart
    std::ofstream(tmp / "r" / "verdicts.jsonl", std::ios::app) << R"({"id":"b/3.png","decis)";
    {
        CurationService service({tmp / "r"});
        const auto history = service.verdict_history("r", "a/1.png");
        REQUIRE(history.size() == 2);
        CHECK(history[1].decision == Decision::Keep);
        CHECK(service.verdict_history("r", "b/3.png").empty());
        service.submit_verdict("r", verdict("b/3.png", Decision::Unsure));
    }
    CurationService again({tmp / "r"});
    CHECK(again.verdict_history("r", "b/3.png").size() == 1);

    // corruption in the middle of the log is an error, not silently skipped
    std::ofstream(tmp / "r" / "verdicts.jsonl", std::ios::app) << "garbage\n" << R"({"id":"a/2.png","decision":"keep"})" << "\n";
    CHECK(code_of([&] { CurationService broken({tmp / "r"}); }) == ErrorCode::StorageFailure);
}

TEST_CASE("runs are discovered under a parent directory", "[service]") {
    TempDir tmp;
    write_run(tmp / "all" / "beta", {rec("x/1.png", 0.9)}, some_prompts());
    write_run(tmp / "all" / "alpha", {rec("x/1.png", 0.2)}, some_prompts());
    CurationService service({tmp / "all"});
    CHECK(service.run_ids() == std::vector<std::string>{"alpha", "beta"});
    const auto runs = service.list_runs();
    CHECK(runs[1]["total_flagged"] == 1);
    CHECK(code_of([&] { CurationService none({tmp / "missing"}); }) == ErrorCode::UnknownRun);
    std::filesystem::create_directories(tmp / "hollow");
    CHECK(code_of([&] { CurationService none({tmp / "hollow"}); }) == ErrorCode::UnknownRun);
}

TEST_CASE("image access", "[service]") {
    TempDir tmp;
    const auto run = planted_run(tmp);
    CurationService service({run.dir});
    const std::string id = run.data.train[0].embedding.id;

    const auto image = service.get_image("planted", id, false);
    CHECK(image.bytes == read_file_bytes(run.images / id));
    CHECK(image.content_type == "image/png");

    const auto blurred = service.get_image("planted", id, true);
    CHECK(blurred.bytes != image.bytes);
    const auto a = decode_image(image.bytes), b = decode_image(blurred.bytes);
    CHECK(a.width() == b.width());
    CHECK(a.height() == b.height());

    write_text(tmp / "secret.txt", "x");
    CHECK(code_of([&] { service.get_image("planted", "../etc/passwd", false); }) == ErrorCode::Forbidden);
    CHECK(code_of([&] { service.get_image("planted", "pets/../../secret.txt", false); }) == ErrorCode::Forbidden);
    CHECK(code_of([&] { service.get_image("planted", "/etc/passwd", false); }) == ErrorCode::Forbidden);
    CHECK(code_of([&] { service.get_image("planted", "pets/none.png", false); }) == ErrorCode::NotFound);
    std::filesystem::create_symlink(tmp / "secret.txt", run.images / "pets" / "link.png");
    CHECK(code_of([&] { service.get_image("planted", "pets/link.png", false); }) == ErrorCode::Forbidden);
    std::filesystem::remove(run.images / id);
    CHECK(code_of([&] { service.get_image("planted", id, false); }) == ErrorCode::NotFound);
}

TEST_CASE("evidence comes from the run's cache", "[service]") {
    TempDir tmp;
    const auto run = planted_run(tmp);
    CurationService service({run.dir});
    const std::string id = run.data.train[3].embedding.id;
    const auto ev = service.evidence("planted", id, 4);
    REQUIRE(ev.anchors.size() == 2);
    CHECK(ev.anchors[0].neighbors.size() == 4);

    const auto cache = read_cache(tmp / "cache.bin");
    const auto prompts = service.active_promptset("planted");
    const auto direct = evidence(cache.embedding(id), prompts, cache.embeddings(), 4);
    CHECK(to_json(ev) == to_json(direct));
    CHECK(code_of([&] { service.evidence("planted", "nope", 4); }) == ErrorCode::UnknownRecord);
}

TEST_CASE("retune from verdicts", "[service]") {
    TempDir tmp;
    const auto run = planted_run(tmp);
    CurationService service({run.dir});
    CHECK(service.active_version("planted") == 1);
    const auto before = service.active_promptset("planted");

    for (std::size_t i = 0; i < 25; ++i) {
        service.submit_verdict("planted", verdict(run.data.train[i].embedding.id, Decision::Unsure));
    }
    TuneConfig config;
    config.seed = 5;
    config.max_steps = 200;
    config.batch_size = 8;
    CHECK(code_of([&] { service.start_retune("planted", config); }) == ErrorCode::InsufficientVerdicts);

    for (std::size_t i = 0; i < 20; ++i) {
        const auto& e = run.data.train[i];
        service.submit_verdict("planted",
                               verdict(e.embedding.id, e.label == Label::Offensive ? Decision::Offensive : Decision::Keep));
    }
    const auto first = service.wait_job(service.start_retune("planted", config));
    INFO(first.error_message);
    REQUIRE(first.state == JobState::Succeeded);
    CHECK(first.examples == 20);
    CHECK(*first.version == 2);
    CHECK(first.loss_per_epoch.size() == first.report["loss_per_epoch"].size());

    // stored, not activated
    CHECK(service.active_version("planted") == 1);
    CHECK(to_json(service.active_promptset("planted")) == to_json(before));
    const auto tuned = service.promptset("planted", 2);
    CHECK(accuracy(tuned, run.data.test) >= 0.95);
    CHECK(tuned.provenance.kind == "tuned");

    const auto second = service.wait_job(service.start_retune("planted", config));
    REQUIRE(second.state == JobState::Succeeded);
    CHECK(*second.version == 3);
    CHECK(to_json(service.promptset("planted", 3)) == to_json(tuned));

    service.activate("planted", 2);
    CHECK(service.active_version("planted") == 2);
    CHECK(code_of([&] { service.activate("planted", 9); }) == ErrorCode::NotFound);
    CHECK(code_of([&] { service.job("job-99"); }) == ErrorCode::UnknownJob);

    // the registry and activation survive a restart
    CurationService reopened({run.dir});
    CHECK(reopened.active_version("planted") == 2);
    CHECK(reopened.list_promptsets("planted")["versions"].size() == 3);
    CHECK(reopened.summary("planted")["review"]["labelled"] == 20);
}

TEST_CASE("a failing retune job reports its error", "[service]") {
    TempDir tmp;
    const auto run = planted_run(tmp);
    ServiceOptions options;
    options.min_verdicts = 2;
    CurationService service({run.dir}, options);
    for (std::size_t i = 0; i < 4; ++i) {
        service.submit_verdict("planted", verdict(run.data.train[i].embedding.id, Decision::Offensive));
    }
    TuneConfig config;
    config.learning_rate = 1e308;
    config.renormalize = false;
    const auto status = service.wait_job(service.start_retune("planted", config));
    CHECK(status.state == JobState::Failed);
    CHECK(status.error_code == "Divergence");
    CHECK(to_json(status)["error"]["code"] == "Divergence");
}

TEST_CASE("HTTP API", "[service][http]") {
    TempDir tmp;
    const auto run = planted_run(tmp);
    ServiceOptions options;
    options.min_verdicts = 4;
    CurationService service({run.dir}, options);
    HttpFrontend frontend(service);
    const int port = frontend.bind("127.0.0.1", 0);
    std::thread server([&] { frontend.serve(); });
    frontend.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto get_json = [&](const std::string& path, int status = 200) {
        const auto res = client.Get(path);
        REQUIRE(res);
        INFO(path << " -> " << res->body);
        CHECK(res->status == status);
        return nlohmann::json::parse(res->body);
    };
    auto post_json = [&](const std::string& path, const nlohmann::json& body, int status) {
        const auto res = client.Post(path, body.dump(), "application/json");
        REQUIRE(res);
        INFO(path << " -> " << res->body);
        CHECK(res->status == status);
        return nlohmann::json::parse(res->body);
    };

    const auto runs = get_json("/api/v1/runs");
    REQUIRE(runs.size() == 1);
    CHECK(runs[0]["id"] == "planted");

    std::vector<std::string> paged;
    std::string cursor;
    for (;;) {
        const auto page = get_json("/api/v1/runs/planted/flagged?all=1&limit=7" +
                                   (cursor.empty() ? std::string() : "&cursor=" + cursor));
        for (const auto& item : page["items"]) paged.push_back(item["id"]);
        if (page["next_cursor"].is_null()) break;
        cursor = page["next_cursor"];
    }
    CHECK(paged.size() == 60);
    CHECK(std::set<std::string>(paged.begin(), paged.end()).size() == 60);

    const std::string id = run.data.train[0].embedding.id;
    const auto ack = post_json("/api/v1/runs/planted/verdicts", {{"id", id}, {"decision", "offensive"}, {"reviewer", "ann"}}, 201);
    CHECK(ack["decision"] == "offensive");
    const auto listed = get_json("/api/v1/runs/planted/flagged?all=1&status=offensive");
    REQUIRE(listed["items"].size() == 1);
    CHECK(listed["items"][0]["verdict"]["reviewer"] == "ann");
    CHECK(get_json("/api/v1/runs/planted/verdicts?id=" + id)["history"].size() == 1);

    auto err = post_json("/api/v1/runs/planted/verdicts", {{"id", "nope"}, {"decision", "keep"}}, 404);
    CHECK(err["code"] == "UnknownRecord");
    err = post_json("/api/v1/runs/planted/verdicts", {{"id", id}, {"decision", "maybe"}}, 400);
    CHECK(err["code"] == "InvalidArgument");
    {
        const auto res = client.Post("/api/v1/runs/planted/verdicts", "{not json", "application/json");
        REQUIRE(res);
        CHECK(res->status == 400);
        CHECK(nlohmann::json::parse(res->body)["code"] == "ParseFailure");
    }
    CHECK(get_json("/api/v1/runs/nope/summary", 404)["code"] == "UnknownRun");
    CHECK(get_json("/api/v1/runs/planted/flagged?cursor=xyz", 400)["code"] == "BadCursor");
    CHECK(get_json("/api/v1/nowhere", 404)["code"] == "NotFound");

    const auto image = client.Get("/api/v1/runs/planted/image/" + id);
    REQUIRE(image);
    CHECK(image->status == 200);
    CHECK(image->get_header_value("Content-Type") == "image/png");
    CHECK(image->body.size() == std::filesystem::file_size(run.images / id));
    CHECK(image->get_header_value("Access-Control-Allow-Origin") == "*");
    const auto blurred = client.Get("/api/v1/runs/planted/image/" + id + "?blur=1");
    REQUIRE(blurred);
    CHECK(blurred->body != image->body);
    CHECK(get_json("/api/v1/runs/planted/image/%2E%2E%2Fetc%2Fpasswd", 403)["code"] == "Forbidden");

    const auto ev = get_json("/api/v1/runs/planted/evidence/" + id + "?k=3");
    CHECK(ev["anchors"][0]["neighbors"].size() == 3);

    const auto summary = get_json("/api/v1/runs/planted/summary");
    CHECK(summary["total_scanned"] == 60);
    CHECK(summary["review"]["min_verdicts"] == 4);

    CHECK(post_json("/api/v1/runs/planted/retune", nlohmann::json::object(), 409)["code"] == "InsufficientVerdicts");
    for (std::size_t i = 1; i < 6; ++i) {
        const auto& e = run.data.train[i];
        post_json("/api/v1/runs/planted/verdicts",
                  {{"id", e.embedding.id}, {"decision", e.label == Label::Offensive ? "offensive" : "keep"}}, 201);
    }
    const auto job = post_json("/api/v1/runs/planted/retune", {{"config", {{"max_epochs", 3}, {"seed", 2}}}}, 202);
    const std::string job_id = job["id"];
    nlohmann::json status;
    for (int i = 0; i < 2000; ++i) {
        status = get_json("/api/v1/jobs/" + job_id);
        if (status["state"] != "running") break;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    CHECK(status["state"] == "succeeded");
    CHECK(status["version"] == 2);
    CHECK(get_json("/api/v1/jobs/job-404", 404)["code"] == "UnknownJob");

    CHECK(get_json("/api/v1/runs/planted/promptsets")["active"] == 1);
    CHECK(post_json("/api/v1/runs/planted/promptsets/2/activate", nlohmann::json::object(), 200)["active"] == 2);
    CHECK(get_json("/api/v1/runs/planted/summary")["review"]["active_promptset"]["version"] == 2);
    CHECK(post_json("/api/v1/runs/planted/promptsets/7/activate", nlohmann::json::object(), 404)["code"] == "NotFound");

    const auto preflight = client.Options("/api/v1/runs/planted/verdicts");
    REQUIRE(preflight);
    CHECK(preflight->status == 204);
    CHECK(preflight->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

    frontend.stop();
    server.join();
}
