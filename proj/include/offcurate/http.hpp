#pragma once

// JSON API under /api/v1 for the review UI, on top of CurationService.

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <string>

#include "offcurate/error.hpp"
#include "offcurate/service.hpp"

namespace offcurate {

inline int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownRun:
        case ErrorCode::UnknownRecord:
        case ErrorCode::UnknownJob:
        case ErrorCode::NotFound: return 404;
        case ErrorCode::Forbidden: return 403;
        case ErrorCode::InsufficientVerdicts:
        case ErrorCode::MissingEmbeddings: return 409;
        case ErrorCode::StorageFailure:
        case ErrorCode::IoFailure:
        case ErrorCode::CorruptCache: return 500;
        default: return 400;
    }
}

struct HttpOptions {
    std::string allowed_origin = "*";
    std::size_t default_page = 50;
    std::size_t default_evidence_k = 5;
};

class HttpFrontend {
public:
    explicit HttpFrontend(CurationService& service, HttpOptions options = {})
        : service_(service), options_(std::move(options)) {
        routes();
    }

    /// Binds `host:port`; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port) {
        const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) fail(ErrorCode::AddressInUse, "cannot listen on " + host + ":" + std::to_string(port));
        return bound;
    }

    /// Serves until stop() is called.
    void serve() { server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    bool running() const { return server_.is_running(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

private:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    static void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
        send_json(res, {{"code", code}, {"message", message}}, status);
    }

    Handler guarded(Handler h) const {
        return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                h(req, res);
            } catch (const Error& e) {
                send_error(res, http_status(e.code()), to_string(e.code()), e.what());
            } catch (const nlohmann::json::exception& e) {
                send_error(res, 400, "ParseFailure", e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "InternalError", e.what());
            }
        };
    }

    static nlohmann::json body_json(const httplib::Request& req) {
        if (req.body.empty()) return nlohmann::json::object();
        try {
            return nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::ParseFailure, std::string("request body: ") + e.what());
        }
    }

    static std::optional<std::string> param(const httplib::Request& req, const char* name) {
        if (!req.has_param(name)) return std::nullopt;
        return req.get_param_value(name);
    }

    static std::size_t size_param(const httplib::Request& req, const char* name, std::size_t fallback) {
        const auto v = param(req, name);
        if (!v) return fallback;
        try {
            std::size_t used = 0;
            const long long n = std::stoll(*v, &used);
            if (used != v->size() || n < 0) throw std::invalid_argument(*v);
            return static_cast<std::size_t>(n);
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidArgument, std::string(name) + " must be a non-negative integer");
        }
    }

    static std::optional<double> real_param(const httplib::Request& req, const char* name) {
        const auto v = param(req, name);
        if (!v) return std::nullopt;
        try {
            std::size_t used = 0;
            const double x = std::stod(*v, &used);
            if (used != v->size()) throw std::invalid_argument(*v);
            return x;
        } catch (const std::exception&) {
            fail(ErrorCode::InvalidArgument, std::string(name) + " must be a number");
        }
    }

    static nlohmann::json item_json(const ListItem& item) {
        nlohmann::json j = nlohmann::json::parse(to_jsonl(item.record));
        j["verdict"] = item.verdict ? to_json(*item.verdict) : nlohmann::json(nullptr);
        return j;
    }

    void routes() {
        // httplib also sets SO_REUSEPORT, which would let a second server share the port silently
        server_.set_socket_options([](socket_t sock) {
            int yes = 1;
            setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof yes);
        });
        server_.set_default_headers({{"Access-Control-Allow-Origin", options_.allowed_origin},
                                     {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                     {"Access-Control-Allow-Headers", "Content-Type"}});
        server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (res.body.empty()) send_error(res, res.status, "NotFound", "no route for " + req.method + " " + req.path);
        });

        const std::string api = "/api/v1";
        server_.Get(api + "/runs", guarded([this](const auto&, auto& res) { send_json(res, service_.list_runs()); }));

        server_.Get(api + R"(/runs/([^/]+)/summary)", guarded([this](const auto& req, auto& res) {
                        send_json(res, service_.summary(req.matches[1]));
                    }));

        server_.Get(api + R"(/runs/([^/]+)/flagged)", guarded([this](const auto& req, auto& res) {
                        ListFilter filter;
                        filter.class_dir = param(req, "class_dir");
                        filter.min_score = real_param(req, "min_score");
                        filter.max_score = real_param(req, "max_score");
                        filter.status = param(req, "status").value_or("any");
                        filter.include_unflagged = param(req, "all").value_or("0") == "1";
                        const auto page = service_.list_flagged(req.matches[1], filter, param(req, "cursor").value_or(""),
                                                                size_param(req, "limit", options_.default_page));
                        nlohmann::json items = nlohmann::json::array();
                        for (const auto& item : page.items) items.push_back(item_json(item));
                        send_json(res, {{"items", items},
                                        {"next_cursor", page.next_cursor ? nlohmann::json(*page.next_cursor)
                                                                         : nlohmann::json(nullptr)},
                                        {"total", page.total}});
                    }));

        server_.Get(api + R"(/runs/([^/]+)/image/(.+))", guarded([this](const auto& req, auto& res) {
                        const auto image = service_.get_image(req.matches[1], req.matches[2],
                                                              param(req, "blur").value_or("0") == "1");
                        res.set_content(std::string(image.bytes.begin(), image.bytes.end()), image.content_type);
                    }));

        server_.Get(api + R"(/runs/([^/]+)/evidence/(.+))", guarded([this](const auto& req, auto& res) {
                        send_json(res, to_json(service_.evidence(req.matches[1], req.matches[2],
                                                                 size_param(req, "k", options_.default_evidence_k))));
                    }));

        server_.Post(api + R"(/runs/([^/]+)/verdicts)", guarded([this](const auto& req, auto& res) {
                         const auto v = service_.submit_verdict(req.matches[1], verdict_from_json(body_json(req)));
                         send_json(res, to_json(v), 201);
                     }));

        server_.Get(api + R"(/runs/([^/]+)/verdicts)", guarded([this](const auto& req, auto& res) {
                        const auto id = param(req, "id");
                        if (!id) fail(ErrorCode::InvalidArgument, "id query parameter required");
                        nlohmann::json history = nlohmann::json::array();
                        for (const auto& v : service_.verdict_history(req.matches[1], *id)) history.push_back(to_json(v));
                        send_json(res, {{"id", *id}, {"history", history}});
                    }));

        server_.Get(api + R"(/runs/([^/]+)/promptsets)", guarded([this](const auto& req, auto& res) {
                        send_json(res, service_.list_promptsets(req.matches[1]));
                    }));

        server_.Post(api + R"(/runs/([^/]+)/promptsets/(\d+)/activate)", guarded([this](const auto& req, auto& res) {
                         const std::string run = req.matches[1];
                         service_.activate(run, std::stoul(req.matches[2]));
                         send_json(res, {{"run", run}, {"active", service_.active_version(run)}});
                     }));

        server_.Post(api + R"(/runs/([^/]+)/retune)", guarded([this](const auto& req, auto& res) {
                         const auto body = body_json(req);
                         const auto config = tune_config_from_json(body.value("config", nlohmann::json::object()));
                         const auto job = service_.start_retune(req.matches[1], config);
                         send_json(res, to_json(service_.job(job)), 202);
                     }));

        server_.Get(api + R"(/jobs/([^/]+))", guarded([this](const auto& req, auto& res) {
                        send_json(res, to_json(service_.job(req.matches[1])));
                    }));
    }

    CurationService& service_;
    HttpOptions options_;
    httplib::Server server_;
};

}  // namespace offcurate
