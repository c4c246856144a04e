#include "deskgrid/http_api.hpp"

#include "deskgrid/stats.hpp"

#include <httplib.h>

namespace deskgrid::ctl {

using nlohmann::json;

struct HttpApiService::Impl {
    httplib::Server server;
};

namespace {

/// "Bearer user:token" → credentials json; empty object when absent.
json bearer_credentials(const httplib::Request& req) {
    auto header = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    if (header.rfind(prefix, 0) != 0) return json::object();
    std::string token = header.substr(prefix.size());
    auto colon = token.find(':');
    if (colon == std::string::npos) return json{{"user_id", ""}, {"token", token}};
    return json{{"user_id", token.substr(0, colon)}, {"token", token.substr(colon + 1)}};
}

int status_for_error(const Error& error) {
    if (error.code == errc::unauthenticated || error.code == errc::denied) return 401;
    if (error.code == errc::unknown_application || error.code == errc::not_found ||
        error.code == errc::unknown_node || error.code == errc::unknown_job) {
        return 404;
    }
    if (error.code == errc::invalid_request || error.code == errc::unknown_operation ||
        error.code == errc::unknown_model) {
        return 422;
    }
    return 500;
}

void reply_error(httplib::Response& res, const Error& error) {
    res.status = status_for_error(error);
    res.set_content(json{{"error", error.code}, {"message", error.message}}.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json doc = json::parse(req.body, nullptr, false);
    return doc.is_discarded() ? json::object() : doc;
}

}  // namespace

HttpApiService::HttpApiService() : impl_(std::make_unique<Impl>()) {}
HttpApiService::~HttpApiService() = default;

Result<Bytes> HttpApiService::handle(const Envelope& request) {
    if (request.kind == "http.port") {
        return to_bytes(json{{"port", port_}}.dump());
    }
    return make_error(errc::invalid_request, "http adapter takes no envelope verbs");
}

void HttpApiService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    auto& server = impl_->server;

    auto local = [this](const std::string& service, const std::string& kind,
                        json body) -> Result<json> {
        auto reply = ctx_->call_local(service, kind, to_bytes(body.dump()), 10000);
        if (!reply) return reply.error();
        json doc = json::parse(to_string(reply.value()), nullptr, false);
        if (doc.is_discarded()) return make_error(errc::invalid_envelope, "reply is not JSON");
        return doc;
    };

    server.Post("/applications", [local](const httplib::Request& req, httplib::Response& res) {
        json body = parse_body(req);
        body["credentials"] = bearer_credentials(req);
        auto reply = local("scheduler", "app.create", std::move(body));
        if (!reply) return reply_error(res, reply.error());
        res.set_content(reply.value().dump(), "application/json");
    });

    server.Post(R"(/applications/([^/]+)/jobs)", [local](const httplib::Request& req, httplib::Response& res) {
        json body = parse_body(req);
        body["app_id"] = req.matches[1].str();
        body["credentials"] = bearer_credentials(req);
        // Accept plain-text parameters in HTTP bodies; the envelope form is
        // base64.
        if (body.contains("jobs")) {
            for (auto& job : body["jobs"]) {
                if (job.contains("parameters_text")) {
                    job["parameters"] = base64_encode(to_bytes(job["parameters_text"].get<std::string>()));
                    job.erase("parameters_text");
                }
            }
        }
        auto reply = local("scheduler", "app.submit", std::move(body));
        if (!reply) return reply_error(res, reply.error());
        res.set_content(reply.value().dump(), "application/json");
    });

    server.Get(R"(/applications/([^/]+))", [local](const httplib::Request& req, httplib::Response& res) {
        auto reply = local("scheduler", "app.query", json{{"app_id", req.matches[1].str()}});
        if (!reply) return reply_error(res, reply.error());
        res.set_content(reply.value().dump(), "application/json");
    });

    server.Post("/reservations", [local](const httplib::Request& req, httplib::Response& res) {
        json body = parse_body(req);
        json payload = {{"request", body.contains("request") ? body["request"] : body},
                        {"credentials", bearer_credentials(req)}};
        auto reply = local("reservation", "res.request", std::move(payload));
        if (!reply) return reply_error(res, reply.error());
        const json& outcome = reply.value();
        std::string kind = outcome.value("outcome", "");
        if (kind == "confirmed") {
            res.status = 200;
        } else if (kind == "counter") {
            res.status = 409;
        } else {
            res.status = 422;
        }
        res.set_content(outcome.dump(), "application/json");
    });

    server.Get("/nodes", [local](const httplib::Request&, httplib::Response& res) {
        auto reply = local("directory", "dir.query", json{{"service", ""}});
        if (!reply) return reply_error(res, reply.error());
        res.set_content(reply.value().dump(), "application/json");
    });

    server.Get("/stats", [local](const httplib::Request&, httplib::Response& res) {
        auto stats = collect_stats(local);
        if (!stats) return reply_error(res, stats.error());
        res.set_content(stats.value().to_json().dump(), "application/json");
    });

    std::string host = ctx.opt_str("http_host", "127.0.0.1");
    int configured = static_cast<int>(ctx.opt_int("http_port", 0));
    if (configured > 0) {
        if (!server.bind_to_port(host, configured)) {
            throw std::runtime_error("http adapter cannot bind port " + std::to_string(configured));
        }
        port_ = configured;
    } else {
        port_ = server.bind_to_any_port(host);
        if (port_ <= 0) throw std::runtime_error("http adapter cannot bind a port");
    }
    server_thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
    DG_LOG_INFO("http", "admin api on " + host + ":" + std::to_string(port_));
}

void HttpApiService::stop() {
    impl_->server.stop();
    if (server_thread_.joinable()) server_thread_.join();
}

}  // namespace deskgrid::ctl
