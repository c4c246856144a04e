#include "deskgrid/provisioning.hpp"

#include "deskgrid/config.hpp"
#include "deskgrid/transport.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

namespace deskgrid::fabric {

namespace fs = std::filesystem;
using nlohmann::json;

void ProvisioningService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    if (ctx.container().provider()) return;  // embedder supplied one

    LocalSpawnProvider::Options options;
    options.binary = ctx.opt_str("binary", "");
    if (options.binary.empty()) {
        char buf[4096];
        ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
        if (n > 0) {
            buf[n] = '\0';
            options.binary = buf;
        }
    }
    options.config_dir = ctx.opt_str("config_dir", (fs::temp_directory_path() / "deskgrid-spawn").string());
    options.max_nodes = static_cast<int>(ctx.opt_int("max_nodes", 8));
    options.seed = ctx.opt_str("seed", "");
    ctx.container().set_provider(std::make_shared<LocalSpawnProvider>(std::move(options)));
}

Result<Bytes> ProvisioningService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "prov.request") {
        security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                    body.value("credentials", json::object()).value("token", "")};
        auto principal = ctx_->security().authenticate(creds);
        if (!principal) return make_error(errc::unauthenticated, "authentication failed");
        if (!ctx_->security().authorize(principal.value(), security::Action::Admin)) {
            return make_error(errc::denied, "denied");
        }
        auto provider = ctx_->container().provider();
        if (!provider) return make_error(errc::provider_unavailable, "no provider registered");

        ProvisionRequest req;
        req.count = body.value("count", 1);
        req.required_services = body.value("required_services", std::vector<std::string>{"executor"});
        req.ttl_seconds = body.value("ttl_seconds", std::int64_t{0});
        if (req.count < 1) return make_error(errc::invalid_request, "count must be >= 1");

        auto endpoints = provider->provision(req);
        if (!endpoints) return endpoints.error();
        std::vector<std::string> out;
        for (const auto& ep : endpoints.value()) out.push_back(ep.to_string());
        return to_bytes(json{{"endpoints", out}}.dump());
    }
    if (request.kind == "prov.status") {
        auto provider = ctx_->container().provider();
        return to_bytes(json{{"provider", provider ? provider->name() : ""}}.dump());
    }
    return make_error(errc::invalid_request, "unknown provisioning verb: " + request.kind);
}

// ---------------------------------------------------------------------------
// LocalSpawnProvider
// ---------------------------------------------------------------------------

namespace {

/// Grabs a currently free localhost port. The tiny race until the child binds
/// is acceptable at desk scale.
Result<std::uint16_t> reserve_port() {
    auto listener = TcpListener::bind(Endpoint{"127.0.0.1", 0});
    if (!listener) return listener.error();
    std::uint16_t port = listener.value().local_endpoint().port;
    listener.value().shutdown();
    return port;
}

}  // namespace

LocalSpawnProvider::LocalSpawnProvider(Options options) : options_(std::move(options)) {}

LocalSpawnProvider::~LocalSpawnProvider() {
    for (int pid : children_) {
        int status = 0;
        ::waitpid(pid, &status, WNOHANG);
    }
}

Result<std::vector<Endpoint>> LocalSpawnProvider::provision(const ProvisionRequest& request) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (options_.binary.empty()) return make_error(errc::provider_unavailable, "no node binary configured");
    if (spawned_ + request.count > options_.max_nodes) {
        return make_error(errc::capacity_exceeded,
                          "provider capacity " + std::to_string(options_.max_nodes) + " reached");
    }
    std::error_code ec;
    fs::create_directories(options_.config_dir, ec);

    // Reap any children that exited on their own (ttl decommission).
    for (int pid : children_) {
        int status = 0;
        ::waitpid(pid, &status, WNOHANG);
    }

    std::vector<Endpoint> endpoints;
    for (int i = 0; i < request.count; ++i) {
        auto port = reserve_port();
        if (!port) return port.error();

        ContainerConfig config;
        config.node_id = new_uuid();
        config.listen_endpoint = "127.0.0.1:" + std::to_string(port.value());
        for (const auto& service : request.required_services) config.services.push_back({service, {}});
        for (const auto& service : options_.base_services) {
            if (!config.hosts(service)) config.services.push_back({service, {}});
        }
        if (!options_.seed.empty()) config.seed_peers.push_back(options_.seed);
        if (request.ttl_seconds > 0) config.options["ttl_seconds"] = request.ttl_seconds;

        std::string config_path =
            (fs::path(options_.config_dir) / ("node-" + config.node_id.substr(0, 8) + ".json")).string();
        if (auto st = config.save_file(config_path); !st) return st.error();

        pid_t pid = ::fork();
        if (pid < 0) return make_error(errc::provider_unavailable, "fork failed");
        if (pid == 0) {
            ::execl(options_.binary.c_str(), options_.binary.c_str(), "--config", config_path.c_str(),
                    static_cast<char*>(nullptr));
            _exit(127);
        }
        children_.push_back(pid);

        // The node is provisioned once its container answers.
        Endpoint ep{"127.0.0.1", port.value()};
        bool up = false;
        for (int tries = 0; tries < 100; ++tries) {
            auto sock = tcp_connect(ep, 100);
            if (sock) {
                up = true;
                break;
            }
            deskgrid::sleep_ms(100);
        }
        if (!up) {
            return make_error(errc::provider_unavailable, "spawned node never came up on " + ep.to_string());
        }
        endpoints.push_back(ep);
        ++spawned_;
    }
    return endpoints;
}

}  // namespace deskgrid::fabric
