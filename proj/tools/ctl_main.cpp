// Admin CLI: cloud setup, node control, monitoring, submission, reservation.
//
// Exit codes: 0 ok, 2 usage, 3 connection failed, 4 authentication/authorization,
// 5 invalid request or rejected, 6 not found, 7 counter-offer pending.

#include "deskgrid/appmodel.hpp"
#include "deskgrid/config.hpp"
#include "deskgrid/stats.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iostream>

using deskgrid::Endpoint;
using deskgrid::Error;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int exit_code_for(const Error& error) {
    using namespace deskgrid::errc;
    const std::string& code = error.code;
    if (code == timeout || code == connection_failed || code == no_seed_reachable ||
        code == channel_unreachable) {
        return 3;
    }
    if (code == unauthenticated || code == denied || code == auth_failed) return 4;
    if (code == not_found || code == unknown_node || code == unknown_application ||
        code == unknown_job) {
        return 6;
    }
    return 5;
}

int fail(const Error& error) {
    std::fprintf(stderr, "error: %s\n", error.to_string().c_str());
    return exit_code_for(error);
}

deskgrid::Result<Endpoint> parse_master(const std::string& master) {
    return deskgrid::parse_endpoint(master);
}

int cmd_init(const std::string& dir, int nodes, int base_port, const std::string& security,
             const std::string& persistence, int license_max_nodes, int heartbeat_ms) {
    if (nodes < 1) {
        std::fprintf(stderr, "error: --nodes must be >= 1\n");
        return 5;
    }
    std::error_code ec;
    fs::create_directories(dir, ec);

    std::string master_endpoint = "127.0.0.1:" + std::to_string(base_port);
    deskgrid::ContainerConfig master;
    master.node_id = "master";
    master.listen_endpoint = master_endpoint;
    master.services = {{"directory", {}}, {"reservation", {}},  {"storage", {}},
                       {"scheduler", {}}, {"accounting", {}},   {"provisioning", json{{"seed", master_endpoint}}},
                       {"http", {}},      {"allocation", {}},   {"executor", {}}};
    master.security_provider = security;
    master.persistence_provider = persistence;
    master.heartbeat_interval_ms = heartbeat_ms;
    master.license_max_nodes = license_max_nodes;
    master.options["store_dir"] = (fs::path(dir) / "store").string();
    master.options["http_port"] = base_port + 1000;
    if (security == "token") master.options["credential_file"] = (fs::path(dir) / "credentials").string();
    if (auto st = master.save_file((fs::path(dir) / "master.json").string()); !st) return fail(st.error());

    for (int i = 1; i < nodes; ++i) {
        deskgrid::ContainerConfig worker;
        worker.node_id = "w" + std::to_string(i);
        worker.listen_endpoint = "127.0.0.1:" + std::to_string(base_port + i);
        worker.services = {{"allocation", {}}, {"executor", {}}};
        worker.seed_peers = {master_endpoint};
        worker.security_provider = security;
        worker.heartbeat_interval_ms = heartbeat_ms;
        if (security == "token") worker.options["credential_file"] = (fs::path(dir) / "credentials").string();
        std::string name = "w" + std::to_string(i) + ".json";
        if (auto st = worker.save_file((fs::path(dir) / name).string()); !st) return fail(st.error());
    }
    std::printf("wrote %d config(s) under %s (master at %s, http admin on port %d)\n", nodes, dir.c_str(),
                master_endpoint.c_str(), base_port + 1000);
    std::printf("start them with: ctl node start <name> --dir %s\n", dir.c_str());
    return 0;
}

int cmd_node_start(const std::string& name, const std::string& dir, const std::string& binary) {
    std::string config_path = (fs::path(dir) / (name + ".json")).string();
    if (!fs::exists(config_path)) {
        std::fprintf(stderr, "error: no config %s\n", config_path.c_str());
        return 6;
    }
    std::string node_binary = binary;
    if (node_binary.empty()) {
        // dgnode sits next to this binary in the build and install trees.
        char buf[4096];
        ssize_t n = ::readlink("/proc/self/exe", buf, sizeof(buf) - 1);
        if (n > 0) {
            buf[n] = '\0';
            node_binary = (fs::path(buf).parent_path() / "dgnode").string();
        }
    }
    pid_t pid = ::fork();
    if (pid < 0) {
        std::fprintf(stderr, "error: fork failed\n");
        return 3;
    }
    if (pid == 0) {
        ::execl(node_binary.c_str(), node_binary.c_str(), "--config", config_path.c_str(),
                static_cast<char*>(nullptr));
        _exit(127);
    }
    auto config = deskgrid::ContainerConfig::load_file(config_path);
    std::printf("started %s (pid %d)%s\n", name.c_str(), pid,
                config ? (" on " + config.value().listen_endpoint).c_str() : "");
    return 0;
}

json parse_json_or_die(const std::string& text, int* rc) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) {
        std::fprintf(stderr, "error: malformed JSON: %s\n", text.c_str());
        *rc = 5;
        return json::object();
    }
    *rc = 0;
    return doc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"deskgrid admin CLI"};
    cli.require_subcommand(1);

    std::string master = "127.0.0.1:7000";
    std::string user;
    std::string token;
    cli.add_option("--master", master, "master endpoint host:port")->capture_default_str();
    cli.add_option("--user", user, "credential user id");
    cli.add_option("--token", token, "credential token");

    // init
    auto* init = cli.add_subcommand("init", "write config files for a local cloud");
    int nodes = 4;
    int base_port = 7000;
    std::string dir = "cloud";
    std::string security = "anonymous";
    std::string persistence = "volatile";
    int license_max_nodes = 0;
    int heartbeat_ms = 1000;
    init->add_option("--nodes", nodes, "total node count including the master")->capture_default_str();
    init->add_option("--dir", dir, "output directory")->capture_default_str();
    init->add_option("--base-port", base_port, "first listen port")->capture_default_str();
    init->add_option("--security", security, "anonymous|token")->capture_default_str();
    init->add_option("--persistence", persistence, "volatile|durable (master)")->capture_default_str();
    init->add_option("--license-max-nodes", license_max_nodes, "0 = unlimited")->capture_default_str();
    init->add_option("--heartbeat-ms", heartbeat_ms, "heartbeat interval")->capture_default_str();

    // node install/start/stop
    auto* node = cli.add_subcommand("node", "node control");
    node->require_subcommand(1);
    auto* node_install = node->add_subcommand("install", "provision new nodes via the master's provider");
    int install_count = 1;
    std::int64_t ttl_seconds = 0;
    node_install->add_option("--count", install_count)->capture_default_str();
    node_install->add_option("--ttl", ttl_seconds, "decommission after this many seconds");
    auto* node_start = node->add_subcommand("start", "launch a configured container locally");
    std::string start_name;
    std::string start_dir = "cloud";
    std::string node_binary;
    node_start->add_option("name", start_name, "config name, e.g. master or w1")->required();
    node_start->add_option("--dir", start_dir)->capture_default_str();
    node_start->add_option("--binary", node_binary, "path to dgnode");
    auto* node_stop = node->add_subcommand("stop", "drain and stop a node");
    std::string stop_node;
    node_stop->add_option("node", stop_node, "node id")->required();

    // stats / watch
    auto* stats_cmd = cli.add_subcommand("stats", "print cloud statistics once");
    bool as_json = false;
    stats_cmd->add_flag("--json", as_json, "machine-readable output");
    auto* watch = cli.add_subcommand("watch", "reprint statistics periodically");
    int interval_ms = 2000;
    watch->add_option("--interval-ms", interval_ms)->capture_default_str();

    // submit
    auto* submit = cli.add_subcommand("submit", "submit tasks and wait");
    std::string operation = "sleep_ms";
    std::string params_text = "{}";
    int count = 1;
    bool no_wait = false;
    submit->add_option("--operation", operation)->capture_default_str();
    submit->add_option("--params", params_text, "operation parameters (JSON)")->capture_default_str();
    submit->add_option("--count", count, "copies of the task")->capture_default_str();
    submit->add_flag("--no-wait", no_wait, "fire and forget");

    // reserve
    auto* reserve = cli.add_subcommand("reserve", "request an advance reservation");
    int r_nodes = 1;
    std::int64_t r_start_in = 60;
    std::int64_t r_window = 3600;
    std::int64_t r_duration = 600;
    bool r_accept = false;
    reserve->add_option("--nodes", r_nodes)->capture_default_str();
    reserve->add_option("--start-in", r_start_in, "earliest start, seconds from now")->capture_default_str();
    reserve->add_option("--window", r_window, "latest end, seconds from now")->capture_default_str();
    reserve->add_option("--duration", r_duration, "seconds")->capture_default_str();
    reserve->add_flag("--accept", r_accept, "accept counter offers until confirmed");

    CLI11_PARSE(cli, argc, argv);

    deskgrid::security::Credentials credentials{user, token};

    if (init->parsed()) {
        return cmd_init(dir, nodes, base_port, security, persistence, license_max_nodes, heartbeat_ms);
    }
    if (node->parsed() && node_start->parsed()) {
        return cmd_node_start(start_name, start_dir, node_binary);
    }

    auto master_ep = parse_master(master);
    if (!master_ep) return fail(master_ep.error());
    deskgrid::ctl::AdminClient admin(master_ep.value(), credentials);
    if (auto st = admin.connect(); !st) return fail(st.error());

    if (node->parsed() && node_install->parsed()) {
        auto endpoints = admin.node_install(install_count, ttl_seconds);
        if (!endpoints) return fail(endpoints.error());
        for (const auto& ep : endpoints.value()) std::printf("%s\n", ep.c_str());
        return 0;
    }
    if (node->parsed() && node_stop->parsed()) {
        if (auto st = admin.node_stop(stop_node); !st) return fail(st.error());
        std::printf("stopped %s\n", stop_node.c_str());
        return 0;
    }
    if (stats_cmd->parsed()) {
        auto stats = admin.stats();
        if (!stats) return fail(stats.error());
        std::printf("%s", as_json ? (stats.value().to_json().dump(2) + "\n").c_str()
                                  : stats.value().to_text().c_str());
        return 0;
    }
    if (watch->parsed()) {
        while (true) {
            auto stats = admin.stats();
            if (!stats) return fail(stats.error());
            std::printf("---- %lld\n%s", static_cast<long long>(deskgrid::now_ms()),
                        stats.value().to_text().c_str());
            std::fflush(stdout);
            deskgrid::sleep_ms(interval_ms);
        }
    }
    if (submit->parsed()) {
        int rc = 0;
        json params = parse_json_or_die(params_text, &rc);
        if (rc != 0) return rc;
        auto app = admin.client().create_application("task", "ctl submit");
        if (!app) return fail(app.error());
        for (int i = 0; i < count; ++i) {
            auto id = app.value().add_unit(operation, deskgrid::to_bytes(params.dump()));
            if (!id) return fail(id.error());
        }
        if (auto st = app.value().submit(); !st) return fail(st.error());
        std::printf("submitted %d job(s) to application %s\n", count, app.value().app_id().c_str());
        if (no_wait) return 0;
        auto final_states = app.value().wait(-1);
        if (!final_states) return fail(final_states.error());
        int failed = 0;
        for (const auto& [id, job] : final_states.value()) {
            std::printf("%s  %s  %s\n", id.c_str(), deskgrid::exec::job_state_name(job.state),
                        job.state == deskgrid::exec::JobState::Completed
                            ? deskgrid::to_string(job.result).c_str()
                            : job.failure_cause.c_str());
            if (job.state != deskgrid::exec::JobState::Completed) ++failed;
        }
        return failed == 0 ? 0 : 5;
    }
    if (reserve->parsed()) {
        auto now = deskgrid::now_s();
        auto outcome = admin.reserve(r_nodes, now + r_start_in, now + r_start_in + r_window, r_duration);
        while (true) {
            if (!outcome) return fail(outcome.error());
            std::string kind = outcome.value().value("outcome", "");
            std::printf("%s\n", outcome.value().dump(2).c_str());
            if (kind == "confirmed") return 0;
            if (kind == "rejected") return 5;
            if (!r_accept) return 7;  // counter-offer pending
            outcome = admin.accept_counter(outcome.value().value("counter", json::object()));
        }
    }
    return 2;
}
