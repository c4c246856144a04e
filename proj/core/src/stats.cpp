#include "deskgrid/stats.hpp"

#include <sstream>

namespace deskgrid::ctl {

using nlohmann::json;

json NodeStats::to_json() const {
    return json{{"node_id", node_id},
                {"state", state},
                {"slots_busy", slots_busy},
                {"slots_total", slots_total},
                {"cpu_usage_percent", cpu_usage_percent},
                {"available_memory_mb", available_memory_mb}};
}

json CloudStats::to_json() const {
    json nodes = json::array();
    for (const auto& node : per_node) nodes.push_back(node.to_json());
    json jobs = json::object();
    for (const auto& [state, count] : jobs_by_state) jobs[state] = count;
    return json{{"nodes", nodes},
                {"nodes_alive", nodes_alive},
                {"jobs_by_state", jobs},
                {"reservations_active", reservations_active},
                {"throughput_jobs_per_min", throughput_jobs_per_min}};
}

std::string CloudStats::to_text() const {
    std::ostringstream out;
    out << "nodes alive: " << nodes_alive << "   reservations active: " << reservations_active
        << "   throughput: " << throughput_jobs_per_min << " jobs/min\n";
    out << "jobs:";
    if (jobs_by_state.empty()) out << " (none)";
    for (const auto& [state, count] : jobs_by_state) out << " " << state << "=" << count;
    out << "\n";
    for (const auto& node : per_node) {
        out << "  " << node.node_id << "  " << node.state << "  slots " << node.slots_busy << "/"
            << node.slots_total << "  cpu " << node.cpu_usage_percent << "%  mem "
            << node.available_memory_mb << " MB\n";
    }
    return out.str();
}

Result<CloudStats> collect_stats(const ServiceCall& call) {
    CloudStats stats;

    auto nodes = call("directory", "dir.query", json{{"service", ""}});
    if (!nodes) return nodes.error();

    json slots = json::object();
    auto sched = call("scheduler", "sched.stats", json::object());
    if (sched) {
        for (const auto& [state, count] : sched.value().value("jobs_by_state", json::object()).items()) {
            stats.jobs_by_state[state] = count.get<int>();
        }
        stats.throughput_jobs_per_min = sched.value().value("throughput_jobs_per_min", 0.0);
        slots = sched.value().value("slots", json::object());
    }

    for (const auto& record : nodes.value().value("records", json::array())) {
        NodeStats node;
        node.node_id = record.value("node_id", "");
        node.state = record.value("state", "");
        node.cpu_usage_percent = record.value("last_stats", json::object()).value("cpu_usage_percent", 0.0);
        node.available_memory_mb =
            record.value("last_stats", json::object()).value("available_memory_mb", std::int64_t{0});
        if (slots.contains(node.node_id)) {
            node.slots_busy = slots[node.node_id].value("busy", 0);
            node.slots_total = slots[node.node_id].value("total", 0);
        }
        if (node.state == "alive") ++stats.nodes_alive;
        stats.per_node.push_back(std::move(node));
    }

    auto resv = call("reservation", "res.mapview", json::object());
    if (resv) stats.reservations_active = resv.value().value("active_count", 0);

    return stats;
}

// ---------------------------------------------------------------------------
// AdminClient
// ---------------------------------------------------------------------------

AdminClient::AdminClient(Endpoint master, security::Credentials credentials)
    : client_(std::move(master), std::move(credentials)) {}

Result<CloudStats> AdminClient::stats() {
    return collect_stats([this](const std::string& service, const std::string& kind, json body) {
        return client_.call(service, kind, std::move(body));
    });
}

Result<std::vector<json>> AdminClient::nodes() {
    auto reply = client_.call("directory", "dir.query", json{{"service", ""}});
    if (!reply) return reply.error();
    std::vector<json> out;
    for (const auto& record : reply.value().value("records", json::array())) out.push_back(record);
    return out;
}

Result<std::vector<std::string>> AdminClient::node_install(int count, std::int64_t ttl_seconds) {
    json body = {{"count", count}, {"ttl_seconds", ttl_seconds}};
    auto reply = client_.call("provisioning", "prov.request", std::move(body), 60000);
    if (!reply) return reply.error();
    return reply.value().value("endpoints", std::vector<std::string>{});
}

Status AdminClient::node_stop(const std::string& node_id) {
    // Resolve the node's endpoint through the directory, then ask its
    // container to drain and stop.
    auto reply = client_.call("directory", "dir.query", json{{"service", ""}});
    if (!reply) return reply.error();
    for (const auto& record : reply.value().value("records", json::array())) {
        if (record.value("node_id", "") != node_id) continue;
        auto ep = parse_endpoint(record.value("endpoint", ""));
        if (!ep) return ep.error();
        app::Client direct(ep.value(), client_.credentials());
        if (auto st = direct.connect(); !st) return st;
        auto stopped = direct.call("_container", "ctl.stop", json::object());
        if (!stopped) return stopped.error();
        return Status::success();
    }
    return make_error(errc::unknown_node, node_id);
}

Result<json> AdminClient::reserve(int node_count, TimestampS earliest, TimestampS latest,
                                  std::int64_t duration_s) {
    json request = {{"node_count", node_count},
                    {"earliest", earliest},
                    {"latest", latest},
                    {"duration_s", duration_s},
                    {"required_services", std::vector<std::string>{"executor"}},
                    {"round", 0}};
    return client_.call("reservation", "res.request", json{{"request", request}});
}

Result<json> AdminClient::accept_counter(const json& counter) {
    return client_.call("reservation", "res.accept", json{{"counter", counter}});
}

}  // namespace deskgrid::ctl
