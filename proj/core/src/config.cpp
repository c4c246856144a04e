#include "deskgrid/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace deskgrid {

using nlohmann::json;

Status ContainerConfig::validate() const {
    if (node_id.empty()) return make_error(errc::invalid_request, "node_id must not be empty");
    if (heartbeat_interval_ms < 100) {
        return make_error(errc::invalid_request, "heartbeat_interval_ms must be >= 100");
    }
    if (license_max_nodes < 0) return make_error(errc::invalid_request, "license_max_nodes must be >= 0");
    auto ep = parse_endpoint(listen_endpoint);
    if (!ep) return ep.error();
    std::set<std::string> seen;
    for (const auto& spec : services) {
        if (spec.name.empty()) return make_error(errc::service_load_failure, "empty service name in manifest");
        if (!seen.insert(spec.name).second) {
            return make_error(errc::service_load_failure, "duplicate service in manifest: " + spec.name);
        }
    }
    return Status::success();
}

json ContainerConfig::to_json() const {
    json manifest = json::array();
    for (const auto& spec : services) {
        manifest.push_back({{"name", spec.name}, {"options", spec.options}});
    }
    return json{
        {"node_id", node_id},
        {"listen_endpoint", listen_endpoint},
        {"services", manifest},
        {"seed_peers", seed_peers},
        {"security_provider", security_provider},
        {"persistence_provider", persistence_provider},
        {"heartbeat_interval_ms", heartbeat_interval_ms},
        {"license_max_nodes", license_max_nodes},
        {"options", options},
    };
}

Result<ContainerConfig> ContainerConfig::from_json(const json& doc) {
    if (!doc.is_object()) return make_error(errc::invalid_request, "config must be a JSON object");
    ContainerConfig cfg;
    cfg.node_id = doc.value("node_id", "");
    if (cfg.node_id.empty()) cfg.node_id = new_uuid();
    cfg.listen_endpoint = doc.value("listen_endpoint", cfg.listen_endpoint);
    cfg.security_provider = doc.value("security_provider", cfg.security_provider);
    cfg.persistence_provider = doc.value("persistence_provider", cfg.persistence_provider);
    cfg.heartbeat_interval_ms = doc.value("heartbeat_interval_ms", cfg.heartbeat_interval_ms);
    cfg.license_max_nodes = doc.value("license_max_nodes", cfg.license_max_nodes);
    if (doc.contains("seed_peers")) {
        for (const auto& peer : doc["seed_peers"]) cfg.seed_peers.push_back(peer.get<std::string>());
    }
    if (doc.contains("options") && doc["options"].is_object()) cfg.options = doc["options"];
    if (doc.contains("services")) {
        for (const auto& entry : doc["services"]) {
            ServiceSpec spec;
            if (entry.is_string()) {
                spec.name = entry.get<std::string>();
            } else {
                spec.name = entry.value("name", "");
                if (entry.contains("options")) spec.options = entry["options"];
            }
            cfg.services.push_back(std::move(spec));
        }
    }
    if (auto st = cfg.validate(); !st) return st.error();
    return cfg;
}

Result<ContainerConfig> ContainerConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) return make_error(errc::invalid_request, "cannot open config file: " + path);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_request, "config file is not valid JSON: " + path);
    return from_json(doc);
}

Status ContainerConfig::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) return make_error(errc::invalid_request, "cannot write config file: " + path);
    out << to_json().dump(2) << "\n";
    return Status::success();
}

std::int64_t ContainerConfig::opt_int(const std::string& key, std::int64_t fallback) const {
    if (options.contains(key) && options[key].is_number()) return options[key].get<std::int64_t>();
    return fallback;
}

std::string ContainerConfig::opt_str(const std::string& key, const std::string& fallback) const {
    if (options.contains(key) && options[key].is_string()) return options[key].get<std::string>();
    return fallback;
}

bool ContainerConfig::hosts(const std::string& service_name) const {
    for (const auto& spec : services) {
        if (spec.name == service_name) return true;
    }
    return false;
}

}  // namespace deskgrid
