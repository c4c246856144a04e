#pragma once

#include "deskgrid/common.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace deskgrid {

/// One manifest entry: a service to host plus its option map.
struct ServiceSpec {
    std::string name;
    nlohmann::json options = nlohmann::json::object();
};

/// Everything a container needs to come up, loadable from a JSON config file
/// (see docs/config.md for the schema). Manifest order is start order.
struct ContainerConfig {
    std::string node_id;
    std::string listen_endpoint = "127.0.0.1:0";
    std::vector<ServiceSpec> services;
    std::vector<std::string> seed_peers;
    std::string security_provider = "anonymous";
    std::string persistence_provider = "volatile";
    int heartbeat_interval_ms = 1000;
    int license_max_nodes = 0;  // 0 = unlimited
    nlohmann::json options = nlohmann::json::object();

    Status validate() const;

    nlohmann::json to_json() const;
    static Result<ContainerConfig> from_json(const nlohmann::json& doc);
    static Result<ContainerConfig> load_file(const std::string& path);
    Status save_file(const std::string& path) const;

    // Container-wide tunables with defaults.
    std::int64_t opt_int(const std::string& key, std::int64_t fallback) const;
    std::string opt_str(const std::string& key, const std::string& fallback) const;

    std::size_t max_payload_bytes() const {
        return static_cast<std::size_t>(opt_int("message_max_bytes", 8 * 1024 * 1024));
    }
    int call_timeout_ms() const { return static_cast<int>(opt_int("call_timeout_ms", 10000)); }
    int drain_timeout_ms() const { return static_cast<int>(opt_int("drain_timeout_ms", 5000)); }
    int snapshot_interval_ms() const { return static_cast<int>(opt_int("snapshot_interval_ms", 5000)); }

    bool hosts(const std::string& service_name) const;
};

}  // namespace deskgrid
