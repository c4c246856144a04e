#pragma once

#include "deskgrid/appmodel.hpp"
#include "deskgrid/common.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace deskgrid::ctl {

struct NodeStats {
    std::string node_id;
    std::string state;
    int slots_busy = 0;
    int slots_total = 0;
    double cpu_usage_percent = 0.0;
    std::int64_t available_memory_mb = 0;

    nlohmann::json to_json() const;
};

/// Point-in-time cloud figures. The aggregates are derived from the per-node
/// and scheduler figures collected in the same pass, never sampled twice.
struct CloudStats {
    std::vector<NodeStats> per_node;
    int nodes_alive = 0;
    std::map<std::string, int> jobs_by_state;
    int reservations_active = 0;
    double throughput_jobs_per_min = 0.0;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Generic call signature so stats assembly works both through a remote
/// client and through in-container local calls.
using ServiceCall = std::function<Result<nlohmann::json>(const std::string& service, const std::string& kind,
                                                         nlohmann::json body)>;

Result<CloudStats> collect_stats(const ServiceCall& call);

/// Admin-side wrapper over the client connection: monitoring, node control,
/// submission, reservation.
class AdminClient {
public:
    AdminClient(Endpoint master, security::Credentials credentials);

    Status connect() { return client_.connect(); }
    app::Client& client() { return client_; }

    Result<CloudStats> stats();
    Result<std::vector<nlohmann::json>> nodes();
    /// Provisions count new nodes through the master's fabric provider.
    Result<std::vector<std::string>> node_install(int count, std::int64_t ttl_seconds = 0);
    /// Drains and stops the container at `node`, addressed by node id.
    Status node_stop(const std::string& node_id);

    Result<nlohmann::json> reserve(int node_count, TimestampS earliest, TimestampS latest,
                                   std::int64_t duration_s);
    Result<nlohmann::json> accept_counter(const nlohmann::json& counter);

private:
    app::Client client_;
};

}  // namespace deskgrid::ctl
