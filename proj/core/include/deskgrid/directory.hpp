#pragma once

#include "deskgrid/container.hpp"
#include "deskgrid/fabric.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace deskgrid::directory {

enum class NodeState { Alive, Suspect, Dead };
const char* node_state_name(NodeState state);
std::optional<NodeState> node_state_from_name(const std::string& name);

/// One node's entry in the global directory.
struct MembershipRecord {
    std::string node_id;
    std::string endpoint;
    std::vector<std::string> services;
    fabric::StaticProfile static_profile;
    fabric::DynamicStats last_stats;
    TimestampMs last_heartbeat_at = 0;
    NodeState state = NodeState::Alive;
    std::int64_t heartbeat_sequence = 0;

    nlohmann::json to_json() const;
    static MembershipRecord from_json(const nlohmann::json& doc);
};

struct Heartbeat {
    std::string node_id;
    std::vector<std::string> services;
    fabric::DynamicStats stats;
    std::int64_t sequence = 0;

    nlohmann::json to_json() const;
    static Heartbeat from_json(const nlohmann::json& doc);
};

/// Liveness thresholds, all derived from the heartbeat interval unless
/// overridden.
struct Timeouts {
    std::int64_t suspect_ms = 3000;
    std::int64_t dead_ms = 10000;
    std::int64_t purge_ms = 60000;

    static Timeouts from_interval(int heartbeat_interval_ms) {
        return Timeouts{3LL * heartbeat_interval_ms, 10LL * heartbeat_interval_ms,
                        60LL * heartbeat_interval_ms};
    }
};

struct Transition {
    std::string node_id;
    NodeState from;
    NodeState to;
    bool purged = false;
};

/// The global directory of nodes and their hosted services. Pure state
/// machine: callers supply the clock, the service adapter supplies the
/// messages.
class MembershipCatalogue {
public:
    MembershipCatalogue(Timeouts timeouts, int license_max_nodes)
        : timeouts_(timeouts), license_max_nodes_(license_max_nodes) {}

    /// Stores the record alive. Rejected (and not stored) when the license
    /// cap on alive+suspect nodes would be exceeded.
    Status register_node(MembershipRecord record, TimestampMs now);

    /// Applies one heartbeat. Unknown nodes get an error asking them to
    /// register; stale sequences are ignored with an error reply.
    Status apply_heartbeat(const Heartbeat& heartbeat, TimestampMs now);

    /// Removes the node immediately (graceful leave / decommission).
    bool remove_node(const std::string& node_id);

    /// Records with state != dead hosting `service_name` (or all records when
    /// empty), sorted by node_id.
    std::vector<MembershipRecord> query(const std::string& service_name) const;
    std::optional<MembershipRecord> find(const std::string& node_id) const;

    /// Failure-detection tick: alive→suspect→dead by age, dead purged.
    std::vector<Transition> sweep(TimestampMs now);

    int alive_plus_suspect_count() const;
    std::size_t size() const { return records_.size(); }
    const Timeouts& timeouts() const { return timeouts_; }

    nlohmann::json snapshot() const;
    void restore(const nlohmann::json& state);

private:
    Timeouts timeouts_;
    int license_max_nodes_;
    std::map<std::string, MembershipRecord> records_;
};

/// Catalogue server. Envelope kinds: dir.register, dir.heartbeat, dir.query,
/// dir.leave; the sweep runs off a timer message on the same mailbox.
class DirectoryService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;
    nlohmann::json snapshot_state() override;
    void restore_state(const nlohmann::json& state) override;

private:
    ServiceContext* ctx_ = nullptr;
    std::unique_ptr<MembershipCatalogue> catalogue_;
};

/// Client-side query helper shared by the scheduler, tools, and tests.
Result<std::vector<MembershipRecord>> query_directory(Container& container, const Endpoint& directory,
                                                      const std::string& service_name,
                                                      int timeout_ms = -1);

}  // namespace deskgrid::directory
