#include "deskgrid/directory.hpp"

#include <algorithm>

namespace deskgrid::directory {

using nlohmann::json;

const char* node_state_name(NodeState state) {
    switch (state) {
        case NodeState::Alive: return "alive";
        case NodeState::Suspect: return "suspect";
        case NodeState::Dead: return "dead";
    }
    return "?";
}

std::optional<NodeState> node_state_from_name(const std::string& name) {
    if (name == "alive") return NodeState::Alive;
    if (name == "suspect") return NodeState::Suspect;
    if (name == "dead") return NodeState::Dead;
    return std::nullopt;
}

namespace {
json profile_to_json(const fabric::StaticProfile& p) {
    return json{{"cpu_count", p.cpu_count},
                {"cpu_frequency_mhz", p.cpu_frequency_mhz},
                {"total_memory_mb", p.total_memory_mb},
                {"total_storage_mb", p.total_storage_mb},
                {"os_name", p.os_name}};
}

fabric::StaticProfile profile_from_json(const json& doc) {
    fabric::StaticProfile p;
    p.cpu_count = doc.value("cpu_count", 1);
    p.cpu_frequency_mhz = doc.value("cpu_frequency_mhz", 0);
    p.total_memory_mb = doc.value("total_memory_mb", std::int64_t{1});
    p.total_storage_mb = doc.value("total_storage_mb", std::int64_t{0});
    p.os_name = doc.value("os_name", "");
    return p;
}

json stats_to_json(const fabric::DynamicStats& s) {
    return json{{"cpu_usage_percent", s.cpu_usage_percent},
                {"available_memory_mb", s.available_memory_mb},
                {"available_storage_mb", s.available_storage_mb},
                {"sampled_at", s.sampled_at}};
}

fabric::DynamicStats stats_from_json(const json& doc) {
    fabric::DynamicStats s;
    s.cpu_usage_percent = doc.value("cpu_usage_percent", 0.0);
    s.available_memory_mb = doc.value("available_memory_mb", std::int64_t{0});
    s.available_storage_mb = doc.value("available_storage_mb", std::int64_t{0});
    s.sampled_at = doc.value("sampled_at", std::int64_t{0});
    return s;
}
}  // namespace

json MembershipRecord::to_json() const {
    return json{{"node_id", node_id},
                {"endpoint", endpoint},
                {"services", services},
                {"static_profile", profile_to_json(static_profile)},
                {"last_stats", stats_to_json(last_stats)},
                {"last_heartbeat_at", last_heartbeat_at},
                {"state", node_state_name(state)},
                {"heartbeat_sequence", heartbeat_sequence}};
}

MembershipRecord MembershipRecord::from_json(const json& doc) {
    MembershipRecord r;
    r.node_id = doc.value("node_id", "");
    r.endpoint = doc.value("endpoint", "");
    r.services = doc.value("services", std::vector<std::string>{});
    if (doc.contains("static_profile")) r.static_profile = profile_from_json(doc["static_profile"]);
    if (doc.contains("last_stats")) r.last_stats = stats_from_json(doc["last_stats"]);
    r.last_heartbeat_at = doc.value("last_heartbeat_at", std::int64_t{0});
    r.state = node_state_from_name(doc.value("state", "alive")).value_or(NodeState::Alive);
    r.heartbeat_sequence = doc.value("heartbeat_sequence", std::int64_t{0});
    return r;
}

json Heartbeat::to_json() const {
    return json{{"node_id", node_id},
                {"services", services},
                {"stats", stats_to_json(stats)},
                {"sequence", sequence}};
}

Heartbeat Heartbeat::from_json(const json& doc) {
    Heartbeat hb;
    hb.node_id = doc.value("node_id", "");
    hb.services = doc.value("services", std::vector<std::string>{});
    if (doc.contains("stats")) hb.stats = stats_from_json(doc["stats"]);
    hb.sequence = doc.value("sequence", std::int64_t{0});
    return hb;
}

Status MembershipCatalogue::register_node(MembershipRecord record, TimestampMs now) {
    auto existing = records_.find(record.node_id);
    bool replaces = existing != records_.end();
    if (license_max_nodes_ > 0) {
        int counted = alive_plus_suspect_count();
        if (replaces && existing->second.state != NodeState::Dead) --counted;
        if (counted + 1 > license_max_nodes_) {
            return make_error(errc::license_rejected,
                              "license allows " + std::to_string(license_max_nodes_) + " nodes");
        }
    }
    record.state = NodeState::Alive;
    record.last_heartbeat_at = now;
    records_[record.node_id] = std::move(record);
    return Status::success();
}

Status MembershipCatalogue::apply_heartbeat(const Heartbeat& heartbeat, TimestampMs now) {
    auto it = records_.find(heartbeat.node_id);
    if (it == records_.end()) {
        // The reply tells the node to run its register path; the catalogue
        // cannot fabricate a record from a heartbeat alone.
        return make_error(errc::unknown_node, "node not registered: " + heartbeat.node_id);
    }
    MembershipRecord& record = it->second;
    if (heartbeat.sequence <= record.heartbeat_sequence) {
        return make_error(errc::stale_heartbeat,
                          "sequence " + std::to_string(heartbeat.sequence) + " not above " +
                              std::to_string(record.heartbeat_sequence));
    }
    if (record.state == NodeState::Dead) {
        // Dead nodes must re-register; their record is pending purge.
        return make_error(errc::unknown_node, "node is dead, register again: " + heartbeat.node_id);
    }
    record.heartbeat_sequence = heartbeat.sequence;
    record.last_heartbeat_at = now;
    record.last_stats = heartbeat.stats;
    record.services = heartbeat.services;
    record.state = NodeState::Alive;
    return Status::success();
}

bool MembershipCatalogue::remove_node(const std::string& node_id) {
    return records_.erase(node_id) > 0;
}

std::vector<MembershipRecord> MembershipCatalogue::query(const std::string& service_name) const {
    std::vector<MembershipRecord> out;
    for (const auto& [id, record] : records_) {
        if (record.state == NodeState::Dead) continue;
        if (!service_name.empty() &&
            std::find(record.services.begin(), record.services.end(), service_name) == record.services.end()) {
            continue;
        }
        out.push_back(record);
    }
    // std::map iteration is already node_id-sorted; keep the sort explicit in
    // case the store changes.
    std::sort(out.begin(), out.end(),
              [](const MembershipRecord& a, const MembershipRecord& b) { return a.node_id < b.node_id; });
    return out;
}

std::optional<MembershipRecord> MembershipCatalogue::find(const std::string& node_id) const {
    auto it = records_.find(node_id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

std::vector<Transition> MembershipCatalogue::sweep(TimestampMs now) {
    std::vector<Transition> transitions;
    for (auto it = records_.begin(); it != records_.end();) {
        MembershipRecord& record = it->second;
        TimestampMs age = now - record.last_heartbeat_at;
        if (record.state == NodeState::Alive && age > timeouts_.suspect_ms) {
            transitions.push_back({record.node_id, NodeState::Alive, NodeState::Suspect, false});
            record.state = NodeState::Suspect;
        }
        if (record.state == NodeState::Suspect && age > timeouts_.dead_ms) {
            transitions.push_back({record.node_id, NodeState::Suspect, NodeState::Dead, false});
            record.state = NodeState::Dead;
        }
        if (record.state == NodeState::Dead && age > timeouts_.purge_ms) {
            transitions.push_back({record.node_id, NodeState::Dead, NodeState::Dead, true});
            it = records_.erase(it);
            continue;
        }
        ++it;
    }
    return transitions;
}

int MembershipCatalogue::alive_plus_suspect_count() const {
    int count = 0;
    for (const auto& [id, record] : records_) {
        if (record.state != NodeState::Dead) ++count;
    }
    return count;
}

json MembershipCatalogue::snapshot() const {
    json records = json::array();
    for (const auto& [id, record] : records_) records.push_back(record.to_json());
    return json{{"records", records}};
}

void MembershipCatalogue::restore(const json& state) {
    records_.clear();
    for (const auto& doc : state.value("records", json::array())) {
        MembershipRecord record = MembershipRecord::from_json(doc);
        records_[record.node_id] = std::move(record);
    }
}

// ---------------------------------------------------------------------------
// DirectoryService
// ---------------------------------------------------------------------------

void DirectoryService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    int hb = ctx.config().heartbeat_interval_ms;
    Timeouts timeouts = Timeouts::from_interval(hb);
    timeouts.suspect_ms = ctx.opt_int("suspect_timeout_ms", timeouts.suspect_ms);
    timeouts.dead_ms = ctx.opt_int("dead_timeout_ms", timeouts.dead_ms);
    timeouts.purge_ms = ctx.opt_int("purge_timeout_ms", timeouts.purge_ms);
    auto fresh = std::make_unique<MembershipCatalogue>(timeouts, ctx.config().license_max_nodes);
    if (catalogue_) {
        // restore_state ran before start; rebuild with configured timeouts.
        fresh->restore(catalogue_->snapshot());
    }
    catalogue_ = std::move(fresh);
    ctx.schedule_periodic("dir.sweep_tick", static_cast<int>(ctx.opt_int("sweep_period_ms", hb)));
}

Result<Bytes> DirectoryService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "dir.register") {
        MembershipRecord record = MembershipRecord::from_json(body.value("record", json::object()));
        if (record.node_id.empty()) return make_error(errc::invalid_request, "record.node_id required");
        if (auto ep = parse_endpoint(record.endpoint)) {
            ctx_->container().note_peer(record.node_id, ep.value());
        }
        if (auto st = catalogue_->register_node(std::move(record), now_ms()); !st) return st.error();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "dir.heartbeat") {
        Heartbeat hb = Heartbeat::from_json(body.value("heartbeat", json::object()));
        if (auto st = catalogue_->apply_heartbeat(hb, now_ms()); !st) return st.error();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "dir.query") {
        std::string service = body.value("service", "");
        json records = json::array();
        for (const auto& record : catalogue_->query(service)) {
            records.push_back(record.to_json());
            if (auto ep = parse_endpoint(record.endpoint)) {
                ctx_->container().note_peer(record.node_id, ep.value());
            }
        }
        return to_bytes(json{{"records", records}}.dump());
    }
    if (request.kind == "dir.leave") {
        std::string node_id = body.value("node_id", "");
        bool removed = catalogue_->remove_node(node_id);
        return to_bytes(json{{"ok", true}, {"removed", removed}}.dump());
    }
    if (request.kind == "dir.sweep_tick") {
        auto transitions = catalogue_->sweep(now_ms());
        for (const auto& t : transitions) {
            DG_LOG_INFO("directory", "node " + t.node_id + ": " + node_state_name(t.from) + " -> " +
                                         (t.purged ? "purged" : node_state_name(t.to)));
        }
        return to_bytes(json{{"transitions", transitions.size()}}.dump());
    }
    return make_error(errc::invalid_request, "unknown directory verb: " + request.kind);
}

nlohmann::json DirectoryService::snapshot_state() {
    return catalogue_ ? catalogue_->snapshot() : nlohmann::json{};
}

void DirectoryService::restore_state(const nlohmann::json& state) {
    if (!catalogue_) catalogue_ = std::make_unique<MembershipCatalogue>(Timeouts{}, 0);
    catalogue_->restore(state);
}

Result<std::vector<MembershipRecord>> query_directory(Container& container, const Endpoint& directory,
                                                      const std::string& service_name, int timeout_ms) {
    json body = {{"service", service_name}};
    auto reply = container.call(directory, "directory", "dir.query", to_bytes(body.dump()), timeout_ms);
    if (!reply) return reply.error();
    json doc = json::parse(to_string(reply.value()), nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_envelope, "malformed dir.query reply");
    std::vector<MembershipRecord> records;
    for (const auto& entry : doc.value("records", json::array())) {
        records.push_back(MembershipRecord::from_json(entry));
    }
    return records;
}

}  // namespace deskgrid::directory
