#pragma once

#include "deskgrid/container.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace deskgrid::resv {

/// Half-open interval [start, end) at whole-second granularity.
struct TimeWindow {
    TimestampS start = 0;
    TimestampS end = 0;

    bool contains(TimestampS t) const { return t >= start && t < end; }
    bool overlaps(const TimeWindow& other) const { return start < other.end && other.start < end; }
    std::int64_t duration_s() const { return end - start; }

    nlohmann::json to_json() const;
    static TimeWindow from_json(const nlohmann::json& doc);
};

struct ReservationRequest {
    std::string requester;
    int node_count = 1;
    TimestampS earliest = 0;
    TimestampS latest = 0;
    std::int64_t duration_s = 1;
    std::vector<std::string> required_services = {"executor"};
    int round = 0;

    Status validate() const;
    nlohmann::json to_json() const;
    static ReservationRequest from_json(const nlohmann::json& doc);
};

enum class ReservationState { Confirmed, Active, Expired, Cancelled };
const char* reservation_state_name(ReservationState state);

struct Reservation {
    std::string reservation_id;
    std::vector<std::string> node_ids;
    TimeWindow window;
    std::string owner;
    std::string bound_app;  // empty until an application is bound
    ReservationState state = ReservationState::Confirmed;

    nlohmann::json to_json() const;
    static Reservation from_json(const nlohmann::json& doc);
};

struct CounterOffer {
    ReservationRequest original;
    TimeWindow proposed_window;
    int proposed_node_count = 0;
    int round = 0;

    nlohmann::json to_json() const;
    static CounterOffer from_json(const nlohmann::json& doc);
};

/// One booked interval on one node, denormalized with the bound application
/// so per-node admission needs no lookups.
struct AllocationEntry {
    TimeWindow window;
    std::string reservation_id;
    std::string bound_app;

    nlohmann::json to_json() const;
    static AllocationEntry from_json(const nlohmann::json& doc);
};

struct ReservationTransition {
    std::string reservation_id;
    ReservationState from;
    ReservationState to;
};

/// Outcome of a reservation request: exactly one of the three.
struct NegotiationOutcome {
    enum class Kind { Confirmed, Counter, Rejected };
    Kind kind = Kind::Rejected;
    Reservation reservation;  // when Confirmed
    CounterOffer counter;     // when Counter
    std::string reject_reason;
};

/// The global allocation map plus the reservations it backs. Pure state
/// machine: candidates and clocks are inputs. Counter-offer policy: the
/// earliest feasible window of the same duration and node count, searched up
/// to latest + horizon; node ties break toward the lowest node_id.
class AllocationBook {
public:
    explicit AllocationBook(int max_rounds = 3, std::int64_t horizon_s = 86400)
        : max_rounds_(max_rounds), horizon_s_(horizon_s) {}

    NegotiationOutcome request(const ReservationRequest& request,
                               const std::vector<std::string>& candidate_nodes);
    NegotiationOutcome accept_counter(const CounterOffer& offer,
                                      const std::vector<std::string>& candidate_nodes);
    Status cancel(const std::string& reservation_id, const std::string& requester);
    Status bind(const std::string& reservation_id, const std::string& app_id);

    /// Advances confirmed→active→expired against `now` and prunes the map.
    std::vector<ReservationTransition> tick(TimestampS now);

    const std::map<std::string, std::vector<AllocationEntry>>& allocation() const { return allocation_; }
    std::vector<AllocationEntry> node_windows(const std::string& node_id) const;
    const std::map<std::string, Reservation>& reservations() const { return reservations_; }
    std::optional<Reservation> find(const std::string& reservation_id) const;
    int max_rounds() const { return max_rounds_; }
    std::int64_t horizon_s() const { return horizon_s_; }
    int active_count() const;

    /// Full-scan consistency check used by tests: windows per node sorted and
    /// non-overlapping, every entry backed by a live reservation.
    Status check_consistency() const;

    nlohmann::json snapshot() const;
    void restore(const nlohmann::json& state);

private:
    bool node_free(const std::string& node_id, const TimeWindow& window) const;
    std::vector<std::string> free_nodes_at(const std::vector<std::string>& candidates,
                                           const TimeWindow& window) const;
    std::optional<TimestampS> earliest_feasible_start(const ReservationRequest& request,
                                                      const std::vector<std::string>& candidates,
                                                      TimestampS latest_end) const;
    void erase_entries(const std::string& reservation_id);

    int max_rounds_;
    std::int64_t horizon_s_;
    std::map<std::string, Reservation> reservations_;
    std::map<std::string, std::vector<AllocationEntry>> allocation_;  // node_id → sorted windows
};

struct AdmissionDecision {
    bool admit = false;
    std::string reason;  // set when refused
};

/// Per-node admission rule: inside a window only the bound application's jobs
/// run; outside any window, anything that passed the security check does.
AdmissionDecision admissible(const std::vector<AllocationEntry>& windows, const std::string& app_id,
                             bool security_ok, TimestampS now);

/// Central service owning the book. Kinds: res.request, res.accept,
/// res.cancel, res.bind, res.mapview, res.windows; res.tick runs off a timer.
/// Pushes per-node window lists to Allocation Managers on every change.
class ReservationService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;
    nlohmann::json snapshot_state() override;
    void restore_state(const nlohmann::json& state) override;

private:
    Result<std::vector<std::string>> candidate_nodes(const ReservationRequest& request);
    void push_allocations(const std::vector<std::string>& nodes);
    Result<Bytes> finish_outcome(const NegotiationOutcome& outcome);

    ServiceContext* ctx_ = nullptr;
    std::unique_ptr<AllocationBook> book_;
    nlohmann::json pending_restore_;
};

/// Per-node Allocation Manager: holds a pushed read-only copy of this node's
/// windows and answers admission checks. Kinds: alloc.sync, alloc.check,
/// alloc.windows.
class AllocationManagerService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;

private:
    ServiceContext* ctx_ = nullptr;
    std::vector<AllocationEntry> windows_;
};

}  // namespace deskgrid::resv
