#include "deskgrid/reservation.hpp"

#include "deskgrid/directory.hpp"

#include <algorithm>
#include <set>

namespace deskgrid::resv {

using nlohmann::json;

json TimeWindow::to_json() const { return json{{"start", start}, {"end", end}}; }

TimeWindow TimeWindow::from_json(const json& doc) {
    return TimeWindow{doc.value("start", std::int64_t{0}), doc.value("end", std::int64_t{0})};
}

Status ReservationRequest::validate() const {
    if (node_count < 1) return make_error(errc::invalid_request, "node_count must be >= 1");
    if (duration_s < 1) return make_error(errc::invalid_request, "duration_s must be >= 1");
    if (earliest + duration_s > latest) {
        return make_error(errc::invalid_request, "window [earliest, latest] cannot fit duration");
    }
    if (round < 0) return make_error(errc::invalid_request, "round must be >= 0");
    if (std::find(required_services.begin(), required_services.end(), "executor") ==
        required_services.end()) {
        return make_error(errc::invalid_request, "required_services must include executor");
    }
    return Status::success();
}

json ReservationRequest::to_json() const {
    return json{{"requester", requester},   {"node_count", node_count},
                {"earliest", earliest},     {"latest", latest},
                {"duration_s", duration_s}, {"required_services", required_services},
                {"round", round}};
}

ReservationRequest ReservationRequest::from_json(const json& doc) {
    ReservationRequest r;
    r.requester = doc.value("requester", "");
    r.node_count = doc.value("node_count", 1);
    r.earliest = doc.value("earliest", std::int64_t{0});
    r.latest = doc.value("latest", std::int64_t{0});
    r.duration_s = doc.value("duration_s", std::int64_t{1});
    r.required_services = doc.value("required_services", std::vector<std::string>{"executor"});
    r.round = doc.value("round", 0);
    return r;
}

const char* reservation_state_name(ReservationState state) {
    switch (state) {
        case ReservationState::Confirmed: return "confirmed";
        case ReservationState::Active: return "active";
        case ReservationState::Expired: return "expired";
        case ReservationState::Cancelled: return "cancelled";
    }
    return "?";
}

namespace {
ReservationState reservation_state_from_name(const std::string& name) {
    if (name == "active") return ReservationState::Active;
    if (name == "expired") return ReservationState::Expired;
    if (name == "cancelled") return ReservationState::Cancelled;
    return ReservationState::Confirmed;
}
}  // namespace

json Reservation::to_json() const {
    return json{{"reservation_id", reservation_id}, {"node_ids", node_ids},
                {"window", window.to_json()},       {"owner", owner},
                {"bound_app", bound_app},           {"state", reservation_state_name(state)}};
}

Reservation Reservation::from_json(const json& doc) {
    Reservation r;
    r.reservation_id = doc.value("reservation_id", "");
    r.node_ids = doc.value("node_ids", std::vector<std::string>{});
    r.window = TimeWindow::from_json(doc.value("window", json::object()));
    r.owner = doc.value("owner", "");
    r.bound_app = doc.value("bound_app", "");
    r.state = reservation_state_from_name(doc.value("state", "confirmed"));
    return r;
}

json CounterOffer::to_json() const {
    return json{{"original", original.to_json()},
                {"proposed_window", proposed_window.to_json()},
                {"proposed_node_count", proposed_node_count},
                {"round", round}};
}

CounterOffer CounterOffer::from_json(const json& doc) {
    CounterOffer offer;
    offer.original = ReservationRequest::from_json(doc.value("original", json::object()));
    offer.proposed_window = TimeWindow::from_json(doc.value("proposed_window", json::object()));
    offer.proposed_node_count = doc.value("proposed_node_count", 0);
    offer.round = doc.value("round", 0);
    return offer;
}

json AllocationEntry::to_json() const {
    return json{{"window", window.to_json()}, {"reservation_id", reservation_id}, {"bound_app", bound_app}};
}

AllocationEntry AllocationEntry::from_json(const json& doc) {
    AllocationEntry entry;
    entry.window = TimeWindow::from_json(doc.value("window", json::object()));
    entry.reservation_id = doc.value("reservation_id", "");
    entry.bound_app = doc.value("bound_app", "");
    return entry;
}

// ---------------------------------------------------------------------------
// AllocationBook
// ---------------------------------------------------------------------------

bool AllocationBook::node_free(const std::string& node_id, const TimeWindow& window) const {
    auto it = allocation_.find(node_id);
    if (it == allocation_.end()) return true;
    for (const auto& entry : it->second) {
        if (entry.window.overlaps(window)) return false;
    }
    return true;
}

std::vector<std::string> AllocationBook::free_nodes_at(const std::vector<std::string>& candidates,
                                                       const TimeWindow& window) const {
    std::vector<std::string> free;
    for (const auto& node : candidates) {
        if (node_free(node, window)) free.push_back(node);
    }
    return free;
}

std::optional<TimestampS> AllocationBook::earliest_feasible_start(const ReservationRequest& request,
                                                                  const std::vector<std::string>& candidates,
                                                                  TimestampS latest_end) const {
    if (static_cast<int>(candidates.size()) < request.node_count) return std::nullopt;
    const std::int64_t d = request.duration_s;
    if (request.earliest + d > latest_end) return std::nullopt;

    // Feasibility can only begin at the requested earliest or where some
    // booked window frees a node, so those are the only starts to probe.
    std::set<TimestampS> starts;
    starts.insert(request.earliest);
    for (const auto& node : candidates) {
        auto it = allocation_.find(node);
        if (it == allocation_.end()) continue;
        for (const auto& entry : it->second) {
            if (entry.window.end > request.earliest && entry.window.end + d <= latest_end) {
                starts.insert(entry.window.end);
            }
        }
    }
    for (TimestampS t : starts) {
        if (t + d > latest_end) continue;
        TimeWindow probe{t, t + d};
        if (static_cast<int>(free_nodes_at(candidates, probe).size()) >= request.node_count) return t;
    }
    return std::nullopt;
}

NegotiationOutcome AllocationBook::request(const ReservationRequest& request,
                                           const std::vector<std::string>& candidate_nodes) {
    NegotiationOutcome outcome;
    auto feasible = earliest_feasible_start(request, candidate_nodes, request.latest + horizon_s_);
    if (feasible && *feasible + request.duration_s <= request.latest) {
        TimeWindow window{*feasible, *feasible + request.duration_s};
        auto free = free_nodes_at(candidate_nodes, window);
        Reservation reservation;
        reservation.reservation_id = new_uuid();
        reservation.node_ids.assign(free.begin(), free.begin() + request.node_count);
        reservation.window = window;
        reservation.owner = request.requester;
        reservation.state = ReservationState::Confirmed;
        for (const auto& node : reservation.node_ids) {
            auto& entries = allocation_[node];
            AllocationEntry entry{window, reservation.reservation_id, ""};
            entries.insert(std::upper_bound(entries.begin(), entries.end(), entry,
                                            [](const AllocationEntry& a, const AllocationEntry& b) {
                                                return a.window.start < b.window.start;
                                            }),
                           entry);
        }
        reservations_[reservation.reservation_id] = reservation;
        outcome.kind = NegotiationOutcome::Kind::Confirmed;
        outcome.reservation = std::move(reservation);
        return outcome;
    }
    if (request.round < max_rounds_ && feasible) {
        outcome.kind = NegotiationOutcome::Kind::Counter;
        outcome.counter.original = request;
        outcome.counter.proposed_window = TimeWindow{*feasible, *feasible + request.duration_s};
        outcome.counter.proposed_node_count = request.node_count;
        outcome.counter.round = request.round;
        return outcome;
    }
    outcome.kind = NegotiationOutcome::Kind::Rejected;
    outcome.reject_reason = feasible ? "negotiation rounds exhausted" : "no feasible window within horizon";
    return outcome;
}

NegotiationOutcome AllocationBook::accept_counter(const CounterOffer& offer,
                                                  const std::vector<std::string>& candidate_nodes) {
    ReservationRequest next = offer.original;
    next.earliest = offer.proposed_window.start;
    next.latest = offer.proposed_window.end;
    next.round = offer.round + 1;
    return request(next, candidate_nodes);
}

Status AllocationBook::cancel(const std::string& reservation_id, const std::string& requester) {
    auto it = reservations_.find(reservation_id);
    if (it == reservations_.end()) return make_error(errc::not_found, "no such reservation");
    if (!requester.empty() && it->second.owner != requester) {
        return make_error(errc::denied, "denied");
    }
    if (it->second.state != ReservationState::Confirmed) {
        return make_error(errc::illegal_transition,
                          std::string("cannot cancel a reservation in state ") +
                              reservation_state_name(it->second.state));
    }
    it->second.state = ReservationState::Cancelled;
    erase_entries(reservation_id);
    return Status::success();
}

Status AllocationBook::bind(const std::string& reservation_id, const std::string& app_id) {
    auto it = reservations_.find(reservation_id);
    if (it == reservations_.end()) return make_error(errc::not_found, "no such reservation");
    if (it->second.state == ReservationState::Expired || it->second.state == ReservationState::Cancelled) {
        return make_error(errc::illegal_transition, "reservation is no longer bindable");
    }
    it->second.bound_app = app_id;
    for (auto& [node, entries] : allocation_) {
        for (auto& entry : entries) {
            if (entry.reservation_id == reservation_id) entry.bound_app = app_id;
        }
    }
    return Status::success();
}

std::vector<ReservationTransition> AllocationBook::tick(TimestampS now) {
    std::vector<ReservationTransition> transitions;
    for (auto& [id, reservation] : reservations_) {
        if (reservation.state == ReservationState::Confirmed && reservation.window.contains(now)) {
            transitions.push_back({id, ReservationState::Confirmed, ReservationState::Active});
            reservation.state = ReservationState::Active;
        }
        bool live = reservation.state == ReservationState::Confirmed ||
                    reservation.state == ReservationState::Active;
        if (live && now >= reservation.window.end) {
            transitions.push_back({id, reservation.state, ReservationState::Expired});
            reservation.state = ReservationState::Expired;
            erase_entries(id);
        }
    }
    return transitions;
}

void AllocationBook::erase_entries(const std::string& reservation_id) {
    for (auto it = allocation_.begin(); it != allocation_.end();) {
        auto& entries = it->second;
        std::erase_if(entries, [&](const AllocationEntry& e) { return e.reservation_id == reservation_id; });
        if (entries.empty()) {
            it = allocation_.erase(it);
        } else {
            ++it;
        }
    }
}

std::vector<AllocationEntry> AllocationBook::node_windows(const std::string& node_id) const {
    auto it = allocation_.find(node_id);
    if (it == allocation_.end()) return {};
    return it->second;
}

std::optional<Reservation> AllocationBook::find(const std::string& reservation_id) const {
    auto it = reservations_.find(reservation_id);
    if (it == reservations_.end()) return std::nullopt;
    return it->second;
}

int AllocationBook::active_count() const {
    int count = 0;
    for (const auto& [id, r] : reservations_) {
        if (r.state == ReservationState::Active) ++count;
    }
    return count;
}

Status AllocationBook::check_consistency() const {
    for (const auto& [node, entries] : allocation_) {
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto resv = reservations_.find(entries[i].reservation_id);
            if (resv == reservations_.end()) {
                return make_error(errc::store_corrupt, "entry references missing reservation on " + node);
            }
            if (resv->second.state == ReservationState::Cancelled ||
                resv->second.state == ReservationState::Expired) {
                return make_error(errc::store_corrupt, "entry references finished reservation on " + node);
            }
            if (i > 0) {
                if (entries[i - 1].window.start > entries[i].window.start) {
                    return make_error(errc::store_corrupt, "windows out of order on " + node);
                }
                if (entries[i - 1].window.overlaps(entries[i].window)) {
                    return make_error(errc::store_corrupt, "overlapping windows on " + node);
                }
            }
        }
    }
    return Status::success();
}

json AllocationBook::snapshot() const {
    json reservations = json::array();
    for (const auto& [id, r] : reservations_) reservations.push_back(r.to_json());
    json allocation = json::object();
    for (const auto& [node, entries] : allocation_) {
        json list = json::array();
        for (const auto& entry : entries) list.push_back(entry.to_json());
        allocation[node] = std::move(list);
    }
    return json{{"reservations", reservations}, {"allocation", allocation}};
}

void AllocationBook::restore(const json& state) {
    reservations_.clear();
    allocation_.clear();
    for (const auto& doc : state.value("reservations", json::array())) {
        Reservation r = Reservation::from_json(doc);
        reservations_[r.reservation_id] = std::move(r);
    }
    for (const auto& [node, entries] : state.value("allocation", json::object()).items()) {
        std::vector<AllocationEntry> list;
        for (const auto& doc : entries) list.push_back(AllocationEntry::from_json(doc));
        allocation_[node] = std::move(list);
    }
}

AdmissionDecision admissible(const std::vector<AllocationEntry>& windows, const std::string& app_id,
                             bool security_ok, TimestampS now) {
    for (const auto& entry : windows) {
        if (entry.window.contains(now)) {
            if (!entry.bound_app.empty() && entry.bound_app == app_id) return {true, ""};
            return {false, "reserved"};
        }
    }
    if (!security_ok) return {false, "security"};
    return {true, ""};
}

// ---------------------------------------------------------------------------
// ReservationService
// ---------------------------------------------------------------------------

void ReservationService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    int max_rounds = static_cast<int>(ctx.opt_int("max_rounds", 3));
    std::int64_t horizon = ctx.opt_int("horizon_s", 86400);
    book_ = std::make_unique<AllocationBook>(max_rounds, horizon);
    if (!pending_restore_.is_null()) {
        book_->restore(pending_restore_);
        pending_restore_ = nullptr;
    }
    ctx.schedule_periodic("res.tick", static_cast<int>(ctx.opt_int("tick_period_ms", 1000)));
}

Result<std::vector<std::string>> ReservationService::candidate_nodes(const ReservationRequest& request) {
    auto reply = ctx_->call_local("directory", "dir.query", to_bytes(json{{"service", ""}}.dump()));
    if (!reply) return reply.error();
    json doc = json::parse(to_string(reply.value()), nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_envelope, "malformed directory reply");
    std::vector<std::string> nodes;
    for (const auto& entry : doc.value("records", json::array())) {
        if (entry.value("state", "") != "alive") continue;
        auto services = entry.value("services", std::vector<std::string>{});
        bool ok = true;
        for (const auto& wanted : request.required_services) {
            if (std::find(services.begin(), services.end(), wanted) == services.end()) {
                ok = false;
                break;
            }
        }
        if (ok) nodes.push_back(entry.value("node_id", ""));
    }
    std::sort(nodes.begin(), nodes.end());
    return nodes;
}

void ReservationService::push_allocations(const std::vector<std::string>& nodes) {
    auto reply = ctx_->call_local("directory", "dir.query", to_bytes(json{{"service", ""}}.dump()));
    if (!reply) return;
    json doc = json::parse(to_string(reply.value()), nullptr, false);
    if (doc.is_discarded()) return;
    std::map<std::string, std::string> endpoints;
    for (const auto& entry : doc.value("records", json::array())) {
        endpoints[entry.value("node_id", "")] = entry.value("endpoint", "");
    }
    for (const auto& node : nodes) {
        auto it = endpoints.find(node);
        if (it == endpoints.end()) continue;
        auto ep = parse_endpoint(it->second);
        if (!ep) continue;
        json windows = json::array();
        for (const auto& entry : book_->node_windows(node)) windows.push_back(entry.to_json());
        (void)ctx_->post(ep.value(), "allocation", "alloc.sync",
                         to_bytes(json{{"windows", windows}}.dump()));
    }
}

Result<Bytes> ReservationService::finish_outcome(const NegotiationOutcome& outcome) {
    switch (outcome.kind) {
        case NegotiationOutcome::Kind::Confirmed: {
            push_allocations(outcome.reservation.node_ids);
            return to_bytes(json{{"outcome", "confirmed"}, {"reservation", outcome.reservation.to_json()}}.dump());
        }
        case NegotiationOutcome::Kind::Counter:
            return to_bytes(json{{"outcome", "counter"}, {"counter", outcome.counter.to_json()}}.dump());
        case NegotiationOutcome::Kind::Rejected:
        default:
            return to_bytes(json{{"outcome", "rejected"}, {"reason", outcome.reject_reason}}.dump());
    }
}

Result<Bytes> ReservationService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "res.request" || request.kind == "res.accept") {
        security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                    body.value("credentials", json::object()).value("token", "")};
        auto principal = ctx_->security().authenticate(creds);
        if (!principal) return make_error(errc::unauthenticated, "authentication failed");
        if (!ctx_->security().authorize(principal.value(), security::Action::Reserve)) {
            return make_error(errc::denied, "denied");
        }

        if (request.kind == "res.request") {
            ReservationRequest req = ReservationRequest::from_json(body.value("request", json::object()));
            req.requester = principal.value().user_id;
            if (req.round > book_->max_rounds()) {
                return make_error(errc::invalid_request, "round beyond max_rounds");
            }
            if (auto st = req.validate(); !st) return st.error();
            auto candidates = candidate_nodes(req);
            if (!candidates) return candidates.error();
            return finish_outcome(book_->request(req, candidates.value()));
        }

        CounterOffer offer = CounterOffer::from_json(body.value("counter", json::object()));
        if (offer.round >= book_->max_rounds()) {
            return make_error(errc::invalid_request, "counter offer round exhausted");
        }
        offer.original.requester = principal.value().user_id;
        auto candidates = candidate_nodes(offer.original);
        if (!candidates) return candidates.error();
        return finish_outcome(book_->accept_counter(offer, candidates.value()));
    }
    if (request.kind == "res.cancel") {
        security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                    body.value("credentials", json::object()).value("token", "")};
        auto principal = ctx_->security().authenticate(creds);
        if (!principal) return make_error(errc::unauthenticated, "authentication failed");
        if (!ctx_->security().authorize(principal.value(), security::Action::Reserve)) {
            return make_error(errc::denied, "denied");
        }
        std::string id = body.value("reservation_id", "");
        auto affected = book_->find(id);
        if (auto st = book_->cancel(id, principal.value().user_id); !st) return st.error();
        if (affected) push_allocations(affected->node_ids);
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "res.bind") {
        // Internal verb used by the scheduler after application registration.
        std::string id = body.value("reservation_id", "");
        std::string app = body.value("app_id", "");
        std::string owner = body.value("owner", "");
        auto reservation = book_->find(id);
        if (!reservation) return make_error(errc::not_found, "no such reservation");
        if (!owner.empty() && reservation->owner != owner) return make_error(errc::denied, "denied");
        if (auto st = book_->bind(id, app); !st) return st.error();
        push_allocations(reservation->node_ids);
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "res.mapview") {
        json allocation = json::object();
        for (const auto& [node, entries] : book_->allocation()) {
            json list = json::array();
            for (const auto& entry : entries) list.push_back(entry.to_json());
            allocation[node] = std::move(list);
        }
        return to_bytes(json{{"allocation", allocation}, {"active_count", book_->active_count()}}.dump());
    }
    if (request.kind == "res.windows") {
        json windows = json::array();
        for (const auto& entry : book_->node_windows(body.value("node_id", ""))) {
            windows.push_back(entry.to_json());
        }
        return to_bytes(json{{"windows", windows}}.dump());
    }
    if (request.kind == "res.tick") {
        auto transitions = book_->tick(now_s());
        if (!transitions.empty()) {
            std::set<std::string> affected;
            for (const auto& t : transitions) {
                DG_LOG_INFO("reservation", "reservation " + t.reservation_id + ": " +
                                               reservation_state_name(t.from) + " -> " +
                                               reservation_state_name(t.to));
                auto r = book_->find(t.reservation_id);
                if (r) affected.insert(r->node_ids.begin(), r->node_ids.end());
            }
            push_allocations(std::vector<std::string>(affected.begin(), affected.end()));
        }
        return to_bytes(json{{"transitions", transitions.size()}}.dump());
    }
    return make_error(errc::invalid_request, "unknown reservation verb: " + request.kind);
}

json ReservationService::snapshot_state() { return book_ ? book_->snapshot() : json{}; }

void ReservationService::restore_state(const json& state) {
    if (book_) {
        book_->restore(state);
    } else {
        pending_restore_ = state;
    }
}

// ---------------------------------------------------------------------------
// AllocationManagerService
// ---------------------------------------------------------------------------

void AllocationManagerService::start(ServiceContext& ctx) { ctx_ = &ctx; }

Result<Bytes> AllocationManagerService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "alloc.sync") {
        windows_.clear();
        for (const auto& doc : body.value("windows", json::array())) {
            windows_.push_back(AllocationEntry::from_json(doc));
        }
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "alloc.check") {
        AdmissionDecision decision = admissible(windows_, body.value("app_id", ""),
                                                body.value("security_ok", false), now_s());
        return to_bytes(json{{"admit", decision.admit}, {"reason", decision.reason}}.dump());
    }
    if (request.kind == "alloc.windows") {
        json windows = json::array();
        for (const auto& entry : windows_) windows.push_back(entry.to_json());
        return to_bytes(json{{"windows", windows}}.dump());
    }
    return make_error(errc::invalid_request, "unknown allocation verb: " + request.kind);
}

}  // namespace deskgrid::resv
