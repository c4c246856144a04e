#include "deskgrid/appmodel.hpp"

#include "deskgrid/wire.hpp"

namespace deskgrid::app {

using nlohmann::json;

Client::Client(Endpoint master, security::Credentials credentials)
    : master_(std::move(master)), credentials_(std::move(credentials)), client_node_id_("client-" + new_uuid()) {}

Client::~Client() { close(); }

Status Client::connect() {
    transport_ = std::make_unique<MessageTransport>(client_node_id_, kDefaultMaxPayloadBytes);
    auto st = transport_->start(Endpoint{"127.0.0.1", 0}, [this](Envelope&& envelope, ReplySink sink) {
        if (envelope.kind == "app.event") {
            json body = json::parse(to_string(envelope.payload), nullptr, false);
            if (!body.is_discarded()) {
                for (const auto& doc : body.value("events", json::array())) {
                    deliver(exec::UnitEvent::from_json(doc));
                }
            }
            if (sink) sink(make_reply(envelope, client_node_id_, to_bytes(json{{"ok", true}}.dump())));
            return;
        }
        if (sink) {
            sink(make_error_reply(envelope, client_node_id_,
                                  make_error(errc::unknown_service, "client hosts no services")));
        }
    });
    if (!st) return st;
    delivery_thread_ = std::thread([this] { delivery_loop(); });
    return Status::success();
}

void Client::close() {
    {
        std::lock_guard<std::mutex> lock(queue_mutex_);
        if (closing_) return;
        closing_ = true;
        queue_cv_.notify_all();
    }
    if (delivery_thread_.joinable()) delivery_thread_.join();
    if (transport_) transport_->stop();
}

Result<json> Client::call(const std::string& service, const std::string& kind, json body, int timeout_ms) {
    if (!transport_) return make_error(errc::connection_failed, "client not connected");
    if (!body.contains("credentials")) {
        body["credentials"] = {{"user_id", credentials_.user_id}, {"token", credentials_.token}};
    }
    Envelope request = make_request(client_node_id_, "", service, kind, to_bytes(body.dump()));
    auto reply = transport_->call(master_, std::move(request), timeout_ms);
    if (!reply) return reply.error();
    if (reply.value().is_error()) return decode_error_payload(reply.value());
    json doc = json::parse(to_string(reply.value().payload), nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_envelope, "reply payload is not JSON");
    return doc;
}

Result<Application> Client::create_application(const std::string& model, const std::string& display_name,
                                               const std::string& reservation_id) {
    json body = {{"model", model},
                 {"display_name", display_name},
                 {"reservation_id", reservation_id},
                 {"client_endpoint", self_endpoint().to_string()}};
    auto reply = call("scheduler", "app.create", std::move(body));
    if (!reply) return reply.error();
    auto record = exec::ApplicationRecord::from_json(reply.value().value("app", json::object()));
    return Application(*this, record.app_id, record.model);
}

Result<store::DataChannelSpec> Client::storage_channel() {
    auto reply = call("storage", "st.channel", json::object());
    if (!reply) return reply.error();
    return store::DataChannelSpec::from_json(reply.value().value("channel", json::object()));
}

void Client::route_events(const std::string& app_id, EventCallback callback) {
    std::lock_guard<std::mutex> lock(routes_mutex_);
    routes_[app_id] = std::move(callback);
}

void Client::unroute_events(const std::string& app_id) {
    std::lock_guard<std::mutex> lock(routes_mutex_);
    routes_.erase(app_id);
}

void Client::deliver(const exec::UnitEvent& event) {
    {
        // At-least-once delivery upstream; the per-unit sequence deduplicates.
        std::lock_guard<std::mutex> lock(routes_mutex_);
        auto& last = seen_seq_[event.app_id][event.unit_id];
        if (event.seq <= last) return;
        last = event.seq;
    }
    {
        std::lock_guard<std::mutex> lock(queue_mutex_);
        queue_.push_back(event);
    }
    queue_cv_.notify_one();
}

void Client::delivery_loop() {
    while (true) {
        exec::UnitEvent event;
        {
            std::unique_lock<std::mutex> lock(queue_mutex_);
            queue_cv_.wait(lock, [this] { return closing_ || !queue_.empty(); });
            if (closing_ && queue_.empty()) return;
            event = std::move(queue_.front());
            queue_.pop_front();
        }
        EventCallback callback;
        {
            std::lock_guard<std::mutex> lock(routes_mutex_);
            auto it = routes_.find(event.app_id);
            if (it != routes_.end()) callback = it->second;
        }
        if (callback) callback(event);
    }
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

Application::Application(Client& client, std::string app_id, std::string model)
    : client_(client), app_id_(std::move(app_id)), model_(std::move(model)) {}

Result<std::string> Application::add_unit(const std::string& operation, Bytes parameters,
                                          store::StagingPlan staging, int max_attempts) {
    if (stopped_) return make_error(errc::app_stopped, "application is stopped");
    PendingUnit unit;
    unit.unit_id = new_uuid();
    unit.operation = operation;
    unit.parameters = std::move(parameters);
    unit.staging = std::move(staging);
    unit.max_attempts = max_attempts;
    pending_.push_back(unit);
    return unit.unit_id;
}

Status Application::submit() {
    if (stopped_) return make_error(errc::app_stopped, "application is stopped");
    if (pending_.empty()) return Status::success();
    json jobs = json::array();
    for (const auto& unit : pending_) {
        jobs.push_back({{"unit_id", unit.unit_id},
                        {"operation", unit.operation},
                        {"parameters", base64_encode(unit.parameters)},
                        {"staging", unit.staging.to_json()},
                        {"max_attempts", unit.max_attempts}});
    }
    auto reply = client_.call("scheduler", "app.submit", json{{"app_id", app_id_}, {"jobs", jobs}});
    if (!reply) return reply.error();
    for (const auto& unit : pending_) submitted_units_.push_back(unit.unit_id);
    pending_.clear();
    return Status::success();
}

Result<std::vector<exec::JobDescriptor>> Application::query() const {
    auto reply = client_.call("scheduler", "app.query", json{{"app_id", app_id_}});
    if (!reply) return reply.error();
    std::vector<exec::JobDescriptor> jobs;
    for (const auto& doc : reply.value().value("jobs", json::array())) {
        jobs.push_back(exec::JobDescriptor::from_json(doc));
    }
    return jobs;
}

Result<exec::JobDescriptor> Application::unit(const std::string& unit_id) const {
    auto jobs = query();
    if (!jobs) return jobs.error();
    for (const auto& job : jobs.value()) {
        if (job.job_id == unit_id) return job;
    }
    return make_error(errc::unknown_job, unit_id);
}

Result<std::map<std::string, exec::JobDescriptor>> Application::wait(int timeout_ms) {
    TimestampMs deadline = timeout_ms < 0 ? -1 : now_ms() + timeout_ms;
    while (true) {
        auto jobs = query();
        if (!jobs) return jobs.error();
        bool all_terminal = true;
        for (const auto& job : jobs.value()) {
            if (!exec::is_terminal(job.state)) {
                all_terminal = false;
                break;
            }
        }
        if (all_terminal) {
            std::map<std::string, exec::JobDescriptor> result;
            for (auto& job : jobs.value()) result[job.job_id] = std::move(job);
            return result;
        }
        if (deadline >= 0 && now_ms() >= deadline) {
            return make_error(errc::timeout, "units still outstanding at wait deadline");
        }
        deskgrid::sleep_ms(50);
    }
}

Status Application::stop() {
    auto reply = client_.call("scheduler", "app.stop", json{{"app_id", app_id_}});
    if (!reply) return reply.error();
    stopped_ = true;
    return Status::success();
}

Status Application::on_event(EventCallback callback) {
    client_.route_events(app_id_, std::move(callback));
    auto reply = client_.call("scheduler", "app.subscribe",
                              json{{"app_id", app_id_}, {"endpoint", client_.self_endpoint().to_string()}});
    if (!reply) return reply.error();
    // Replay the snapshot through the same dedup path as pushes.
    for (const auto& doc : reply.value().value("events", json::array())) {
        client_.deliver(exec::UnitEvent::from_json(doc));
    }
    return Status::success();
}

}  // namespace deskgrid::app
