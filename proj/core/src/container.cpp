#include "deskgrid/container.hpp"

#include "deskgrid/directory.hpp"

#include <algorithm>

namespace deskgrid {

using nlohmann::json;

const char* service_state_name(ServiceState state) {
    switch (state) {
        case ServiceState::Loaded: return "loaded";
        case ServiceState::Started: return "started";
        case ServiceState::Stopped: return "stopped";
        case ServiceState::Failed: return "failed";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// ServiceContext
// ---------------------------------------------------------------------------

ServiceContext::ServiceContext(Container& owner, std::string service_name, json options)
    : owner_(owner), service_name_(std::move(service_name)), options_(std::move(options)) {}

const std::string& ServiceContext::node_id() const { return owner_.node_id(); }

const Endpoint& ServiceContext::self_endpoint() const {
    static thread_local Endpoint ep;
    ep = owner_.endpoint();
    return ep;
}

const ContainerConfig& ServiceContext::config() const { return owner_.config(); }

std::int64_t ServiceContext::opt_int(const std::string& key, std::int64_t fallback) const {
    if (options_.is_object() && options_.contains(key) && options_[key].is_number()) {
        return options_[key].get<std::int64_t>();
    }
    return owner_.config().opt_int(key, fallback);
}

std::string ServiceContext::opt_str(const std::string& key, const std::string& fallback) const {
    if (options_.is_object() && options_.contains(key) && options_[key].is_string()) {
        return options_[key].get<std::string>();
    }
    return owner_.config().opt_str(key, fallback);
}

Result<Bytes> ServiceContext::call(const Endpoint& peer, const std::string& service, const std::string& kind,
                                   Bytes payload, int timeout_ms) {
    return owner_.call(peer, service, kind, std::move(payload), timeout_ms);
}

Status ServiceContext::post(const Endpoint& peer, const std::string& service, const std::string& kind,
                            Bytes payload) {
    return owner_.post(peer, service, kind, std::move(payload));
}

Result<Bytes> ServiceContext::call_local(const std::string& service, const std::string& kind, Bytes payload,
                                         int timeout_ms) {
    return owner_.call_local(service, kind, std::move(payload), timeout_ms);
}

Status ServiceContext::post_local(const std::string& service, const std::string& kind, Bytes payload) {
    return owner_.post_local(service, kind, std::move(payload));
}

void ServiceContext::schedule_periodic(const std::string& kind, int period_ms) {
    owner_.schedule_periodic(service_name_, kind, period_ms);
}

fabric::Pal& ServiceContext::pal() { return owner_.pal(); }
security::SecurityProvider& ServiceContext::security() { return owner_.security(); }

Status ServiceContext::persist_with_own_state(json own_state) {
    return owner_.persist_now(service_name_, std::move(own_state));
}

// ---------------------------------------------------------------------------
// ServiceCatalog
// ---------------------------------------------------------------------------

ServiceCatalog& ServiceCatalog::instance() {
    static ServiceCatalog catalog;
    return catalog;
}

void ServiceCatalog::add(const std::string& name, ServiceFactory factory) {
    std::lock_guard<std::mutex> lock(mutex_);
    factories_[name] = std::move(factory);
}

bool ServiceCatalog::contains(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return factories_.count(name) > 0;
}

Result<std::unique_ptr<Service>> ServiceCatalog::create(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = factories_.find(name);
    if (it == factories_.end()) {
        return make_error(errc::service_load_failure, "no such service: " + name);
    }
    return it->second();
}

// ---------------------------------------------------------------------------
// Control service: built-in verbs on every container ("_container")
// ---------------------------------------------------------------------------

namespace {

class ControlService : public Service {
public:
    explicit ControlService(Container& container) : container_(container) {}

    void start(ServiceContext& ctx) override {
        ctx_ = &ctx;
        if (container_.persistence().name() == "durable") {
            ctx.schedule_periodic("ctl.snapshot_tick", container_.config().snapshot_interval_ms());
        }
    }

    Result<Bytes> handle(const Envelope& request) override;

private:
    Status require_admin(const json& body) {
        security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                    body.value("credentials", json::object()).value("token", "")};
        auto principal = container_.security().authenticate(creds);
        if (!principal) return principal.error();
        if (!container_.security().authorize(principal.value(), security::Action::Admin)) {
            return make_error(errc::denied, "denied");
        }
        return Status::success();
    }

    Container& container_;
    ServiceContext* ctx_ = nullptr;
};

Result<Bytes> ControlService::handle(const Envelope& request) {
    // Envelopes addressed to another node are forwarded over the wire.
    if (!request.target_node.empty() && request.target_node != container_.node_id()) {
        return container_.dispatch(request);
    }

    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "ctl.ping") {
        return to_bytes(json{{"node_id", container_.node_id()},
                             {"endpoint", container_.endpoint().to_string()}}
                            .dump());
    }
    if (request.kind == "ctl.info") {
        json regs = json::array();
        for (const auto& reg : container_.registrations()) {
            regs.push_back({{"name", reg.name}, {"state", service_state_name(reg.state)}});
        }
        auto stats = container_.pal().sample_dynamic();
        return to_bytes(json{{"node_id", container_.node_id()},
                             {"endpoint", container_.endpoint().to_string()},
                             {"services", regs},
                             {"cpu_usage_percent", stats.cpu_usage_percent},
                             {"available_memory_mb", stats.available_memory_mb}}
                            .dump());
    }
    if (request.kind == "ctl.locate_directory") {
        auto ep = container_.directory_endpoint();
        if (!ep) return make_error(errc::not_found, "this node has not joined a cloud yet");
        return to_bytes(json{{"endpoint", ep->to_string()}}.dump());
    }
    if (request.kind == "ctl.install") {
        if (auto st = require_admin(body); !st) return st.error();
        auto reg = container_.install_service(body.value("name", ""), body.value("options", json::object()));
        if (!reg) return reg.error();
        return to_bytes(json{{"name", reg.value().name}, {"state", service_state_name(reg.value().state)}}.dump());
    }
    if (request.kind == "ctl.uninstall") {
        if (auto st = require_admin(body); !st) return st.error();
        if (auto st = container_.uninstall_service(body.value("name", "")); !st) return st.error();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "ctl.stop") {
        if (auto st = require_admin(body); !st) return st.error();
        container_.request_stop_async();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "ctl.snapshot_tick") {
        (void)container_.persist_now("", nullptr);
        return to_bytes(json{{"ok", true}}.dump());
    }
    return make_error(errc::invalid_request, "unknown control verb: " + request.kind);
}

}  // namespace

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

Container::Container(ContainerConfig config) : config_(std::move(config)) {}

Container::~Container() {
    stop();
    if (stopper_thread_.joinable()) stopper_thread_.join();
}

Status Container::start() {
    if (phase_.load() != Phase::Fresh) {
        return make_error(errc::invalid_request, "container already started");
    }
    register_builtins();

    if (auto st = config_.validate(); !st) return st;

    // Security and persistence providers come up before any service.
    auto security = security::make_security_provider(config_.security_provider,
                                                     config_.opt_str("credential_file", ""));
    if (!security) return security.error();
    security_ = std::move(security.value());

    auto persistence = persistence::make_persistence_provider(config_.persistence_provider,
                                                              config_.opt_str("store_dir", ""));
    if (!persistence) return persistence.error();
    persistence_ = std::move(persistence.value());

    auto restored = persistence_->restore();
    if (!restored) return restored.error();
    if (restored.value().has_value()) {
        restored_ = std::move(*restored.value());
        snapshot_sequence_.store(restored_->sequence);
        DG_LOG_INFO("container", "restored snapshot sequence " + std::to_string(restored_->sequence));
    }

    // The host is probed before services start.
    (void)pal_.probe_static();

    transport_ = std::make_unique<MessageTransport>(config_.node_id, config_.max_payload_bytes());
    auto listen = parse_endpoint(config_.listen_endpoint);
    if (!listen) return listen.error();
    if (auto st = transport_->start(listen.value(), [this](Envelope&& env, ReplySink sink) {
            on_inbound(std::move(env), std::move(sink));
        });
        !st) {
        return st;
    }

    if (auto st = start_services(); !st) {
        transport_->stop();
        return st;
    }

    phase_.store(Phase::Running);
    gate_open_.store(true);
    for (const auto& runtime : services_) runtime->cv.notify_all();
    control_->cv.notify_all();

    timer_thread_ = std::thread([this] { timer_loop(); });
    heartbeat_thread_ = std::thread([this] { heartbeat_loop(); });
    stopper_thread_ = std::thread([this] { stopper_loop(); });

    DG_LOG_INFO("container", "node " + config_.node_id + " listening on " + endpoint().to_string());
    return Status::success();
}

Status Container::start_services() {
    // Load phase: construct everything first so a bad manifest aborts before
    // any service starts.
    control_ = std::make_shared<ServiceRuntime>();
    control_->name = "_container";
    control_->service = std::make_unique<ControlService>(*this);
    control_->context = std::make_unique<ServiceContext>(*this, "_container", json::object());

    std::vector<std::shared_ptr<ServiceRuntime>> loaded;
    for (const auto& spec : config_.services) {
        auto service = ServiceCatalog::instance().create(spec.name);
        if (!service) return service.error();
        auto runtime = std::make_shared<ServiceRuntime>();
        runtime->name = spec.name;
        runtime->service = std::move(service.value());
        runtime->context = std::make_unique<ServiceContext>(*this, spec.name, spec.options);
        if (restored_ && restored_->sections.contains(spec.name)) {
            runtime->service->restore_state(restored_->sections[spec.name]);
        }
        loaded.push_back(std::move(runtime));
    }

    {
        std::lock_guard<std::mutex> lock(services_mutex_);
        services_ = std::move(loaded);
    }
    control_->worker = std::thread([this, rt = control_] { worker_loop(rt.get()); });

    // Start phase, manifest order. On failure stop what already started, in
    // reverse order.
    std::vector<ServiceRuntime*> started;
    for (const auto& runtime : services_) {
        try {
            runtime->service->start(*runtime->context);
        } catch (const std::exception& e) {
            for (auto it = started.rbegin(); it != started.rend(); ++it) {
                (*it)->service->stop();
                (*it)->state = ServiceState::Stopped;
            }
            runtime->state = ServiceState::Failed;
            return make_error(errc::service_load_failure, runtime->name + ": " + e.what());
        }
        runtime->state = ServiceState::Started;
        runtime->worker = std::thread([this, rt = runtime] { worker_loop(rt.get()); });
        started.push_back(runtime.get());
    }
    try {
        control_->service->start(*control_->context);
        control_->state = ServiceState::Started;
    } catch (const std::exception& e) {
        return make_error(errc::service_load_failure, std::string("_container: ") + e.what());
    }
    return Status::success();
}

void Container::request_stop_async() {
    std::lock_guard<std::mutex> lock(lifecycle_mutex_);
    stop_requested_.store(true);
    lifecycle_cv_.notify_all();
}

void Container::stopper_loop() {
    std::unique_lock<std::mutex> lock(lifecycle_mutex_);
    lifecycle_cv_.wait(lock, [this] { return stop_requested_.load(); });
    if (phase_.load() != Phase::Running) return;  // stop() already ran inline
    lock.unlock();
    internal_stop(!kill_requested_.load());
}

void Container::stop() {
    if (phase_.load() == Phase::Fresh) {
        phase_.store(Phase::Stopped);
        return;
    }
    request_stop_async();
    internal_stop(!kill_requested_.load());
}

void Container::kill() {
    kill_requested_.store(true);
    stop();
}

void Container::internal_stop(bool graceful) {
    {
        std::lock_guard<std::mutex> lock(stop_once_mutex_);
        if (stop_ran_) {
            // Someone else is (or was) stopping; wait for them below.
            graceful = false;
        } else {
            stop_ran_ = true;

            shutting_down_.store(true);
            lifecycle_cv_.notify_all();
            if (heartbeat_thread_.joinable()) heartbeat_thread_.join();

            if (!graceful && transport_) transport_->stop();
            if (graceful) leave_directory();

            {
                std::lock_guard<std::mutex> timer_lock(timer_mutex_);
                timer_cv_.notify_all();
            }
            if (timer_thread_.joinable()) timer_thread_.join();

            std::vector<std::shared_ptr<ServiceRuntime>> snapshot;
            {
                std::lock_guard<std::mutex> services_lock(services_mutex_);
                snapshot = services_;
            }
            // Reverse manifest order.
            for (auto it = snapshot.rbegin(); it != snapshot.rend(); ++it) {
                ServiceRuntime* runtime = it->get();
                if (graceful) (void)drain_runtime(runtime, config_.drain_timeout_ms());
                {
                    std::lock_guard<std::mutex> rt_lock(runtime->mutex);
                    runtime->closing = true;
                    runtime->cv.notify_all();
                }
                if (runtime->worker.joinable()) runtime->worker.join();
                if (runtime->state == ServiceState::Started) {
                    runtime->service->stop();
                    runtime->state = ServiceState::Stopped;
                }
            }
            if (control_) {
                {
                    std::lock_guard<std::mutex> rt_lock(control_->mutex);
                    control_->closing = true;
                    control_->cv.notify_all();
                }
                if (control_->worker.joinable()) control_->worker.join();
                control_->state = ServiceState::Stopped;
            }
            if (transport_) transport_->stop();
            phase_.store(Phase::Stopped);
            {
                std::lock_guard<std::mutex> lock2(lifecycle_mutex_);
                lifecycle_cv_.notify_all();
            }
            DG_LOG_INFO("container", "node " + config_.node_id + " stopped");
            return;
        }
    }
    // Wait for the stop that beat us.
    std::unique_lock<std::mutex> lock(lifecycle_mutex_);
    lifecycle_cv_.wait(lock, [this] { return phase_.load() == Phase::Stopped; });
}

void Container::wait_until_stopped() {
    std::unique_lock<std::mutex> lock(lifecycle_mutex_);
    lifecycle_cv_.wait(lock, [this] { return phase_.load() == Phase::Stopped; });
}

// ---------------------------------------------------------------------------
// Mailboxes
// ---------------------------------------------------------------------------

void Container::enqueue(ServiceRuntime* runtime, WorkItem item) {
    {
        std::lock_guard<std::mutex> lock(runtime->mutex);
        if (runtime->closing) return;
        runtime->mailbox.push_back(std::move(item));
    }
    runtime->cv.notify_one();
}

void Container::worker_loop(ServiceRuntime* runtime) {
    while (true) {
        WorkItem item;
        {
            std::unique_lock<std::mutex> lock(runtime->mutex);
            runtime->cv.wait(lock, [&] {
                return runtime->closing || (!runtime->mailbox.empty() && gate_open_.load());
            });
            if (runtime->closing && runtime->mailbox.empty()) return;
            if (runtime->mailbox.empty()) continue;
            item = std::move(runtime->mailbox.front());
            runtime->mailbox.pop_front();
            runtime->idle = false;
        }

        Result<Bytes> outcome = Error{errc::operation_error, "unhandled"};
        try {
            outcome = runtime->service->handle(item.envelope);
        } catch (const std::exception& e) {
            outcome = Error{errc::operation_error, std::string("service threw: ") + e.what()};
        }
        if (item.sink) {
            if (outcome.ok()) {
                item.sink(make_reply(item.envelope, config_.node_id, std::move(outcome.value())));
            } else {
                item.sink(make_error_reply(item.envelope, config_.node_id, outcome.error()));
            }
        }
        // Refresh the persistence cache after every message; stateless
        // services return null and cost nothing.
        json state = runtime->service->snapshot_state();
        if (!state.is_null()) {
            std::lock_guard<std::mutex> lock(runtime->state_mutex);
            runtime->cached_state = std::move(state);
        }
        {
            std::lock_guard<std::mutex> lock(runtime->mutex);
            runtime->idle = true;
        }
        runtime->cv.notify_all();
    }
}

bool Container::drain_runtime(ServiceRuntime* runtime, int timeout_ms) {
    TimestampMs deadline = now_ms() + timeout_ms;
    while (now_ms() < deadline) {
        {
            std::lock_guard<std::mutex> lock(runtime->mutex);
            if (runtime->mailbox.empty() && runtime->idle && runtime->service->drained()) return true;
        }
        deskgrid::sleep_ms(10);
    }
    return false;
}

Container::ServiceRuntime* Container::find_runtime(const std::string& name) {
    std::lock_guard<std::mutex> lock(services_mutex_);
    for (const auto& runtime : services_) {
        if (runtime->name == name) return runtime.get();
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

void Container::on_inbound(Envelope&& envelope, ReplySink sink) {
    // Misaddressed envelopes go to the control mailbox, which forwards them.
    bool for_self = envelope.target_node.empty() || envelope.target_node == config_.node_id;
    if (!for_self || envelope.target_service == "_container") {
        enqueue(control_.get(), WorkItem{std::move(envelope), std::move(sink)});
        return;
    }
    ServiceRuntime* runtime = find_runtime(envelope.target_service);
    if (!runtime) {
        if (sink) {
            sink(make_error_reply(envelope, config_.node_id,
                                  make_error(errc::unknown_service, "no service " + envelope.target_service +
                                                                        " on node " + config_.node_id)));
        }
        return;
    }
    enqueue(runtime, WorkItem{std::move(envelope), std::move(sink)});
}

Result<Bytes> Container::call(const Endpoint& peer, const std::string& service, const std::string& kind,
                              Bytes payload, int timeout_ms) {
    if (timeout_ms < 0) timeout_ms = config_.call_timeout_ms();
    if (peer == endpoint()) return call_local(service, kind, std::move(payload), timeout_ms);
    Envelope request = make_request(config_.node_id, "", service, kind, std::move(payload));
    auto reply = transport_->call(peer, std::move(request), timeout_ms);
    if (!reply) return reply.error();
    if (reply.value().is_error()) return decode_error_payload(reply.value());
    return std::move(reply.value().payload);
}

Status Container::post(const Endpoint& peer, const std::string& service, const std::string& kind,
                       Bytes payload) {
    if (peer == endpoint()) return post_local(service, kind, std::move(payload));
    Envelope message = make_request(config_.node_id, "", service, kind, std::move(payload));
    return transport_->post(peer, std::move(message));
}

Result<Bytes> Container::call_local(const std::string& service, const std::string& kind, Bytes payload,
                                    int timeout_ms) {
    if (timeout_ms < 0) timeout_ms = config_.call_timeout_ms();
    ServiceRuntime* runtime = service == "_container" ? control_.get() : find_runtime(service);
    if (!runtime) return make_error(errc::unknown_service, "no service " + service + " on this node");

    struct LocalCall {
        std::mutex mutex;
        std::condition_variable cv;
        bool done = false;
        Envelope reply;
    };
    auto state = std::make_shared<LocalCall>();
    Envelope request = make_request(config_.node_id, config_.node_id, service, kind, std::move(payload));
    ReplySink sink = [state](Envelope reply) {
        std::lock_guard<std::mutex> lock(state->mutex);
        state->done = true;
        state->reply = std::move(reply);
        state->cv.notify_all();
    };
    enqueue(runtime, WorkItem{std::move(request), std::move(sink)});

    std::unique_lock<std::mutex> lock(state->mutex);
    if (!state->cv.wait_for(lock, std::chrono::milliseconds(timeout_ms), [&] { return state->done; })) {
        return make_error(errc::timeout, "local call to " + service + "/" + kind + " timed out");
    }
    if (state->reply.is_error()) return decode_error_payload(state->reply);
    return std::move(state->reply.payload);
}

Status Container::post_local(const std::string& service, const std::string& kind, Bytes payload) {
    ServiceRuntime* runtime = service == "_container" ? control_.get() : find_runtime(service);
    if (!runtime) return make_error(errc::unknown_service, "no service " + service + " on this node");
    Envelope request = make_request(config_.node_id, config_.node_id, service, kind, std::move(payload));
    enqueue(runtime, WorkItem{std::move(request), nullptr});
    return Status::success();
}

Result<Bytes> Container::dispatch(const Envelope& envelope, int timeout_ms) {
    if (timeout_ms < 0) timeout_ms = config_.call_timeout_ms();
    if (envelope.target_node.empty() || envelope.target_node == config_.node_id) {
        return call_local(envelope.target_service, envelope.kind, envelope.payload, timeout_ms);
    }
    auto peer = peer_endpoint(envelope.target_node);
    if (!peer) return make_error(errc::unknown_node, "no route to node " + envelope.target_node);
    Envelope request = envelope;
    auto reply = transport_->call(*peer, std::move(request), timeout_ms);
    if (!reply) return reply.error();
    if (reply.value().is_error()) return decode_error_payload(reply.value());
    return std::move(reply.value().payload);
}

// ---------------------------------------------------------------------------
// Registrations
// ---------------------------------------------------------------------------

std::vector<ServiceRegistration> Container::registrations() const {
    std::lock_guard<std::mutex> lock(services_mutex_);
    std::vector<ServiceRegistration> out;
    for (const auto& runtime : services_) out.push_back({runtime->name, runtime->state});
    return out;
}

std::vector<std::string> Container::started_service_names() const {
    std::lock_guard<std::mutex> lock(services_mutex_);
    std::vector<std::string> out;
    for (const auto& runtime : services_) {
        if (runtime->state == ServiceState::Started) out.push_back(runtime->name);
    }
    return out;
}

Result<ServiceRegistration> Container::install_service(const std::string& name, json options) {
    if (phase_.load() != Phase::Running) return make_error(errc::invalid_request, "container not running");
    if (find_runtime(name)) return make_error(errc::already_installed, name + " already installed");
    auto service = ServiceCatalog::instance().create(name);
    if (!service) return service.error();

    auto runtime = std::make_shared<ServiceRuntime>();
    runtime->name = name;
    runtime->service = std::move(service.value());
    runtime->context = std::make_unique<ServiceContext>(*this, name, std::move(options));
    try {
        runtime->service->start(*runtime->context);
    } catch (const std::exception& e) {
        return make_error(errc::service_load_failure, name + ": " + e.what());
    }
    runtime->state = ServiceState::Started;
    runtime->worker = std::thread([this, rt = runtime] { worker_loop(rt.get()); });
    {
        std::lock_guard<std::mutex> lock(services_mutex_);
        services_.push_back(runtime);
    }
    DG_LOG_INFO("container", "installed service " + name);
    return ServiceRegistration{name, ServiceState::Started};
}

Status Container::uninstall_service(const std::string& name) {
    std::shared_ptr<ServiceRuntime> runtime;
    {
        std::lock_guard<std::mutex> lock(services_mutex_);
        for (auto it = services_.begin(); it != services_.end(); ++it) {
            if ((*it)->name == name) {
                runtime = *it;
                break;
            }
        }
    }
    if (!runtime) return make_error(errc::not_installed, name + " is not installed");

    bool drained = drain_runtime(runtime.get(), config_.drain_timeout_ms());
    {
        std::lock_guard<std::mutex> lock(runtime->mutex);
        runtime->closing = true;
        runtime->cv.notify_all();
    }
    if (runtime->worker.joinable()) runtime->worker.join();
    runtime->service->stop();
    runtime->state = ServiceState::Stopped;
    {
        std::lock_guard<std::mutex> lock(services_mutex_);
        std::erase(services_, runtime);
    }
    if (!drained) {
        return make_error(errc::drain_timeout, name + " removed after drain window expired with work pending");
    }
    DG_LOG_INFO("container", "uninstalled service " + name);
    return Status::success();
}

Service* Container::find_service(const std::string& name) {
    ServiceRuntime* runtime = find_runtime(name);
    return runtime ? runtime->service.get() : nullptr;
}

// ---------------------------------------------------------------------------
// Timers
// ---------------------------------------------------------------------------

void Container::schedule_periodic(const std::string& service, const std::string& kind, int period_ms) {
    std::lock_guard<std::mutex> lock(timer_mutex_);
    timers_.push_back(TimerEntry{service, kind, period_ms, now_ms() + period_ms});
    timer_cv_.notify_all();
}

void Container::timer_loop() {
    std::unique_lock<std::mutex> lock(timer_mutex_);
    while (!shutting_down_.load()) {
        TimestampMs next = now_ms() + 1000;
        for (const auto& entry : timers_) next = std::min(next, entry.next_due);
        timer_cv_.wait_for(lock, std::chrono::milliseconds(std::max<std::int64_t>(1, next - now_ms())));
        if (shutting_down_.load()) return;
        TimestampMs now = now_ms();
        std::vector<std::pair<std::string, std::string>> due;
        for (auto& entry : timers_) {
            if (entry.next_due <= now) {
                due.emplace_back(entry.service, entry.kind);
                entry.next_due = now + entry.period_ms;
            }
        }
        lock.unlock();
        for (const auto& [service, kind] : due) {
            if (service == "_container") {
                enqueue(control_.get(), WorkItem{make_request(config_.node_id, config_.node_id, service, kind, {}),
                                                 nullptr});
            } else {
                (void)post_local(service, kind, {});
            }
        }
        lock.lock();
    }
}

// ---------------------------------------------------------------------------
// Cloud membership: discovery, registration, heartbeats
// ---------------------------------------------------------------------------

std::optional<Endpoint> Container::directory_endpoint() const {
    if (config_.hosts("directory")) return endpoint();
    std::lock_guard<std::mutex> lock(master_mutex_);
    return master_endpoint_;
}

Result<Endpoint> Container::discover_directory() {
    if (config_.hosts("directory")) return endpoint();
    int per_seed_timeout = static_cast<int>(config_.opt_int("discover_timeout_ms", 1000));
    for (const auto& seed_text : config_.seed_peers) {
        auto seed = parse_endpoint(seed_text);
        if (!seed) continue;
        auto reply = call(seed.value(), "_container", "ctl.locate_directory", {}, per_seed_timeout);
        if (!reply) continue;
        json doc = json::parse(to_string(reply.value()), nullptr, false);
        if (doc.is_discarded()) continue;
        auto ep = parse_endpoint(doc.value("endpoint", ""));
        if (!ep) continue;
        {
            std::lock_guard<std::mutex> lock(master_mutex_);
            master_endpoint_ = ep.value();
        }
        return ep.value();
    }
    return make_error(errc::no_seed_reachable,
                      "none of " + std::to_string(config_.seed_peers.size()) + " seeds answered");
}

Status Container::register_with_directory() {
    auto master = directory_endpoint();
    if (!master) return make_error(errc::no_seed_reachable, "directory endpoint unknown");

    directory::MembershipRecord record;
    record.node_id = config_.node_id;
    record.endpoint = endpoint().to_string();
    record.services = started_service_names();
    record.static_profile = pal_.probe_static();
    record.last_stats = pal_.sample_dynamic();

    json body = {{"record", record.to_json()}};
    auto reply = call(*master, "directory", "dir.register", to_bytes(body.dump()),
                      std::max(2000, config_.heartbeat_interval_ms * 2));
    if (!reply) return reply.error();
    joined_.store(true);
    return Status::success();
}

void Container::leave_directory() {
    if (!joined_.load() || config_.hosts("directory")) return;
    auto master = directory_endpoint();
    if (!master) return;
    json body = {{"node_id", config_.node_id}};
    (void)call(*master, "directory", "dir.leave", to_bytes(body.dump()), 1000);
    joined_.store(false);
}

void Container::heartbeat_loop() {
    const bool is_directory_host = config_.hosts("directory");
    const bool wants_membership = is_directory_host || !config_.seed_peers.empty();
    const int interval = config_.heartbeat_interval_ms;
    const std::int64_t ttl_seconds = config_.opt_int("ttl_seconds", 0);
    const TimestampMs started_at = now_ms();
    int failed_heartbeats = 0;
    std::int64_t iteration = 0;

    if (!wants_membership && ttl_seconds == 0) return;

    while (!shutting_down_.load() && !stop_requested_.load()) {
        if (ttl_seconds > 0 && now_ms() - started_at >= ttl_seconds * 1000) {
            DG_LOG_INFO("container", "ttl expired, decommissioning node " + config_.node_id);
            leave_directory();
            request_stop_async();
            return;
        }

        if (wants_membership) {
            if (!joined_.load()) {
                // Rediscover every 10 intervals while disconnected; in between,
                // retry registration against the last known directory.
                bool have_master = directory_endpoint().has_value();
                if (!have_master || iteration % 10 == 0) {
                    (void)discover_directory();
                }
                if (directory_endpoint()) {
                    auto st = register_with_directory();
                    if (!st) {
                        DG_LOG_DEBUG("container", "register failed: " + st.error().to_string());
                        if (st.error().code == errc::license_rejected) {
                            // Capacity may free up later; slow down the retries.
                            for (int i = 0; i < 9 && !shutting_down_.load(); ++i) sleep_interval(interval);
                        }
                    }
                }
            } else {
                directory::Heartbeat hb;
                hb.node_id = config_.node_id;
                hb.services = started_service_names();
                hb.stats = pal_.sample_dynamic();
                hb.sequence = heartbeat_sequence_.fetch_add(1) + 1;
                json body = {{"heartbeat", hb.to_json()}};
                auto master = directory_endpoint();
                Result<Bytes> reply = Error{errc::no_seed_reachable, "no directory"};
                if (master) {
                    reply = call(*master, "directory", "dir.heartbeat", to_bytes(body.dump()),
                                 std::max(1000, interval * 2));
                }
                if (reply) {
                    failed_heartbeats = 0;
                } else if (reply.error().code == errc::unknown_node) {
                    // The catalogue lost us (restart or purge); register again.
                    joined_.store(false);
                    (void)register_with_directory();
                } else if (reply.error().code == errc::stale_heartbeat) {
                    // Another instance with our id outpaced us; resync the counter.
                    heartbeat_sequence_.fetch_add(100);
                } else {
                    if (++failed_heartbeats >= 10) {
                        joined_.store(false);
                        failed_heartbeats = 0;
                    }
                }
            }
        }
        ++iteration;
        sleep_interval(interval);
    }
}

void Container::sleep_interval(int interval_ms) {
    std::unique_lock<std::mutex> lock(lifecycle_mutex_);
    lifecycle_cv_.wait_for(lock, std::chrono::milliseconds(interval_ms),
                           [this] { return shutting_down_.load() || stop_requested_.load(); });
}

// ---------------------------------------------------------------------------
// Peers, provider, persistence
// ---------------------------------------------------------------------------

void Container::note_peer(const std::string& node_id, const Endpoint& endpoint) {
    std::lock_guard<std::mutex> lock(peers_mutex_);
    peers_[node_id] = endpoint;
}

std::optional<Endpoint> Container::peer_endpoint(const std::string& node_id) const {
    if (node_id == config_.node_id) return endpoint();
    std::lock_guard<std::mutex> lock(peers_mutex_);
    auto it = peers_.find(node_id);
    if (it == peers_.end()) return std::nullopt;
    return it->second;
}

void Container::set_provider(std::shared_ptr<fabric::Provider> provider) {
    std::lock_guard<std::mutex> lock(provider_mutex_);
    provider_ = std::move(provider);
}

std::shared_ptr<fabric::Provider> Container::provider() const {
    std::lock_guard<std::mutex> lock(provider_mutex_);
    return provider_;
}

Status Container::persist_now(const std::string& requesting_service, json own_state) {
    if (!persistence_) return make_error(errc::store_unavailable, "no persistence provider");

    persistence::CloudSnapshot snapshot;
    {
        std::lock_guard<std::mutex> lock(services_mutex_);
        for (const auto& runtime : services_) {
            if (runtime->name == requesting_service && !own_state.is_null()) {
                snapshot.sections[runtime->name] = own_state;
                continue;
            }
            std::lock_guard<std::mutex> state_lock(runtime->state_mutex);
            if (!runtime->cached_state.is_null()) {
                snapshot.sections[runtime->name] = runtime->cached_state;
            }
        }
    }
    if (snapshot.sections.empty()) return Status::success();

    std::lock_guard<std::mutex> lock(persist_mutex_);
    snapshot.sequence = snapshot_sequence_.fetch_add(1) + 1;
    return persistence_->persist(snapshot);
}

const persistence::CloudSnapshot* Container::restored_snapshot() const {
    return restored_ ? &*restored_ : nullptr;
}

}  // namespace deskgrid
