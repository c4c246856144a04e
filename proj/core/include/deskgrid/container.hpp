#pragma once

#include "deskgrid/common.hpp"
#include "deskgrid/config.hpp"
#include "deskgrid/fabric.hpp"
#include "deskgrid/persistence.hpp"
#include "deskgrid/security.hpp"
#include "deskgrid/transport.hpp"
#include "deskgrid/wire.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace deskgrid {

enum class ServiceState { Loaded, Started, Stopped, Failed };
const char* service_state_name(ServiceState state);

struct ServiceRegistration {
    std::string name;
    ServiceState state = ServiceState::Loaded;
};

class Container;
class Service;

/// The container-facing surface handed to each hosted service. All messaging
/// runs through here; services never share state directly.
class ServiceContext {
public:
    ServiceContext(Container& owner, std::string service_name, nlohmann::json options);

    const std::string& node_id() const;
    const Endpoint& self_endpoint() const;
    const ContainerConfig& config() const;
    const std::string& service_name() const { return service_name_; }
    const nlohmann::json& options() const { return options_; }
    std::int64_t opt_int(const std::string& key, std::int64_t fallback) const;
    std::string opt_str(const std::string& key, const std::string& fallback) const;

    Result<Bytes> call(const Endpoint& peer, const std::string& service, const std::string& kind,
                       Bytes payload, int timeout_ms = -1);
    Status post(const Endpoint& peer, const std::string& service, const std::string& kind, Bytes payload);
    Result<Bytes> call_local(const std::string& service, const std::string& kind, Bytes payload,
                             int timeout_ms = -1);
    Status post_local(const std::string& service, const std::string& kind, Bytes payload);

    /// Delivers `kind` with empty payload to this service's own mailbox every
    /// period_ms, starting one period from now.
    void schedule_periodic(const std::string& kind, int period_ms);

    fabric::Pal& pal();
    security::SecurityProvider& security();
    Container& container() { return owner_; }

    /// Persist a cloud snapshot now. The calling service supplies its own
    /// state; the container gathers the other services' sections.
    Status persist_with_own_state(nlohmann::json own_state);

private:
    Container& owner_;
    std::string service_name_;
    nlohmann::json options_;
};

/// A named, manifest-selectable unit of functionality. Messages are delivered
/// one at a time in arrival order, so implementations need no locking for
/// their own state.
class Service {
public:
    virtual ~Service() = default;

    /// Called in manifest order before any message is delivered. May throw to
    /// abort container startup. The context outlives the service.
    virtual void start(ServiceContext& ctx) { (void)ctx; }
    /// Called in reverse manifest order after the mailbox has drained.
    virtual void stop() {}

    virtual Result<Bytes> handle(const Envelope& request) = 0;

    /// State capture for the persistence layer; null means stateless.
    virtual nlohmann::json snapshot_state() { return nullptr; }
    virtual void restore_state(const nlohmann::json& state) { (void)state; }

    /// Extra drain condition beyond an empty mailbox (e.g. running jobs).
    virtual bool drained() { return true; }
};

using ServiceFactory = std::function<std::unique_ptr<Service>()>;

/// Process-wide map from manifest names to service implementations. Built-ins
/// are registered by register_builtins(); embedders may add their own before
/// starting containers.
class ServiceCatalog {
public:
    static ServiceCatalog& instance();
    void add(const std::string& name, ServiceFactory factory);
    bool contains(const std::string& name) const;
    Result<std::unique_ptr<Service>> create(const std::string& name) const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, ServiceFactory> factories_;
};

/// Registers built-in services, data channels, and executor operations.
/// Idempotent; called automatically by Container::start.
void register_builtins();

/// The deployment unit: hosts the manifest's services, routes envelopes
/// between local and remote services, probes the host at startup, joins the
/// cloud through its seed peers, and heartbeats its service list.
class Container {
public:
    explicit Container(ContainerConfig config);
    ~Container();

    Container(const Container&) = delete;
    Container& operator=(const Container&) = delete;

    Status start();
    /// Graceful: leaves the directory, drains services, stops in reverse
    /// manifest order.
    void stop();
    /// Abrupt: drops the transport and abandons in-flight work. Failure
    /// injection for tests; the rest of the cloud sees a crashed node.
    void kill();
    /// Requests a stop without blocking (self-decommission, ctl.stop verb).
    void request_stop_async();

    bool running() const { return phase_.load() == Phase::Running; }
    const std::string& node_id() const { return config_.node_id; }
    Endpoint endpoint() const { return transport_ ? transport_->endpoint() : Endpoint{}; }
    const ContainerConfig& config() const { return config_; }

    std::vector<ServiceRegistration> registrations() const;
    std::vector<std::string> started_service_names() const;
    Result<ServiceRegistration> install_service(const std::string& name, nlohmann::json options);
    Status uninstall_service(const std::string& name);

    Result<Bytes> call(const Endpoint& peer, const std::string& service, const std::string& kind,
                       Bytes payload, int timeout_ms = -1);
    Status post(const Endpoint& peer, const std::string& service, const std::string& kind, Bytes payload);
    Result<Bytes> call_local(const std::string& service, const std::string& kind, Bytes payload,
                             int timeout_ms = -1);
    Status post_local(const std::string& service, const std::string& kind, Bytes payload);

    /// Routes by target_node: loopback for self, otherwise over the wire via
    /// the peer table. The caller must have set message_id/source fields
    /// (make_request does).
    Result<Bytes> dispatch(const Envelope& envelope, int timeout_ms = -1);

    fabric::Pal& pal() { return pal_; }
    security::SecurityProvider& security() { return *security_; }
    persistence::PersistenceProvider& persistence() { return *persistence_; }

    void set_provider(std::shared_ptr<fabric::Provider> provider);
    std::shared_ptr<fabric::Provider> provider() const;

    /// The catalogue node's endpoint: self when hosting "directory", else
    /// learned via discovery.
    std::optional<Endpoint> directory_endpoint() const;
    bool joined() const { return joined_.load(); }
    /// Re-runs seed discovery (used at join and by periodic rediscovery).
    Result<Endpoint> discover_directory();

    void note_peer(const std::string& node_id, const Endpoint& endpoint);
    std::optional<Endpoint> peer_endpoint(const std::string& node_id) const;

    Status persist_now(const std::string& requesting_service, nlohmann::json own_state);
    /// The snapshot restored at startup, if any (valid during service start).
    const persistence::CloudSnapshot* restored_snapshot() const;
    std::int64_t snapshot_sequence() const { return snapshot_sequence_.load(); }

    Service* find_service(const std::string& name);
    void schedule_periodic(const std::string& service, const std::string& kind, int period_ms);

    /// Blocks until stop()/kill() is called (node binary main loop).
    void wait_until_stopped();

private:
    enum class Phase { Fresh, Running, Stopped };

    struct WorkItem {
        Envelope envelope;
        ReplySink sink;  // null for posts and timer ticks
    };

    struct ServiceRuntime {
        std::string name;
        std::unique_ptr<Service> service;
        std::unique_ptr<ServiceContext> context;
        ServiceState state = ServiceState::Loaded;

        std::mutex mutex;
        std::condition_variable cv;
        std::deque<WorkItem> mailbox;
        bool closing = false;
        bool idle = true;
        std::thread worker;

        // Latest snapshot_state(), refreshed by the worker after each message
        // so snapshots never have to wait on a busy mailbox.
        std::mutex state_mutex;
        nlohmann::json cached_state;
    };

    struct TimerEntry {
        std::string service;
        std::string kind;
        int period_ms;
        TimestampMs next_due;
    };

    Status start_services();
    void internal_stop(bool graceful);
    void stopper_loop();
    void worker_loop(ServiceRuntime* runtime);
    void enqueue(ServiceRuntime* runtime, WorkItem item);
    bool drain_runtime(ServiceRuntime* runtime, int timeout_ms);
    ServiceRuntime* find_runtime(const std::string& name);

    void on_inbound(Envelope&& envelope, ReplySink sink);
    void timer_loop();
    void heartbeat_loop();
    void sleep_interval(int interval_ms);
    Status register_with_directory();
    void leave_directory();

    ContainerConfig config_;
    fabric::Pal pal_;
    std::unique_ptr<security::SecurityProvider> security_;
    std::unique_ptr<persistence::PersistenceProvider> persistence_;
    std::unique_ptr<MessageTransport> transport_;
    std::optional<persistence::CloudSnapshot> restored_;
    std::atomic<std::int64_t> snapshot_sequence_{0};
    std::mutex persist_mutex_;

    mutable std::mutex services_mutex_;
    std::vector<std::shared_ptr<ServiceRuntime>> services_;  // manifest order
    std::atomic<bool> gate_open_{false};

    std::shared_ptr<ServiceRuntime> control_;  // "_container" verbs

    std::mutex timer_mutex_;
    std::condition_variable timer_cv_;
    std::vector<TimerEntry> timers_;
    std::thread timer_thread_;

    std::thread heartbeat_thread_;
    std::thread stopper_thread_;
    std::mutex lifecycle_mutex_;
    std::condition_variable lifecycle_cv_;
    std::atomic<bool> stop_requested_{false};
    std::mutex stop_once_mutex_;
    bool stop_ran_ = false;
    std::atomic<bool> kill_requested_{false};

    std::atomic<Phase> phase_{Phase::Fresh};
    std::atomic<bool> shutting_down_{false};
    std::atomic<bool> joined_{false};
    std::atomic<std::int64_t> heartbeat_sequence_{0};
    mutable std::mutex master_mutex_;
    std::optional<Endpoint> master_endpoint_;

    mutable std::mutex peers_mutex_;
    std::map<std::string, Endpoint> peers_;

    mutable std::mutex provider_mutex_;
    std::shared_ptr<fabric::Provider> provider_;
};

}  // namespace deskgrid
