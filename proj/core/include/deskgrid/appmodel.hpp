#pragma once

#include "deskgrid/common.hpp"
#include "deskgrid/execution.hpp"
#include "deskgrid/security.hpp"
#include "deskgrid/storage.hpp"
#include "deskgrid/transport.hpp"

#include <nlohmann/json.hpp>

#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

namespace deskgrid::app {

using EventCallback = std::function<void(const exec::UnitEvent&)>;

class Application;

/// Client-side connection to the master. A degenerate container: it speaks
/// the same envelope protocol and owns a listener for event pushes, but hosts
/// no services and never joins the membership catalogue.
class Client {
public:
    Client(Endpoint master, security::Credentials credentials);
    ~Client();

    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    Status connect();
    void close();

    const Endpoint& master() const { return master_; }
    const security::Credentials& credentials() const { return credentials_; }
    Endpoint self_endpoint() const { return transport_ ? transport_->endpoint() : Endpoint{}; }

    /// Raw envelope call to a master service; body gains a credentials field.
    Result<nlohmann::json> call(const std::string& service, const std::string& kind, nlohmann::json body,
                                int timeout_ms = 10000);

    Result<Application> create_application(const std::string& model, const std::string& display_name,
                                           const std::string& reservation_id = "");

    /// The master's storage channel (for staging application files).
    Result<store::DataChannelSpec> storage_channel();

    void route_events(const std::string& app_id, EventCallback callback);
    void unroute_events(const std::string& app_id);
    /// Feeds one event into the dedup + delivery pipeline (push handler and
    /// snapshot replay both land here).
    void deliver(const exec::UnitEvent& event);

private:
    void delivery_loop();

    Endpoint master_;
    security::Credentials credentials_;
    std::string client_node_id_;
    std::unique_ptr<MessageTransport> transport_;

    std::mutex routes_mutex_;
    std::map<std::string, EventCallback> routes_;
    std::map<std::string, std::map<std::string, std::int64_t>> seen_seq_;  // app → unit → last seq

    std::mutex queue_mutex_;
    std::condition_variable queue_cv_;
    std::deque<exec::UnitEvent> queue_;
    std::thread delivery_thread_;
    bool closing_ = false;
};

struct PendingUnit {
    std::string unit_id;
    std::string operation;
    Bytes parameters;
    store::StagingPlan staging;
    int max_attempts = 3;
};

/// One distributed application: the unit of deployment. Work units map 1:1
/// to jobs; configuration and credentials apply application-wide.
class Application {
public:
    Application(Client& client, std::string app_id, std::string model);

    const std::string& app_id() const { return app_id_; }
    const std::string& model() const { return model_; }

    /// Buffers a unit locally; submit() flushes. Dynamic submission after an
    /// earlier flush is allowed until the application is stopped.
    Result<std::string> add_unit(const std::string& operation, Bytes parameters,
                                 store::StagingPlan staging = {}, int max_attempts = 3);
    Status submit();

    /// Blocks until every submitted unit is terminal, or the timeout elapses
    /// (timeout_ms < 0 waits forever). Returns unit_id → descriptor.
    Result<std::map<std::string, exec::JobDescriptor>> wait(int timeout_ms);

    /// Aborts outstanding units and stops the application.
    Status stop();

    Result<std::vector<exec::JobDescriptor>> query() const;
    Result<exec::JobDescriptor> unit(const std::string& unit_id) const;

    /// Subscribes to per-unit lifecycle events (queued, running, terminal).
    /// Late subscribers get a terminal snapshot replay first. Callbacks run
    /// on the client's delivery thread and must not block it.
    Status on_event(EventCallback callback);

    bool stopped() const { return stopped_; }
    Client& client() { return client_; }

private:
    Client& client_;
    std::string app_id_;
    std::string model_;
    std::vector<PendingUnit> pending_;
    std::vector<std::string> submitted_units_;
    bool stopped_ = false;
};

}  // namespace deskgrid::app
