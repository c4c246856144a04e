// Shared helpers for the in-process cloud tests: temp directories, polling,
// and a small cloud builder (one master + N workers, real TCP on localhost).
#pragma once

#include "deskgrid/appmodel.hpp"
#include "deskgrid/container.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace harness {

using nlohmann::json;

inline bool wait_until(const std::function<bool()>& predicate, int timeout_ms, int poll_ms = 20) {
    deskgrid::TimestampMs deadline = deskgrid::now_ms() + timeout_ms;
    while (deskgrid::now_ms() < deadline) {
        if (predicate()) return true;
        deskgrid::sleep_ms(poll_ms);
    }
    return predicate();
}

/// Self-deleting temp directory.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = (std::filesystem::temp_directory_path() /
                 ("deskgrid-test-" + tag + "-" + deskgrid::new_uuid().substr(0, 8)))
                    .string();
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

struct CloudOptions {
    int workers = 2;
    int heartbeat_ms = 200;
    int worker_slots = 2;
    int license_max_nodes = 0;
    std::string security = "anonymous";
    std::string persistence = "volatile";
    std::string store_dir;
    std::string credential_file;
    std::string storage_root;         // master storage service root (empty = temp)
    bool master_executor = false;     // also run executor+allocation on the master
    bool with_http = false;
    int scheduler_tick_ms = 50;
    int reservation_tick_ms = 100;
    json scheduler_options = json::object();
};

/// One master (directory, reservation, storage, scheduler, accounting[,http])
/// plus N workers (allocation, executor), all in-process over localhost TCP.
class TestCloud {
public:
    explicit TestCloud(CloudOptions options = {}) : options_(std::move(options)) {
        deskgrid::register_builtins();

        deskgrid::ContainerConfig master;
        master.node_id = "master";
        master.listen_endpoint = "127.0.0.1:0";
        json sched_options = options_.scheduler_options;
        if (!sched_options.contains("tick_period_ms")) sched_options["tick_period_ms"] = options_.scheduler_tick_ms;
        json storage_options = json::object();
        if (!options_.storage_root.empty()) storage_options["root"] = options_.storage_root;
        master.services = {{"directory", {}},
                           {"reservation", json{{"tick_period_ms", options_.reservation_tick_ms}}},
                           {"storage", storage_options},
                           {"scheduler", sched_options},
                           {"accounting", {}}};
        if (options_.master_executor) {
            master.services.push_back({"allocation", {}});
            master.services.push_back({"executor", json{{"slots", options_.worker_slots}}});
        }
        if (options_.with_http) master.services.push_back({"http", {}});
        master.security_provider = options_.security;
        master.persistence_provider = options_.persistence;
        master.heartbeat_interval_ms = options_.heartbeat_ms;
        master.license_max_nodes = options_.license_max_nodes;
        if (!options_.store_dir.empty()) master.options["store_dir"] = options_.store_dir;
        if (!options_.credential_file.empty()) master.options["credential_file"] = options_.credential_file;
        master_config_ = master;

        master_ = std::make_unique<deskgrid::Container>(master);
        auto st = master_->start();
        if (!st) throw std::runtime_error("master failed to start: " + st.error().to_string());

        for (int i = 0; i < options_.workers; ++i) add_worker();
    }

    ~TestCloud() {
        for (auto& worker : workers_) {
            if (worker) worker->stop();
        }
        if (master_) master_->stop();
    }

    deskgrid::Container& master() { return *master_; }
    const deskgrid::ContainerConfig& master_config() const { return master_config_; }
    deskgrid::Endpoint master_endpoint() const { return master_->endpoint(); }

    deskgrid::Container& worker(std::size_t index) { return *workers_.at(index); }
    std::size_t worker_count() const { return workers_.size(); }

    deskgrid::Container* add_worker(json executor_options = json::object(), json extra = json::object()) {
        deskgrid::ContainerConfig config;
        config.node_id = "w" + std::to_string(next_worker_++);
        config.listen_endpoint = "127.0.0.1:0";
        if (!executor_options.contains("slots")) executor_options["slots"] = options_.worker_slots;
        config.services = {{"allocation", {}}, {"executor", executor_options}};
        config.seed_peers = {master_->endpoint().to_string()};
        config.security_provider = options_.security;
        config.heartbeat_interval_ms = options_.heartbeat_ms;
        if (!options_.credential_file.empty()) config.options["credential_file"] = options_.credential_file;
        for (auto& [key, value] : extra.items()) config.options[key] = value;
        auto worker = std::make_unique<deskgrid::Container>(config);
        auto st = worker->start();
        if (!st) throw std::runtime_error("worker failed to start: " + st.error().to_string());
        workers_.push_back(std::move(worker));
        return workers_.back().get();
    }

    /// Restarts the master on the same endpoint (crash-recovery tests kill it
    /// first with master().kill()).
    void restart_master() {
        deskgrid::ContainerConfig config = master_config_;
        config.listen_endpoint = master_->endpoint().to_string();
        master_ = std::make_unique<deskgrid::Container>(config);
        auto st = master_->start();
        if (!st) throw std::runtime_error("master failed to restart: " + st.error().to_string());
    }

    /// Membership records as the catalogue reports them.
    std::vector<json> records(const std::string& service = "") {
        auto reply = master_->call_local("directory", "dir.query",
                                         deskgrid::to_bytes(json{{"service", service}}.dump()), 2000);
        std::vector<json> out;
        if (!reply) return out;
        json doc = json::parse(deskgrid::to_string(reply.value()), nullptr, false);
        if (doc.is_discarded()) return out;
        for (const auto& record : doc.value("records", json::array())) out.push_back(record);
        return out;
    }

    int alive_count() {
        int count = 0;
        for (const auto& record : records()) {
            if (record.value("state", "") == "alive") ++count;
        }
        return count;
    }

    std::unique_ptr<deskgrid::app::Client> client(const std::string& user = "", const std::string& token = "") {
        auto c = std::make_unique<deskgrid::app::Client>(master_->endpoint(),
                                                         deskgrid::security::Credentials{user, token});
        auto st = c->connect();
        if (!st) throw std::runtime_error("client failed to connect: " + st.error().to_string());
        return c;
    }

private:
    CloudOptions options_;
    deskgrid::ContainerConfig master_config_;
    std::unique_ptr<deskgrid::Container> master_;
    std::vector<std::unique_ptr<deskgrid::Container>> workers_;
    int next_worker_ = 1;
};

inline std::mt19937_64 seeded_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline deskgrid::Bytes random_bytes(std::mt19937_64& rng, std::size_t size) {
    deskgrid::Bytes out(size);
    for (auto& b : out) b = static_cast<std::uint8_t>(rng() & 0xff);
    return out;
}

}  // namespace harness
