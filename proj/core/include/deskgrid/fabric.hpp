#pragma once

#include "deskgrid/common.hpp"

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace deskgrid::fabric {

/// Hardware facts that do not change while the process runs. Fields the
/// platform cannot report carry sentinel 0 rather than failing the probe.
struct StaticProfile {
    int cpu_count = 1;
    int cpu_frequency_mhz = 0;  // 0 = unknown
    std::int64_t total_memory_mb = 1;
    std::int64_t total_storage_mb = 0;  // 0 = unknown
    std::string os_name;

    bool operator==(const StaticProfile&) const = default;
};

struct DynamicStats {
    double cpu_usage_percent = 0.0;  // [0,100]
    std::int64_t available_memory_mb = 0;
    std::int64_t available_storage_mb = 0;
    TimestampMs sampled_at = 0;
};

/// Host profiler. probe_static() is computed once per process; sample_dynamic()
/// produces fresh samples with nondecreasing sampled_at. CPU usage is averaged
/// over a rolling window of at least 500 ms between /proc snapshots.
class Pal {
public:
    Pal();

    const StaticProfile& probe_static() const { return static_profile_; }
    DynamicStats sample_dynamic();

    /// Thread-safe; probe/sample may be called from any thread.
    static const StaticProfile& process_static_profile();

private:
    struct CpuTimes {
        std::uint64_t busy = 0;
        std::uint64_t total = 0;
    };
    static CpuTimes read_cpu_times();

    StaticProfile static_profile_;
    std::mutex mutex_;
    CpuTimes window_base_;
    TimestampMs window_base_at_ = 0;
    double last_usage_ = 0.0;
    TimestampMs last_sampled_at_ = 0;
};

struct ProvisionRequest {
    int count = 1;
    std::vector<std::string> required_services;
    std::int64_t ttl_seconds = 0;  // 0 = unbounded
};

/// Contract for bringing new nodes into the cloud. Exactly one provider is
/// active per container; provision calls are serialized per provider.
class Provider {
public:
    virtual ~Provider() = default;
    virtual std::string name() const = 0;
    /// Spawns `request.count` containers configured with the requested
    /// services. Returns their endpoints once each is listening.
    virtual Result<std::vector<Endpoint>> provision(const ProvisionRequest& request) = 0;
};

/// Desk-scale provider: spawns containers through a caller-supplied factory
/// (in-process containers in tests, or the node binary via the spawn tool).
/// Enforces a configured capacity.
class CallbackProvider : public Provider {
public:
    using SpawnFn = std::function<Result<Endpoint>(const ProvisionRequest&, int index)>;

    CallbackProvider(std::string name, int max_nodes, SpawnFn spawn)
        : name_(std::move(name)), max_nodes_(max_nodes), spawn_(std::move(spawn)) {}

    std::string name() const override { return name_; }
    Result<std::vector<Endpoint>> provision(const ProvisionRequest& request) override;

    int provisioned_count() const { return provisioned_; }

private:
    std::string name_;
    int max_nodes_;
    SpawnFn spawn_;
    int provisioned_ = 0;
    std::mutex mutex_;
};

}  // namespace deskgrid::fabric
