#pragma once

#include "deskgrid/common.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace deskgrid::persistence {

/// Point-in-time record of the cloud's state, assembled from the master's
/// stateful services. Each section is one service's own serialized state,
/// keyed by service name ("scheduler", "reservation", "directory", "storage",
/// "accounting").
struct CloudSnapshot {
    std::int64_t sequence = 0;
    nlohmann::json sections = nlohmann::json::object();
};

/// Cross-reference validation: every job's application must exist and every
/// allocation entry's reservation must exist and still be live. Snapshots that
/// fail validation are treated like corrupt ones on restore.
Status validate_snapshot(const CloudSnapshot& snapshot);

class PersistenceProvider {
public:
    virtual ~PersistenceProvider() = default;
    virtual std::string name() const = 0;
    virtual Status persist(const CloudSnapshot& snapshot) = 0;
    /// nullopt = empty store (fresh start).
    virtual Result<std::optional<CloudSnapshot>> restore() = 0;
};

/// Fast but not reliable: snapshots live in process memory only, so a restart
/// always restores Empty.
class VolatileStore : public PersistenceProvider {
public:
    std::string name() const override { return "volatile"; }
    Status persist(const CloudSnapshot& snapshot) override;
    Result<std::optional<CloudSnapshot>> restore() override;

private:
    std::mutex mutex_;
    std::optional<CloudSnapshot> last_;
};

/// Checksummed snapshot files under a directory: write-new, fsync, atomic
/// rename, keep the last three. Restore returns the highest-sequence intact
/// snapshot; torn or corrupt files are detected by checksum and skipped.
class DurableFileStore : public PersistenceProvider {
public:
    explicit DurableFileStore(std::string directory) : directory_(std::move(directory)) {}

    std::string name() const override { return "durable"; }
    Status persist(const CloudSnapshot& snapshot) override;
    Result<std::optional<CloudSnapshot>> restore() override;

    const std::string& directory() const { return directory_; }

private:
    std::string directory_;
    std::mutex mutex_;
};

Result<std::unique_ptr<PersistenceProvider>> make_persistence_provider(const std::string& name,
                                                                       const std::string& store_dir);

}  // namespace deskgrid::persistence
