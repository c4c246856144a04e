#pragma once

#include "deskgrid/container.hpp"
#include "deskgrid/fabric.hpp"

namespace deskgrid::fabric {

/// Service front of the active provider. Kinds: prov.request (admin),
/// prov.status. One provision runs at a time — the mailbox serializes.
class ProvisioningService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;

private:
    ServiceContext* ctx_ = nullptr;
};

/// Provider that launches the node binary with a generated config file.
/// Options: binary path, seed endpoint, base service set. Children are
/// reaped on destruction.
class LocalSpawnProvider : public Provider {
public:
    struct Options {
        std::string binary;                  // path to the node executable
        std::string seed;                    // endpoint of the running cloud
        std::string config_dir;              // where generated configs land
        int max_nodes = 8;
        std::vector<std::string> base_services = {"executor", "allocation"};
    };

    explicit LocalSpawnProvider(Options options);
    ~LocalSpawnProvider() override;

    std::string name() const override { return "local-spawn"; }
    Result<std::vector<Endpoint>> provision(const ProvisionRequest& request) override;

private:
    Options options_;
    std::mutex mutex_;
    int spawned_ = 0;
    std::vector<int> children_;
};

}  // namespace deskgrid::fabric
