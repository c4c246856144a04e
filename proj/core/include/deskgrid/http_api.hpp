#pragma once

#include "deskgrid/container.hpp"

#include <memory>
#include <thread>

namespace deskgrid::ctl {

/// Thin HTTP adapter over the envelope operations, hosted on the master.
/// Routes: POST /applications, POST /applications/{id}/jobs,
/// GET /applications/{id}, POST /reservations, GET /nodes, GET /stats.
/// Mutating verbs need `Authorization: Bearer <user_id>:<token>`; the
/// underlying services perform the actual checks. GETs are side-effect-free.
class HttpApiService : public Service {
public:
    HttpApiService();
    ~HttpApiService() override;

    void start(ServiceContext& ctx) override;
    void stop() override;
    Result<Bytes> handle(const Envelope& request) override;

    int port() const { return port_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    ServiceContext* ctx_ = nullptr;
    int port_ = 0;
    std::thread server_thread_;
};

}  // namespace deskgrid::ctl
