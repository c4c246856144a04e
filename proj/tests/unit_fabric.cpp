#include "deskgrid/fabric.hpp"

#include <doctest.h>

#include <cstdio>
#include <string>

using namespace deskgrid;
using namespace deskgrid::fabric;

namespace {
// Independent oracle: ask the OS tooling rather than our own code.
int nproc_oracle() {
    FILE* pipe = ::popen("nproc", "r");
    if (!pipe) return -1;
    char buf[32] = {0};
    if (!::fgets(buf, sizeof(buf), pipe)) {
        ::pclose(pipe);
        return -1;
    }
    ::pclose(pipe);
    return std::atoi(buf);
}
}  // namespace

TEST_CASE("static profile matches the OS cpu count") {
    Pal pal;
    int oracle = nproc_oracle();
    if (oracle > 0) CHECK(pal.probe_static().cpu_count == oracle);
    CHECK(pal.probe_static().cpu_count >= 1);
    CHECK(pal.probe_static().total_memory_mb >= 1);
    CHECK_FALSE(pal.probe_static().os_name.empty());
}

TEST_CASE("static probe is idempotent within the process") {
    Pal a, b;
    CHECK(a.probe_static() == b.probe_static());
    CHECK(a.probe_static() == a.probe_static());
}

TEST_CASE("dynamic samples stay within bounds and advance") {
    Pal pal;
    DynamicStats first = pal.sample_dynamic();
    CHECK(first.cpu_usage_percent >= 0.0);
    CHECK(first.cpu_usage_percent <= 100.0);
    CHECK(first.available_memory_mb >= 0);
    CHECK(first.available_memory_mb <= pal.probe_static().total_memory_mb);

    deskgrid::sleep_ms(5);
    DynamicStats second = pal.sample_dynamic();
    CHECK(second.sampled_at >= first.sampled_at);
}

TEST_CASE("callback provider enforces capacity and request validity") {
    int spawned = 0;
    CallbackProvider provider("test", 2, [&](const ProvisionRequest&, int) -> Result<Endpoint> {
        ++spawned;
        return Endpoint{"127.0.0.1", static_cast<std::uint16_t>(9000 + spawned)};
    });

    ProvisionRequest request;
    request.count = 0;
    CHECK_FALSE(provider.provision(request).ok());

    request.count = 2;
    auto endpoints = provider.provision(request);
    REQUIRE(endpoints.ok());
    CHECK(endpoints.value().size() == 2);

    request.count = 1;
    auto full = provider.provision(request);
    REQUIRE_FALSE(full.ok());
    CHECK(full.error().code == errc::capacity_exceeded);
}

TEST_CASE("provider with zero capacity rejects immediately") {
    CallbackProvider provider("empty", 0,
                              [](const ProvisionRequest&, int) -> Result<Endpoint> {
                                  return Endpoint{"127.0.0.1", 1};
                              });
    ProvisionRequest request;
    request.count = 1;
    auto outcome = provider.provision(request);
    REQUIRE_FALSE(outcome.ok());
    CHECK(outcome.error().code == errc::capacity_exceeded);
}
