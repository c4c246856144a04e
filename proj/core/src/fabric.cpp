#include "deskgrid/fabric.hpp"

#include <sys/statvfs.h>
#include <sys/sysinfo.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace deskgrid::fabric {

namespace {

StaticProfile probe_host() {
    StaticProfile p;

    long cpus = ::sysconf(_SC_NPROCESSORS_ONLN);
    p.cpu_count = cpus >= 1 ? static_cast<int>(cpus) : 1;

    // Best effort: first "cpu MHz" line. Missing on many VMs; sentinel 0.
    std::ifstream cpuinfo("/proc/cpuinfo");
    std::string line;
    while (std::getline(cpuinfo, line)) {
        if (line.rfind("cpu MHz", 0) == 0) {
            auto colon = line.find(':');
            if (colon != std::string::npos) {
                try {
                    p.cpu_frequency_mhz = static_cast<int>(std::stod(line.substr(colon + 1)));
                } catch (...) {
                    p.cpu_frequency_mhz = 0;
                }
            }
            break;
        }
    }

    long pages = ::sysconf(_SC_PHYS_PAGES);
    long page_size = ::sysconf(_SC_PAGESIZE);
    if (pages > 0 && page_size > 0) {
        p.total_memory_mb = (static_cast<std::int64_t>(pages) * page_size) / (1024 * 1024);
    }
    if (p.total_memory_mb < 1) p.total_memory_mb = 1;

    struct statvfs fs{};
    if (::statvfs("/", &fs) == 0) {
        p.total_storage_mb =
            static_cast<std::int64_t>(fs.f_blocks) * static_cast<std::int64_t>(fs.f_frsize) / (1024 * 1024);
    }

    struct utsname un{};
    if (::uname(&un) == 0) {
        p.os_name = std::string(un.sysname) + " " + un.release;
    } else {
        p.os_name = "unknown";
    }
    return p;
}

std::int64_t read_meminfo_available_mb() {
    std::ifstream meminfo("/proc/meminfo");
    std::string key;
    std::int64_t kb = 0;
    std::string unit;
    while (meminfo >> key >> kb >> unit) {
        if (key == "MemAvailable:") return kb / 1024;
    }
    return 0;
}

}  // namespace

Pal::Pal() : static_profile_(process_static_profile()) {
    window_base_ = read_cpu_times();
    window_base_at_ = now_ms();
}

const StaticProfile& Pal::process_static_profile() {
    static StaticProfile profile = probe_host();
    return profile;
}

Pal::CpuTimes Pal::read_cpu_times() {
    std::ifstream stat("/proc/stat");
    std::string cpu;
    std::uint64_t user = 0, nice = 0, system = 0, idle = 0, iowait = 0, irq = 0, softirq = 0, steal = 0;
    stat >> cpu >> user >> nice >> system >> idle >> iowait >> irq >> softirq >> steal;
    CpuTimes t;
    if (cpu == "cpu") {
        t.total = user + nice + system + idle + iowait + irq + softirq + steal;
        t.busy = t.total - idle - iowait;
    }
    return t;
}

DynamicStats Pal::sample_dynamic() {
    std::lock_guard<std::mutex> lock(mutex_);
    DynamicStats s;

    TimestampMs now = now_ms();
    CpuTimes current = read_cpu_times();
    // Keep at least a 500 ms window between the snapshots the usage figure is
    // derived from; more frequent callers get the last window's average.
    if (now - window_base_at_ >= 500 && current.total > window_base_.total) {
        std::uint64_t busy_delta = current.busy - window_base_.busy;
        std::uint64_t total_delta = current.total - window_base_.total;
        last_usage_ = total_delta == 0 ? 0.0 : 100.0 * static_cast<double>(busy_delta) / total_delta;
        window_base_ = current;
        window_base_at_ = now;
    }
    s.cpu_usage_percent = std::clamp(last_usage_, 0.0, 100.0);

    s.available_memory_mb = std::min<std::int64_t>(read_meminfo_available_mb(), static_profile_.total_memory_mb);
    struct statvfs fs{};
    if (::statvfs("/", &fs) == 0) {
        s.available_storage_mb =
            static_cast<std::int64_t>(fs.f_bavail) * static_cast<std::int64_t>(fs.f_frsize) / (1024 * 1024);
    }

    last_sampled_at_ = std::max(last_sampled_at_, now);
    s.sampled_at = last_sampled_at_;
    return s;
}

Result<std::vector<Endpoint>> CallbackProvider::provision(const ProvisionRequest& request) {
    if (request.count < 1) return make_error(errc::invalid_request, "provision count must be >= 1");
    if (!spawn_) return make_error(errc::provider_unavailable, "provider has no spawn mechanism");
    std::lock_guard<std::mutex> lock(mutex_);
    if (max_nodes_ >= 0 && provisioned_ + request.count > max_nodes_) {
        return make_error(errc::capacity_exceeded,
                          "provider " + name_ + " capacity " + std::to_string(max_nodes_) + " reached");
    }
    std::vector<Endpoint> endpoints;
    for (int i = 0; i < request.count; ++i) {
        auto ep = spawn_(request, i);
        if (!ep) return ep.error();
        endpoints.push_back(ep.value());
        ++provisioned_;
    }
    return endpoints;
}

}  // namespace deskgrid::fabric
