#include "deskgrid/persistence.hpp"

#include "deskgrid/wire.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace deskgrid::persistence {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'D', 'G', 'S', 'N', 'A', 'P', '1', '\n'};
constexpr int kKeepSnapshots = 3;

std::string snapshot_filename(std::int64_t sequence) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "snap-%012lld.dgs", static_cast<long long>(sequence));
    return buf;
}

Status fsync_path(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) return make_error(errc::store_unavailable, "open for fsync: " + path);
    ::fsync(fd);
    ::close(fd);
    return Status::success();
}
}  // namespace

Status validate_snapshot(const CloudSnapshot& snapshot) {
    if (snapshot.sequence <= 0) return make_error(errc::store_corrupt, "snapshot sequence must be positive");
    const auto& sections = snapshot.sections;
    if (!sections.is_object()) return make_error(errc::store_corrupt, "snapshot sections must be an object");

    if (sections.contains("scheduler")) {
        const auto& sched = sections["scheduler"];
        std::set<std::string> apps;
        for (const auto& app : sched.value("applications", json::array())) {
            apps.insert(app.value("app_id", ""));
        }
        for (const auto& job : sched.value("jobs", json::array())) {
            if (!apps.count(job.value("app_id", ""))) {
                return make_error(errc::store_corrupt,
                                  "job " + job.value("job_id", "?") + " references missing application");
            }
        }
    }
    if (sections.contains("reservation")) {
        const auto& resv = sections["reservation"];
        std::set<std::string> live;
        for (const auto& r : resv.value("reservations", json::array())) {
            auto state = r.value("state", "");
            if (state == "confirmed" || state == "active") live.insert(r.value("reservation_id", ""));
        }
        for (const auto& [node, windows] : resv.value("allocation", json::object()).items()) {
            for (const auto& w : windows) {
                if (!live.count(w.value("reservation_id", ""))) {
                    return make_error(errc::store_corrupt,
                                      "allocation entry on " + node + " references missing reservation");
                }
            }
        }
    }
    return Status::success();
}

Status VolatileStore::persist(const CloudSnapshot& snapshot) {
    std::lock_guard<std::mutex> lock(mutex_);
    last_ = snapshot;
    return Status::success();
}

Result<std::optional<CloudSnapshot>> VolatileStore::restore() {
    std::lock_guard<std::mutex> lock(mutex_);
    return last_;
}

Status DurableFileStore::persist(const CloudSnapshot& snapshot) {
    std::lock_guard<std::mutex> lock(mutex_);
    std::error_code ec;
    fs::create_directories(directory_, ec);
    if (ec) return make_error(errc::store_unavailable, "cannot create store directory: " + directory_);

    std::string body = snapshot.sections.dump();
    json header = {
        {"version", 1},
        {"sequence", snapshot.sequence},
        {"body_sha256", sha256_hex(body)},
        {"body_bytes", body.size()},
    };
    std::string header_text = header.dump();

    Bytes blob;
    blob.insert(blob.end(), kMagic, kMagic + sizeof(kMagic));
    append_u32_be(blob, static_cast<std::uint32_t>(header_text.size()));
    blob.insert(blob.end(), header_text.begin(), header_text.end());
    blob.insert(blob.end(), body.begin(), body.end());

    std::string final_path = (fs::path(directory_) / snapshot_filename(snapshot.sequence)).string();
    std::string tmp_path = final_path + ".tmp";

    int fd = ::open(tmp_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (fd < 0) return make_error(errc::store_unavailable, "cannot write " + tmp_path);
    std::size_t off = 0;
    while (off < blob.size()) {
        ssize_t n = ::write(fd, blob.data() + off, blob.size() - off);
        if (n < 0) {
            ::close(fd);
            return make_error(errc::store_unavailable, "write failed: " + tmp_path);
        }
        off += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);

    std::error_code rename_ec;
    fs::rename(tmp_path, final_path, rename_ec);
    if (rename_ec) return make_error(errc::store_unavailable, "rename failed: " + final_path);
    (void)fsync_path(directory_);

    // Prune old snapshots, newest kKeepSnapshots stay.
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(directory_)) {
        auto name = entry.path().filename().string();
        if (name.rfind("snap-", 0) == 0 && name.size() > 4 && name.substr(name.size() - 4) == ".dgs") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    while (files.size() > kKeepSnapshots) {
        fs::remove(files.front(), ec);
        files.erase(files.begin());
    }
    return Status::success();
}

Result<std::optional<CloudSnapshot>> DurableFileStore::restore() {
    std::lock_guard<std::mutex> lock(mutex_);
    if (!fs::exists(directory_)) return std::optional<CloudSnapshot>{};

    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(directory_)) {
        auto name = entry.path().filename().string();
        if (name.rfind("snap-", 0) == 0 && name.size() > 4 && name.substr(name.size() - 4) == ".dgs") {
            files.push_back(entry.path().string());
        }
    }
    if (files.empty()) return std::optional<CloudSnapshot>{};
    std::sort(files.rbegin(), files.rend());  // newest first

    bool saw_candidate = false;
    for (const auto& path : files) {
        saw_candidate = true;
        std::ifstream in(path, std::ios::binary);
        if (!in) continue;
        char magic[8];
        if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
            DG_LOG_WARN("persistence", "skipping snapshot with bad magic: " + path);
            continue;
        }
        std::uint8_t len_buf[4];
        if (!in.read(reinterpret_cast<char*>(len_buf), 4)) continue;
        std::uint32_t header_len = read_u32_be(len_buf);
        if (header_len > 1 << 20) continue;
        std::string header_text(header_len, '\0');
        if (!in.read(header_text.data(), header_len)) continue;
        json header = json::parse(header_text, nullptr, false);
        if (header.is_discarded()) continue;

        std::size_t body_bytes = header.value("body_bytes", std::size_t{0});
        std::string body(body_bytes, '\0');
        if (!in.read(body.data(), static_cast<std::streamsize>(body_bytes))) {
            DG_LOG_WARN("persistence", "skipping truncated snapshot: " + path);
            continue;
        }
        if (sha256_hex(body) != header.value("body_sha256", "")) {
            DG_LOG_WARN("persistence", "skipping snapshot with checksum mismatch: " + path);
            continue;
        }
        CloudSnapshot snapshot;
        snapshot.sequence = header.value("sequence", std::int64_t{0});
        snapshot.sections = json::parse(body, nullptr, false);
        if (snapshot.sections.is_discarded()) continue;
        if (auto st = validate_snapshot(snapshot); !st) {
            DG_LOG_WARN("persistence", "skipping invalid snapshot " + path + ": " + st.error().to_string());
            continue;
        }
        return std::optional<CloudSnapshot>{std::move(snapshot)};
    }
    if (saw_candidate) {
        return make_error(errc::store_corrupt, "all snapshots in " + directory_ + " failed verification");
    }
    return std::optional<CloudSnapshot>{};
}

Result<std::unique_ptr<PersistenceProvider>> make_persistence_provider(const std::string& name,
                                                                       const std::string& store_dir) {
    if (name == "volatile" || name.empty()) return std::unique_ptr<PersistenceProvider>(new VolatileStore());
    if (name == "durable") {
        if (store_dir.empty()) {
            return make_error(errc::invalid_request, "durable persistence requires options.store_dir");
        }
        return std::unique_ptr<PersistenceProvider>(new DurableFileStore(store_dir));
    }
    return make_error(errc::invalid_request, "unknown persistence provider: " + name);
}

}  // namespace deskgrid::persistence
