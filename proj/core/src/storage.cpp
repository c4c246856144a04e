#include "deskgrid/storage.hpp"

#include <filesystem>
#include <fstream>

namespace deskgrid::store {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Specs, descriptors, plans
// ---------------------------------------------------------------------------

std::string DataChannelSpec::to_uri() const {
    return scheme + "://" + endpoint + (root.empty() || root.front() == '/' ? root : "/" + root);
}

Result<DataChannelSpec> DataChannelSpec::parse_uri(const std::string& uri) {
    auto sep = uri.find("://");
    if (sep == std::string::npos || sep == 0) {
        return make_error(errc::invalid_request, "malformed channel uri: " + uri);
    }
    DataChannelSpec spec;
    spec.scheme = uri.substr(0, sep);
    std::string rest = uri.substr(sep + 3);
    if (rest.empty()) return spec;
    if (rest.front() == '/') {
        // No endpoint: the remainder is a local root path.
        spec.root = rest;
    } else {
        auto slash = rest.find('/');
        spec.endpoint = rest.substr(0, slash);
        if (slash != std::string::npos) spec.root = rest.substr(slash + 1);
    }
    return spec;
}

json DataChannelSpec::to_json() const {
    return json{{"scheme", scheme}, {"endpoint", endpoint}, {"credentials", credentials}, {"root", root}};
}

DataChannelSpec DataChannelSpec::from_json(const json& doc) {
    DataChannelSpec spec;
    spec.scheme = doc.value("scheme", "");
    spec.endpoint = doc.value("endpoint", "");
    spec.credentials = doc.value("credentials", "");
    spec.root = doc.value("root", "");
    return spec;
}

json FileDescriptor::to_json() const {
    return json{{"logical_name", logical_name},
                {"size_bytes", size_bytes},
                {"digest", digest},
                {"channel", channel.to_json()},
                {"direction", direction == Direction::Input ? "input" : "output"}};
}

FileDescriptor FileDescriptor::from_json(const json& doc) {
    FileDescriptor fd;
    fd.logical_name = doc.value("logical_name", "");
    fd.size_bytes = doc.value("size_bytes", std::int64_t{0});
    fd.digest = doc.value("digest", "");
    fd.channel = DataChannelSpec::from_json(doc.value("channel", json::object()));
    fd.direction = doc.value("direction", "input") == "output" ? Direction::Output : Direction::Input;
    return fd;
}

Status StagingPlan::validate() const {
    std::set<std::string> names;
    for (const auto* list : {&inputs, &outputs}) {
        for (const auto& fd : *list) {
            if (auto st = validate_logical_name(fd.logical_name); !st) return st;
            if (!names.insert(fd.logical_name).second) {
                return make_error(errc::invalid_request, "duplicate logical name: " + fd.logical_name);
            }
        }
    }
    return Status::success();
}

json StagingPlan::to_json() const {
    json in = json::array(), out = json::array();
    for (const auto& fd : inputs) in.push_back(fd.to_json());
    for (const auto& fd : outputs) out.push_back(fd.to_json());
    return json{{"inputs", in}, {"outputs", out}};
}

StagingPlan StagingPlan::from_json(const json& doc) {
    StagingPlan plan;
    for (const auto& fd : doc.value("inputs", json::array())) plan.inputs.push_back(FileDescriptor::from_json(fd));
    for (const auto& fd : doc.value("outputs", json::array())) plan.outputs.push_back(FileDescriptor::from_json(fd));
    return plan;
}

Status validate_logical_name(const std::string& name) {
    if (name.empty()) return make_error(errc::invalid_request, "empty logical name");
    if (name.front() == '/') return make_error(errc::invalid_request, "absolute logical name: " + name);
    std::size_t begin = 0;
    while (begin <= name.size()) {
        auto end = name.find('/', begin);
        std::string segment = name.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
        if (segment.empty() || segment == "." || segment == "..") {
            return make_error(errc::invalid_request, "logical name escapes the channel root: " + name);
        }
        if (end == std::string::npos) break;
        begin = end + 1;
    }
    return Status::success();
}

// ---------------------------------------------------------------------------
// ChannelRegistry
// ---------------------------------------------------------------------------

ChannelRegistry& ChannelRegistry::instance() {
    static ChannelRegistry registry;
    return registry;
}

Status ChannelRegistry::register_channel(const std::string& scheme, ClientFactory client_factory,
                                         ServerFactory server_factory) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (entries_.count(scheme)) {
        return make_error(errc::duplicate_scheme, "scheme already registered: " + scheme);
    }
    entries_[scheme] = Entry{std::move(client_factory), std::move(server_factory)};
    return Status::success();
}

bool ChannelRegistry::has(const std::string& scheme) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.count(scheme) > 0;
}

Result<std::unique_ptr<ChannelClient>> ChannelRegistry::open(const DataChannelSpec& spec) const {
    ClientFactory factory;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = entries_.find(spec.scheme);
        if (it == entries_.end()) {
            return make_error(errc::channel_unreachable, std::string(errc::unknown_scheme) + ": " + spec.scheme);
        }
        factory = it->second.client;
    }
    return factory(spec);
}

Result<std::unique_ptr<ChannelServer>> ChannelRegistry::serve(const DataChannelSpec& spec) const {
    ServerFactory factory;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = entries_.find(spec.scheme);
        if (it == entries_.end()) {
            return make_error(errc::channel_unreachable, std::string(errc::unknown_scheme) + ": " + spec.scheme);
        }
        factory = it->second.server;
    }
    return factory(spec);
}

// ---------------------------------------------------------------------------
// Local directory channel
// ---------------------------------------------------------------------------

namespace {

Result<Bytes> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return make_error(errc::not_found, "no such file: " + path.string());
    Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

Status write_file_atomic(const fs::path& path, const Bytes& content) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    fs::path tmp = path;
    tmp += ".part-" + new_uuid().substr(0, 8);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) return make_error(errc::channel_unreachable, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(content.data()),
                  static_cast<std::streamsize>(content.size()));
        if (!out) return make_error(errc::channel_unreachable, "short write to " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) return make_error(errc::channel_unreachable, "rename failed for " + path.string());
    return Status::success();
}

class LocalDirChannel : public ChannelClient {
public:
    explicit LocalDirChannel(const DataChannelSpec& spec) : root_(spec.root) {}

    Result<FileDescriptor> put(const std::string& logical_name, const Bytes& content) override {
        if (auto st = validate_logical_name(logical_name); !st) return st.error();
        if (auto st = write_file_atomic(root_ / logical_name, content); !st) return st.error();
        FileDescriptor fd;
        fd.logical_name = logical_name;
        fd.size_bytes = static_cast<std::int64_t>(content.size());
        fd.digest = sha256_hex(content);
        fd.channel = DataChannelSpec{"local", "", "", root_.string()};
        return fd;
    }

    Result<Bytes> get(const std::string& logical_name) override {
        if (auto st = validate_logical_name(logical_name); !st) return st.error();
        return read_file_bytes(root_ / logical_name);
    }

    Result<std::vector<std::string>> list(const std::string& prefix) override {
        std::vector<std::string> names;
        if (!fs::exists(root_)) return names;
        for (const auto& entry : fs::recursive_directory_iterator(root_)) {
            if (!entry.is_regular_file()) continue;
            std::string name = fs::relative(entry.path(), root_).generic_string();
            if (name.rfind(prefix, 0) == 0) names.push_back(name);
        }
        std::sort(names.begin(), names.end());
        return names;
    }

    Status remove(const std::string& logical_name) override {
        if (auto st = validate_logical_name(logical_name); !st) return st;
        std::error_code ec;
        fs::remove(root_ / logical_name, ec);
        return Status::success();
    }

private:
    fs::path root_;
};

}  // namespace

// ---------------------------------------------------------------------------
// aftp framing
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kMaxAftpFrame = kAftpChunkBytes + 1024;
constexpr std::size_t kMaxContentBytes = 64 * 1024 * 1024;
constexpr int kAftpIoTimeoutMs = 15000;

Status write_typed_frame(int fd, char type, const Bytes& payload) {
    Bytes body;
    body.reserve(payload.size() + 1);
    body.push_back(static_cast<std::uint8_t>(type));
    body.insert(body.end(), payload.begin(), payload.end());
    return write_frame(fd, body);
}

Status write_json_frame(int fd, char type, const json& doc) {
    return write_typed_frame(fd, type, to_bytes(doc.dump()));
}

struct TypedFrame {
    char type = 0;
    Bytes payload;
};

Result<TypedFrame> read_typed_frame(int fd, int timeout_ms) {
    auto frame = read_frame(fd, kMaxAftpFrame, timeout_ms);
    if (!frame) return frame.error();
    if (frame.value().empty()) return make_error(errc::invalid_envelope, "empty transfer frame");
    TypedFrame tf;
    tf.type = static_cast<char>(frame.value()[0]);
    tf.payload.assign(frame.value().begin() + 1, frame.value().end());
    return tf;
}

Status send_error_header(int fd, const std::string& code, const std::string& message) {
    return write_json_frame(fd, 'H', json{{"status", "error"}, {"code", code}, {"message", message}});
}

Status send_content(int fd, const Bytes& content) {
    std::size_t off = 0;
    do {
        std::size_t len = std::min(kAftpChunkBytes, content.size() - off);
        Bytes chunk(content.begin() + off, content.begin() + off + len);
        if (auto st = write_typed_frame(fd, 'D', chunk); !st) return st;
        off += len;
    } while (off < content.size());
    return write_json_frame(fd, 'T', json{{"sha256", sha256_hex(content)}});
}

/// Reads D frames up to the T trailer and verifies the digest.
Result<Bytes> receive_content(int fd, std::int64_t expected_size) {
    Bytes content;
    while (true) {
        auto frame = read_typed_frame(fd, kAftpIoTimeoutMs);
        if (!frame) return frame.error();
        if (frame.value().type == 'D') {
            content.insert(content.end(), frame.value().payload.begin(), frame.value().payload.end());
            if (content.size() > kMaxContentBytes) {
                return make_error(errc::payload_too_large, "transfer exceeds content cap");
            }
            continue;
        }
        if (frame.value().type == 'T') {
            json trailer = json::parse(to_string(frame.value().payload), nullptr, false);
            if (trailer.is_discarded()) return make_error(errc::invalid_envelope, "malformed trailer");
            if (sha256_hex(content) != trailer.value("sha256", "")) {
                return make_error(errc::digest_mismatch, "content digest does not match trailer");
            }
            if (expected_size >= 0 && static_cast<std::int64_t>(content.size()) != expected_size) {
                return make_error(errc::digest_mismatch, "content size does not match header");
            }
            return content;
        }
        return make_error(errc::invalid_envelope, "unexpected frame type in transfer");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// AftpServer
// ---------------------------------------------------------------------------

AftpServer::AftpServer(DataChannelSpec spec, std::string root_dir)
    : spec_(std::move(spec)), root_dir_(std::move(root_dir)) {}

AftpServer::~AftpServer() { stop(); }

Status AftpServer::start() {
    auto listen_ep = parse_endpoint(spec_.endpoint.empty() ? "127.0.0.1:0" : spec_.endpoint);
    if (!listen_ep) return listen_ep.error();
    auto listener = TcpListener::bind(listen_ep.value());
    if (!listener) return listener.error();
    listener_ = std::move(listener.value());
    endpoint_ = listener_.local_endpoint();
    std::error_code ec;
    fs::create_directories(root_dir_, ec);
    if (ec) return make_error(errc::channel_unreachable, "cannot create storage root " + root_dir_);
    running_.store(true);
    accept_thread_ = std::thread([this] { serve_loop(); });
    return Status::success();
}

void AftpServer::stop() {
    if (!running_.exchange(false)) return;
    listener_.shutdown();
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> workers;
    {
        std::lock_guard<std::mutex> lock(workers_mutex_);
        workers.swap(workers_);
    }
    for (auto& worker : workers) {
        if (worker.joinable()) worker.join();
    }
}

void AftpServer::serve_loop() {
    while (running_.load()) {
        auto socket = listener_.accept();
        if (!socket) {
            if (!running_.load()) return;
            continue;
        }
        std::lock_guard<std::mutex> lock(workers_mutex_);
        workers_.emplace_back(
            [this, fd = std::make_shared<Socket>(std::move(socket.value()))]() mutable {
                handle_connection(std::move(*fd));
            });
    }
}

void AftpServer::handle_connection(Socket socket) {
    const int fd = socket.fd();
    while (running_.load()) {
        // Idle poll between requests so stop() is honored promptly.
        auto header_frame = read_typed_frame(fd, 500);
        if (!header_frame) {
            if (header_frame.error().code == errc::timeout) continue;
            return;  // peer closed or broke framing
        }
        if (header_frame.value().type != 'H') {
            (void)send_error_header(fd, errc::invalid_envelope, "expected header frame");
            return;
        }
        json header = json::parse(to_string(header_frame.value().payload), nullptr, false);
        if (header.is_discarded()) {
            (void)send_error_header(fd, errc::invalid_envelope, "malformed header");
            return;
        }
        std::string verb = header.value("verb", "");
        std::string name = header.value("name", "");

        if (!spec_.credentials.empty() && header.value("token", "") != spec_.credentials) {
            (void)send_error_header(fd, errc::auth_failed, "bad channel credentials");
            continue;
        }

        if (verb == "PUT") {
            auto content = receive_content(fd, header.value("size", std::int64_t{-1}));
            if (!content) {
                (void)send_error_header(fd, content.error().code, content.error().message);
                continue;
            }
            if (auto st = validate_logical_name(name); !st) {
                (void)send_error_header(fd, st.error().code, st.error().message);
                continue;
            }
            if (auto st = write_file_atomic(fs::path(root_dir_) / name, content.value()); !st) {
                (void)send_error_header(fd, st.error().code, st.error().message);
                continue;
            }
            FileDescriptor fd_out;
            fd_out.logical_name = name;
            fd_out.size_bytes = static_cast<std::int64_t>(content.value().size());
            fd_out.digest = sha256_hex(content.value());
            fd_out.channel = DataChannelSpec{"aftp", endpoint_.to_string(), "", ""};
            if (change_hook_) change_hook_("PUT", fd_out);
            (void)write_json_frame(fd, 'H', json{{"status", "ok"}, {"descriptor", fd_out.to_json()}});
        } else if (verb == "GET") {
            if (auto st = validate_logical_name(name); !st) {
                (void)send_error_header(fd, st.error().code, st.error().message);
                continue;
            }
            auto content = read_file_bytes(fs::path(root_dir_) / name);
            if (!content) {
                (void)send_error_header(fd, content.error().code, content.error().message);
                continue;
            }
            (void)write_json_frame(fd, 'H',
                                   json{{"status", "ok"},
                                        {"size", static_cast<std::int64_t>(content.value().size())}});
            (void)send_content(fd, content.value());
        } else if (verb == "LIST") {
            std::vector<std::string> names;
            if (fs::exists(root_dir_)) {
                for (const auto& entry : fs::recursive_directory_iterator(root_dir_)) {
                    if (!entry.is_regular_file()) continue;
                    std::string rel = fs::relative(entry.path(), root_dir_).generic_string();
                    if (rel.rfind(header.value("prefix", ""), 0) == 0) names.push_back(rel);
                }
            }
            std::sort(names.begin(), names.end());
            (void)write_json_frame(fd, 'H', json{{"status", "ok"}, {"names", names}});
        } else if (verb == "DEL") {
            if (auto st = validate_logical_name(name); !st) {
                (void)send_error_header(fd, st.error().code, st.error().message);
                continue;
            }
            std::error_code ec;
            fs::remove(fs::path(root_dir_) / name, ec);
            FileDescriptor fd_out;
            fd_out.logical_name = name;
            if (change_hook_) change_hook_("DEL", fd_out);
            (void)write_json_frame(fd, 'H', json{{"status", "ok"}});
        } else {
            (void)send_error_header(fd, errc::invalid_request, "unknown verb " + verb);
        }
    }
}

// ---------------------------------------------------------------------------
// aftp client
// ---------------------------------------------------------------------------

namespace {

class AftpClient : public ChannelClient {
public:
    explicit AftpClient(DataChannelSpec spec) : spec_(std::move(spec)) {}

    Result<FileDescriptor> put(const std::string& logical_name, const Bytes& content) override {
        std::string name = qualified(logical_name);
        if (auto st = validate_logical_name(name); !st) return st.error();
        auto sock = dial();
        if (!sock) return sock.error();
        int fd = sock.value().fd();
        json header = {{"verb", "PUT"},
                       {"name", name},
                       {"size", static_cast<std::int64_t>(content.size())},
                       {"token", spec_.credentials}};
        if (auto st = write_json_frame(fd, 'H', header); !st) return st.error();
        if (auto st = send_content(fd, content); !st) return st.error();
        auto reply = read_reply_header(fd);
        if (!reply) return reply.error();
        FileDescriptor descriptor = FileDescriptor::from_json(reply.value().value("descriptor", json::object()));
        descriptor.channel = spec_;
        descriptor.logical_name = logical_name;
        if (descriptor.digest != sha256_hex(content)) {
            return make_error(errc::digest_mismatch, "server stored different content for " + logical_name);
        }
        return descriptor;
    }

    Result<Bytes> get(const std::string& logical_name) override {
        std::string name = qualified(logical_name);
        if (auto st = validate_logical_name(name); !st) return st.error();
        auto sock = dial();
        if (!sock) return sock.error();
        int fd = sock.value().fd();
        if (auto st = write_json_frame(fd, 'H', json{{"verb", "GET"}, {"name", name}, {"token", spec_.credentials}});
            !st) {
            return st.error();
        }
        auto reply = read_reply_header(fd);
        if (!reply) return reply.error();
        return receive_content(fd, reply.value().value("size", std::int64_t{-1}));
    }

    Result<std::vector<std::string>> list(const std::string& prefix) override {
        auto sock = dial();
        if (!sock) return sock.error();
        int fd = sock.value().fd();
        if (auto st = write_json_frame(
                fd, 'H', json{{"verb", "LIST"}, {"prefix", qualified(prefix)}, {"token", spec_.credentials}});
            !st) {
            return st.error();
        }
        auto reply = read_reply_header(fd);
        if (!reply) return reply.error();
        std::vector<std::string> names = reply.value().value("names", std::vector<std::string>{});
        if (!spec_.root.empty()) {
            // Strip the root prefix so callers see channel-relative names.
            std::vector<std::string> stripped;
            for (auto& name : names) {
                if (name.rfind(spec_.root + "/", 0) == 0) stripped.push_back(name.substr(spec_.root.size() + 1));
            }
            names = std::move(stripped);
        }
        return names;
    }

    Status remove(const std::string& logical_name) override {
        std::string name = qualified(logical_name);
        if (auto st = validate_logical_name(name); !st) return st;
        auto sock = dial();
        if (!sock) return sock.error();
        int fd = sock.value().fd();
        if (auto st = write_json_frame(fd, 'H', json{{"verb", "DEL"}, {"name", name}, {"token", spec_.credentials}});
            !st) {
            return st;
        }
        auto reply = read_reply_header(fd);
        if (!reply) return reply.error();
        return Status::success();
    }

private:
    std::string qualified(const std::string& name) const {
        if (spec_.root.empty()) return name;
        if (name.empty()) return spec_.root;
        return spec_.root + "/" + name;
    }

    Result<Socket> dial() {
        auto ep = parse_endpoint(spec_.endpoint);
        if (!ep) return make_error(errc::channel_unreachable, "bad channel endpoint: " + spec_.endpoint);
        auto sock = tcp_connect(ep.value(), 3000);
        if (!sock) return make_error(errc::channel_unreachable, sock.error().message);
        return std::move(sock.value());
    }

    Result<json> read_reply_header(int fd) {
        auto frame = read_typed_frame(fd, kAftpIoTimeoutMs);
        if (!frame) return frame.error();
        if (frame.value().type != 'H') return make_error(errc::invalid_envelope, "expected header frame");
        json header = json::parse(to_string(frame.value().payload), nullptr, false);
        if (header.is_discarded()) return make_error(errc::invalid_envelope, "malformed reply header");
        if (header.value("status", "") != "ok") {
            return make_error(header.value("code", errc::channel_unreachable), header.value("message", ""));
        }
        return header;
    }

    DataChannelSpec spec_;
};

}  // namespace

void register_builtin_channels() {
    static bool done = [] {
        auto& registry = ChannelRegistry::instance();
        (void)registry.register_channel(
            "local",
            [](const DataChannelSpec& spec) -> Result<std::unique_ptr<ChannelClient>> {
                if (spec.root.empty()) return make_error(errc::invalid_request, "local channel needs a root");
                return std::unique_ptr<ChannelClient>(new LocalDirChannel(spec));
            },
            [](const DataChannelSpec&) -> Result<std::unique_ptr<ChannelServer>> {
                return make_error(errc::invalid_request, "local channel space needs no server");
            });
        (void)registry.register_channel(
            "aftp",
            [](const DataChannelSpec& spec) -> Result<std::unique_ptr<ChannelClient>> {
                return std::unique_ptr<ChannelClient>(new AftpClient(spec));
            },
            [](const DataChannelSpec& spec) -> Result<std::unique_ptr<ChannelServer>> {
                return std::unique_ptr<ChannelServer>(new AftpServer(spec, spec.root));
            });
        return true;
    }();
    (void)done;
}

// ---------------------------------------------------------------------------
// Staging
// ---------------------------------------------------------------------------

namespace {
Error stage_error(const std::string& logical_name, const Error& cause) {
    return make_error(errc::stage_failure, logical_name + ": " + cause.code + ": " + cause.message);
}
}  // namespace

Status stage_in(const StagingPlan& plan, const std::string& workspace) {
    if (auto st = plan.validate(); !st) return st;
    for (const auto& descriptor : plan.inputs) {
        auto client = ChannelRegistry::instance().open(descriptor.channel);
        if (!client) return stage_error(descriptor.logical_name, client.error());
        auto content = client.value()->get(descriptor.logical_name);
        if (!content) return stage_error(descriptor.logical_name, content.error());
        if (!descriptor.digest.empty() && sha256_hex(content.value()) != descriptor.digest) {
            return stage_error(descriptor.logical_name,
                               make_error(errc::digest_mismatch, "staged content does not match descriptor"));
        }
        if (auto st = write_file_atomic(fs::path(workspace) / descriptor.logical_name, content.value()); !st) {
            return stage_error(descriptor.logical_name, st.error());
        }
    }
    return Status::success();
}

Result<StageOutReport> stage_out(const StagingPlan& plan, const std::string& workspace) {
    if (auto st = plan.validate(); !st) return st.error();
    StageOutReport report;
    for (const auto& descriptor : plan.outputs) {
        fs::path path = fs::path(workspace) / descriptor.logical_name;
        if (!fs::exists(path)) {
            report.missing.push_back(descriptor.logical_name);
            continue;
        }
        auto content = read_file_bytes(path);
        if (!content) return stage_error(descriptor.logical_name, content.error());
        auto client = ChannelRegistry::instance().open(descriptor.channel);
        if (!client) return stage_error(descriptor.logical_name, client.error());
        auto uploaded = client.value()->put(descriptor.logical_name, content.value());
        if (!uploaded) return stage_error(descriptor.logical_name, uploaded.error());
        uploaded.value().direction = Direction::Output;
        report.uploaded.push_back(std::move(uploaded.value()));
    }
    return report;
}

// ---------------------------------------------------------------------------
// StorageService
// ---------------------------------------------------------------------------

void StorageService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    register_builtin_channels();
    std::string root = ctx.opt_str("root", "");
    if (root.empty()) {
        root = (fs::temp_directory_path() / ("deskgrid-storage-" + ctx.node_id().substr(0, 8))).string();
    }
    DataChannelSpec serve_spec{"aftp", ctx.opt_str("listen", "127.0.0.1:0"), ctx.opt_str("credentials", ""),
                               root};
    server_ = std::make_unique<AftpServer>(serve_spec, root);
    server_->set_change_hook([this](const std::string& verb, const FileDescriptor& descriptor) {
        std::lock_guard<std::mutex> lock(catalogue_mutex_);
        if (verb == "PUT") {
            catalogue_[descriptor.logical_name] = descriptor;
        } else if (verb == "DEL") {
            catalogue_.erase(descriptor.logical_name);
        }
    });
    if (auto st = server_->start(); !st) {
        throw std::runtime_error("storage server failed to start: " + st.error().to_string());
    }
    spec_ = DataChannelSpec{"aftp", server_->endpoint().to_string(), serve_spec.credentials, ""};
    DG_LOG_INFO("storage", "serving " + root + " at " + spec_.endpoint);
}

void StorageService::stop() {
    if (server_) server_->stop();
}

DataChannelSpec StorageService::channel_spec() const { return spec_; }

Result<Bytes> StorageService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "st.channel") {
        return to_bytes(json{{"channel", spec_.to_json()}}.dump());
    }
    if (request.kind == "st.describe") {
        std::lock_guard<std::mutex> lock(catalogue_mutex_);
        auto it = catalogue_.find(body.value("logical_name", ""));
        if (it == catalogue_.end()) return make_error(errc::not_found, "not in catalogue");
        return to_bytes(json{{"descriptor", it->second.to_json()}}.dump());
    }
    if (request.kind == "st.catalogue") {
        json files = json::array();
        std::lock_guard<std::mutex> lock(catalogue_mutex_);
        for (const auto& [name, descriptor] : catalogue_) files.push_back(descriptor.to_json());
        return to_bytes(json{{"files", files}}.dump());
    }
    return make_error(errc::invalid_request, "unknown storage verb: " + request.kind);
}

json StorageService::snapshot_state() {
    json files = json::array();
    std::lock_guard<std::mutex> lock(catalogue_mutex_);
    for (const auto& [name, descriptor] : catalogue_) files.push_back(descriptor.to_json());
    return json{{"files", files}};
}

void StorageService::restore_state(const json& state) {
    std::lock_guard<std::mutex> lock(catalogue_mutex_);
    catalogue_.clear();
    for (const auto& doc : state.value("files", json::array())) {
        FileDescriptor descriptor = FileDescriptor::from_json(doc);
        catalogue_[descriptor.logical_name] = descriptor;
    }
}

}  // namespace deskgrid::store
