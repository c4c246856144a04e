#pragma once

#include "deskgrid/container.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace deskgrid::store {

/// Where a storage space lives and how to reach it. Serialized in application
/// configuration as a URI: scheme://endpoint/root (endpoint empty for purely
/// local schemes, credentials carried separately).
struct DataChannelSpec {
    std::string scheme;
    std::string endpoint;     // host:port, empty for "local"
    std::string credentials;  // opaque token
    std::string root;         // path prefix within the channel's space

    std::string to_uri() const;
    static Result<DataChannelSpec> parse_uri(const std::string& uri);

    nlohmann::json to_json() const;
    static DataChannelSpec from_json(const nlohmann::json& doc);
    bool operator==(const DataChannelSpec&) const = default;
};

enum class Direction { Input, Output };

struct FileDescriptor {
    std::string logical_name;
    std::int64_t size_bytes = 0;
    std::string digest;  // SHA-256 hex of the content
    DataChannelSpec channel;
    Direction direction = Direction::Input;

    nlohmann::json to_json() const;
    static FileDescriptor from_json(const nlohmann::json& doc);
};

struct StagingPlan {
    std::vector<FileDescriptor> inputs;
    std::vector<FileDescriptor> outputs;

    Status validate() const;  // logical names unique across inputs ∪ outputs
    nlohmann::json to_json() const;
    static StagingPlan from_json(const nlohmann::json& doc);
};

/// Rejects names that could escape the channel root: absolute paths, empty or
/// dot segments, parent traversal. Forward slashes delimit subdirectories.
Status validate_logical_name(const std::string& name);

/// Remote access half of a data channel.
class ChannelClient {
public:
    virtual ~ChannelClient() = default;
    virtual Result<FileDescriptor> put(const std::string& logical_name, const Bytes& content) = 0;
    virtual Result<Bytes> get(const std::string& logical_name) = 0;
    virtual Result<std::vector<std::string>> list(const std::string& prefix) = 0;
    /// Idempotent: deleting a missing file succeeds.
    virtual Status remove(const std::string& logical_name) = 0;
};

/// Space-owning half of a data channel.
class ChannelServer {
public:
    virtual ~ChannelServer() = default;
    virtual Status start() = 0;
    virtual void stop() = 0;
    virtual Endpoint endpoint() const = 0;
};

using ClientFactory = std::function<Result<std::unique_ptr<ChannelClient>>(const DataChannelSpec&)>;
using ServerFactory = std::function<Result<std::unique_ptr<ChannelServer>>(const DataChannelSpec&)>;

/// Scheme → implementation. Any storage facility plugs in here; specs with an
/// unregistered scheme fail at first use.
class ChannelRegistry {
public:
    static ChannelRegistry& instance();

    Status register_channel(const std::string& scheme, ClientFactory client_factory,
                            ServerFactory server_factory);
    bool has(const std::string& scheme) const;
    Result<std::unique_ptr<ChannelClient>> open(const DataChannelSpec& spec) const;
    Result<std::unique_ptr<ChannelServer>> serve(const DataChannelSpec& spec) const;

private:
    struct Entry {
        ClientFactory client;
        ServerFactory server;
    };
    mutable std::mutex mutex_;
    std::map<std::string, Entry> entries_;
};

/// Registers the built-in "local" and "aftp" schemes. Idempotent.
void register_builtin_channels();

// ---------------------------------------------------------------------------
// Staging
// ---------------------------------------------------------------------------

struct StageFailure {
    std::string logical_name;
    Error cause;
};

/// Materializes every input under its logical name in `workspace`, digests
/// verified. Fails on the first bad file.
Status stage_in(const StagingPlan& plan, const std::string& workspace);

struct StageOutReport {
    std::vector<FileDescriptor> uploaded;
    std::vector<std::string> missing;  // declared outputs the job never produced
};

/// Uploads every declared output that exists and reports the ones missing.
Result<StageOutReport> stage_out(const StagingPlan& plan, const std::string& workspace);

// ---------------------------------------------------------------------------
// The built-in framed transfer channel ("aftp")
// ---------------------------------------------------------------------------
// Same length-prefixed framing as the envelope protocol; each frame body is a
// 1-byte type tag plus payload. 'H' frames carry UTF-8 JSON headers, 'D'
// frames carry at most 64 KiB of content, 'T' frames carry the JSON trailer
// with the content's SHA-256. Verbs: PUT, GET, LIST, DEL. docs/protocol.md
// pins the exact framing.

inline constexpr std::size_t kAftpChunkBytes = 64 * 1024;

class AftpServer : public ChannelServer {
public:
    /// Serves `root_dir` on the spec's endpoint (port 0 picks a free port).
    AftpServer(DataChannelSpec spec, std::string root_dir);
    ~AftpServer() override;

    Status start() override;
    void stop() override;
    Endpoint endpoint() const override { return endpoint_; }

    /// Called after successful PUT/DEL so a hosting service can keep a
    /// catalogue. Invoked on transfer threads.
    using ChangeHook = std::function<void(const std::string& verb, const FileDescriptor& descriptor)>;
    void set_change_hook(ChangeHook hook) { change_hook_ = std::move(hook); }

private:
    void serve_loop();
    void handle_connection(Socket socket);

    DataChannelSpec spec_;
    std::string root_dir_;
    Endpoint endpoint_;
    TcpListener listener_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
    std::vector<std::thread> workers_;
    std::mutex workers_mutex_;
    ChangeHook change_hook_;
};

/// Storage Service: owns the node's aftp space (options: root, listen port)
/// and keeps a descriptor catalogue for snapshots. Kinds: st.describe,
/// st.catalogue, st.channel.
class StorageService : public Service {
public:
    void start(ServiceContext& ctx) override;
    void stop() override;
    Result<Bytes> handle(const Envelope& request) override;
    nlohmann::json snapshot_state() override;
    void restore_state(const nlohmann::json& state) override;

    /// The channel spec clients should use to reach this service's space.
    DataChannelSpec channel_spec() const;

private:
    ServiceContext* ctx_ = nullptr;
    std::unique_ptr<AftpServer> server_;
    DataChannelSpec spec_;
    std::mutex catalogue_mutex_;
    std::map<std::string, FileDescriptor> catalogue_;
};

}  // namespace deskgrid::store
