#pragma once

#include "deskgrid/common.hpp"
#include "deskgrid/wire.hpp"

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

namespace deskgrid {

/// RAII wrapper around a connected socket fd.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket() { close(); }
    Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void close();
    /// Release ownership of the fd without closing it.
    int release();

private:
    int fd_ = -1;
};

Result<Socket> tcp_connect(const Endpoint& peer, int timeout_ms);

/// Writes one length-prefixed frame. Thread safety is the caller's problem.
Status write_frame(int fd, const Bytes& body);
/// Reads one frame. timeout_ms < 0 blocks indefinitely. EOF and oversized
/// frames are errors.
Result<Bytes> read_frame(int fd, std::size_t max_frame_bytes, int timeout_ms);

class TcpListener {
public:
    TcpListener() = default;
    ~TcpListener() { shutdown(); }
    TcpListener(TcpListener&&) noexcept;
    TcpListener& operator=(TcpListener&&) noexcept;

    static Result<TcpListener> bind(const Endpoint& endpoint);

    Endpoint local_endpoint() const { return local_; }
    /// Blocks until a connection arrives or shutdown() is called.
    Result<Socket> accept();
    void shutdown();

private:
    int fd_ = -1;
    Endpoint local_;
};

/// Sink used to deliver the reply for an inbound request. Safe to invoke from
/// any thread, at most once.
using ReplySink = std::function<void(Envelope)>;

/// Invoked on the transport's reader threads for every inbound request
/// envelope. Implementations must not block; hand off and reply later via the
/// sink.
using InboundHandler = std::function<void(Envelope&&, ReplySink)>;

/// Framed envelope transport: one listener, pooled outbound connections,
/// replies correlated by message id. Unreachable peers are retried until the
/// call deadline, so a dead peer surfaces as Timeout after the deadline.
class MessageTransport {
public:
    MessageTransport(std::string node_id, std::size_t max_payload_bytes);
    ~MessageTransport();

    Status start(const Endpoint& listen, InboundHandler handler);
    void stop();

    Endpoint endpoint() const { return endpoint_; }
    const std::string& node_id() const { return node_id_; }

    /// Sends a request and waits for the correlated reply.
    Result<Envelope> call(const Endpoint& peer, Envelope request, int timeout_ms);

    /// Fire-and-forget send. Fails fast if the peer is unreachable right now.
    Status post(const Endpoint& peer, Envelope message);

private:
    struct PeerConnection;
    struct PendingCall;

    std::shared_ptr<PeerConnection> get_connection(const Endpoint& peer, TimestampMs deadline);
    void drop_connection(const std::string& key, PeerConnection* which);
    void reader_loop(std::shared_ptr<PeerConnection> conn);
    void accept_loop();
    void handle_frame(const std::shared_ptr<PeerConnection>& conn, Bytes frame);

    std::string node_id_;
    std::size_t max_payload_bytes_;
    std::size_t max_frame_bytes_;
    Endpoint endpoint_;
    TcpListener listener_;
    InboundHandler handler_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};

    std::mutex conn_mutex_;
    std::map<std::string, std::shared_ptr<PeerConnection>> outbound_;
    std::vector<std::shared_ptr<PeerConnection>> inbound_;

    std::mutex pending_mutex_;
    std::map<std::string, std::shared_ptr<PendingCall>> pending_;
};

}  // namespace deskgrid
