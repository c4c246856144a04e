#include "deskgrid/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>

namespace deskgrid {

namespace {

void ignore_sigpipe_once() {
    static bool done = [] {
        ::signal(SIGPIPE, SIG_IGN);
        return true;
    }();
    (void)done;
}

Status fill_sockaddr(const Endpoint& ep, sockaddr_in& addr) {
    std::memset(&addr, 0, sizeof(addr));
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
        // Hostname form is accepted only for localhost; everything at desk
        // scale is numeric or local.
        if (ep.host == "localhost") {
            addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
            return Status::success();
        }
        return make_error(errc::connection_failed, "unresolvable host: " + ep.host);
    }
    return Status::success();
}

bool wait_fd(int fd, short events, int timeout_ms) {
    pollfd pfd{fd, events, 0};
    int rc = ::poll(&pfd, 1, timeout_ms);
    return rc > 0 && (pfd.revents & (events | POLLERR | POLLHUP)) != 0;
}

}  // namespace

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

int Socket::release() {
    int fd = fd_;
    fd_ = -1;
    return fd;
}

Result<Socket> tcp_connect(const Endpoint& peer, int timeout_ms) {
    ignore_sigpipe_once();
    sockaddr_in addr;
    if (auto st = fill_sockaddr(peer, addr); !st) return st.error();

    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return make_error(errc::connection_failed, "socket(): " + std::string(strerror(errno)));
    Socket sock(fd);

    int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);

    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
    if (rc != 0) {
        if (errno != EINPROGRESS) {
            return make_error(errc::connection_failed, "connect " + peer.to_string() + ": " + strerror(errno));
        }
        if (!wait_fd(fd, POLLOUT, timeout_ms)) {
            return make_error(errc::timeout, "connect " + peer.to_string() + ": timed out");
        }
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (err != 0) {
            return make_error(errc::connection_failed, "connect " + peer.to_string() + ": " + strerror(err));
        }
    }
    ::fcntl(fd, F_SETFL, flags);  // back to blocking
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return sock;
}

Status write_frame(int fd, const Bytes& body) {
    Bytes header;
    append_u32_be(header, static_cast<std::uint32_t>(body.size()));
    for (const Bytes* part : {static_cast<const Bytes*>(&header), &body}) {
        std::size_t sent = 0;
        while (sent < part->size()) {
            ssize_t n = ::send(fd, part->data() + sent, part->size() - sent, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                return make_error(errc::connection_failed, "send(): " + std::string(strerror(errno)));
            }
            sent += static_cast<std::size_t>(n);
        }
    }
    return Status::success();
}

namespace {
Status read_exact(int fd, std::uint8_t* dst, std::size_t want, int timeout_ms) {
    TimestampMs deadline = timeout_ms < 0 ? -1 : now_ms() + timeout_ms;
    std::size_t got = 0;
    while (got < want) {
        if (deadline >= 0) {
            std::int64_t remaining = deadline - now_ms();
            if (remaining <= 0) return make_error(errc::timeout, "frame read timed out");
            if (!wait_fd(fd, POLLIN, static_cast<int>(remaining))) {
                return make_error(errc::timeout, "frame read timed out");
            }
        }
        ssize_t n = ::recv(fd, dst + got, want - got, 0);
        if (n == 0) return make_error(errc::connection_failed, "peer closed connection");
        if (n < 0) {
            if (errno == EINTR) continue;
            return make_error(errc::connection_failed, "recv(): " + std::string(strerror(errno)));
        }
        got += static_cast<std::size_t>(n);
    }
    return Status::success();
}
}  // namespace

Result<Bytes> read_frame(int fd, std::size_t max_frame_bytes, int timeout_ms) {
    std::uint8_t header[4];
    if (auto st = read_exact(fd, header, 4, timeout_ms); !st) return st.error();
    std::uint32_t len = read_u32_be(header);
    if (len > max_frame_bytes) {
        return make_error(errc::payload_too_large,
                          "frame of " + std::to_string(len) + " bytes exceeds cap");
    }
    Bytes body(len);
    if (len > 0) {
        if (auto st = read_exact(fd, body.data(), len, timeout_ms); !st) return st.error();
    }
    return body;
}

TcpListener::TcpListener(TcpListener&& other) noexcept : fd_(other.fd_), local_(other.local_) {
    other.fd_ = -1;
}

TcpListener& TcpListener::operator=(TcpListener&& other) noexcept {
    if (this != &other) {
        shutdown();
        fd_ = other.fd_;
        local_ = other.local_;
        other.fd_ = -1;
    }
    return *this;
}

Result<TcpListener> TcpListener::bind(const Endpoint& endpoint) {
    ignore_sigpipe_once();
    sockaddr_in addr;
    if (auto st = fill_sockaddr(endpoint, addr); !st) {
        return make_error(errc::bind_failure, st.error().message);
    }
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return make_error(errc::bind_failure, "socket(): " + std::string(strerror(errno)));
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        std::string why = strerror(errno);
        ::close(fd);
        return make_error(errc::bind_failure, "bind " + endpoint.to_string() + ": " + why);
    }
    if (::listen(fd, 64) != 0) {
        std::string why = strerror(errno);
        ::close(fd);
        return make_error(errc::bind_failure, "listen: " + why);
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);

    TcpListener listener;
    listener.fd_ = fd;
    listener.local_ = Endpoint{endpoint.host == "0.0.0.0" ? "127.0.0.1" : endpoint.host,
                               ntohs(bound.sin_port)};
    return listener;
}

Result<Socket> TcpListener::accept() {
    while (true) {
        int fd = fd_;
        if (fd < 0) return make_error(errc::connection_failed, "listener closed");
        pollfd pfd{fd, POLLIN, 0};
        int rc = ::poll(&pfd, 1, 200);
        if (fd_ < 0) return make_error(errc::connection_failed, "listener closed");
        if (rc <= 0) continue;
        int client = ::accept(fd, nullptr, nullptr);
        if (client < 0) {
            if (errno == EINTR || errno == ECONNABORTED) continue;
            return make_error(errc::connection_failed, "accept(): " + std::string(strerror(errno)));
        }
        int one = 1;
        ::setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        return Socket(client);
    }
}

void TcpListener::shutdown() {
    if (fd_ >= 0) {
        int fd = fd_;
        fd_ = -1;
        ::shutdown(fd, SHUT_RDWR);
        ::close(fd);
    }
}

// ---------------------------------------------------------------------------
// MessageTransport
// ---------------------------------------------------------------------------

struct MessageTransport::PendingCall {
    std::mutex mutex;
    std::condition_variable cv;
    bool done = false;
    Result<Envelope> result = Error{errc::timeout, "no reply"};
};

struct MessageTransport::PeerConnection {
    Socket socket;
    std::mutex write_mutex;
    std::thread reader;
    std::string pool_key;  // empty for inbound connections
    std::atomic<bool> open{true};

    Status send(const Bytes& frame) {
        std::lock_guard<std::mutex> lock(write_mutex);
        if (!open.load()) return make_error(errc::connection_failed, "connection closed");
        return write_frame(socket.fd(), frame);
    }
};

MessageTransport::MessageTransport(std::string node_id, std::size_t max_payload_bytes)
    : node_id_(std::move(node_id)),
      max_payload_bytes_(max_payload_bytes),
      max_frame_bytes_(std::max(kMaxEnvelopeFrameBytes, max_payload_bytes * 3 / 2 + 4096)) {}

MessageTransport::~MessageTransport() { stop(); }

Status MessageTransport::start(const Endpoint& listen, InboundHandler handler) {
    auto listener = TcpListener::bind(listen);
    if (!listener) return listener.error();
    listener_ = std::move(listener.value());
    endpoint_ = listener_.local_endpoint();
    handler_ = std::move(handler);
    running_.store(true);
    accept_thread_ = std::thread([this] { accept_loop(); });
    return Status::success();
}

void MessageTransport::stop() {
    if (!running_.exchange(false)) return;
    listener_.shutdown();
    if (accept_thread_.joinable()) accept_thread_.join();

    std::vector<std::shared_ptr<PeerConnection>> all;
    {
        std::lock_guard<std::mutex> lock(conn_mutex_);
        for (auto& [key, conn] : outbound_) all.push_back(conn);
        for (auto& conn : inbound_) all.push_back(conn);
        outbound_.clear();
        inbound_.clear();
    }
    for (auto& conn : all) {
        conn->open.store(false);
        ::shutdown(conn->socket.fd(), SHUT_RDWR);
    }
    for (auto& conn : all) {
        if (conn->reader.joinable()) conn->reader.join();
    }
    // Fail anything still pending.
    std::lock_guard<std::mutex> lock(pending_mutex_);
    for (auto& [id, call] : pending_) {
        std::lock_guard<std::mutex> call_lock(call->mutex);
        call->done = true;
        call->result = Error{errc::timeout, "transport stopped"};
        call->cv.notify_all();
    }
    pending_.clear();
}

void MessageTransport::accept_loop() {
    while (running_.load()) {
        auto sock = listener_.accept();
        if (!sock) {
            if (!running_.load()) return;
            continue;
        }
        auto conn = std::make_shared<PeerConnection>();
        conn->socket = std::move(sock.value());
        {
            std::lock_guard<std::mutex> lock(conn_mutex_);
            // Reap joined inbound connections so long-lived containers do not
            // accumulate dead entries.
            std::erase_if(inbound_, [](const auto& c) { return !c->open.load() && !c->reader.joinable(); });
            inbound_.push_back(conn);
        }
        conn->reader = std::thread([this, conn] { reader_loop(conn); });
    }
}

void MessageTransport::reader_loop(std::shared_ptr<PeerConnection> conn) {
    while (conn->open.load()) {
        auto frame = read_frame(conn->socket.fd(), max_frame_bytes_, -1);
        if (!frame) break;
        handle_frame(conn, std::move(frame.value()));
    }
    conn->open.store(false);
    if (!conn->pool_key.empty()) drop_connection(conn->pool_key, conn.get());
}

void MessageTransport::handle_frame(const std::shared_ptr<PeerConnection>& conn, Bytes frame) {
    auto decoded = decode_envelope(std::string_view(reinterpret_cast<const char*>(frame.data()), frame.size()));
    if (!decoded) {
        DG_LOG_WARN("transport", "dropping undecodable frame: " + decoded.error().to_string());
        return;
    }
    Envelope envelope = std::move(decoded.value());

    if (envelope.is_reply()) {
        std::shared_ptr<PendingCall> call;
        {
            std::lock_guard<std::mutex> lock(pending_mutex_);
            auto it = pending_.find(envelope.reply_to);
            if (it != pending_.end()) {
                call = it->second;
                pending_.erase(it);
            }
        }
        if (call) {
            std::lock_guard<std::mutex> lock(call->mutex);
            call->done = true;
            call->result = std::move(envelope);
            call->cv.notify_all();
        }
        return;
    }

    std::weak_ptr<PeerConnection> weak = conn;
    ReplySink sink = [this, weak](Envelope reply) {
        auto target = weak.lock();
        if (!target || !target->open.load()) return;  // requester is gone; nothing to do
        Bytes frame_bytes = to_bytes(encode_envelope(reply));
        if (auto st = target->send(frame_bytes); !st) {
            DG_LOG_DEBUG("transport", "reply send failed: " + st.error().to_string());
        }
    };
    if (handler_) handler_(std::move(envelope), std::move(sink));
}

std::shared_ptr<MessageTransport::PeerConnection> MessageTransport::get_connection(const Endpoint& peer,
                                                                                   TimestampMs deadline) {
    const std::string key = peer.to_string();
    {
        std::lock_guard<std::mutex> lock(conn_mutex_);
        auto it = outbound_.find(key);
        if (it != outbound_.end() && it->second->open.load()) return it->second;
    }
    // Dial with retry until the deadline; a restarting peer becomes reachable
    // partway through.
    while (running_.load()) {
        std::int64_t remaining = deadline - now_ms();
        if (remaining <= 0) return nullptr;
        auto sock = tcp_connect(peer, static_cast<int>(std::min<std::int64_t>(remaining, 1000)));
        if (sock) {
            auto conn = std::make_shared<PeerConnection>();
            conn->socket = std::move(sock.value());
            conn->pool_key = key;
            {
                std::lock_guard<std::mutex> lock(conn_mutex_);
                auto it = outbound_.find(key);
                if (it != outbound_.end() && it->second->open.load()) {
                    // Lost the race; use the existing one.
                    conn->open.store(false);
                    return it->second;
                }
                outbound_[key] = conn;
            }
            conn->reader = std::thread([this, conn] { reader_loop(conn); });
            return conn;
        }
        remaining = deadline - now_ms();
        if (remaining <= 100) return nullptr;
        sleep_ms(std::min<std::int64_t>(remaining - 50, 100));
    }
    return nullptr;
}

void MessageTransport::drop_connection(const std::string& key, PeerConnection* which) {
    std::shared_ptr<PeerConnection> dead;
    {
        std::lock_guard<std::mutex> lock(conn_mutex_);
        auto it = outbound_.find(key);
        if (it != outbound_.end() && it->second.get() == which) {
            dead = it->second;
            outbound_.erase(it);
        }
    }
    if (dead) dead->reader.detach();
}

Result<Envelope> MessageTransport::call(const Endpoint& peer, Envelope request, int timeout_ms) {
    if (request.payload.size() > max_payload_bytes_) {
        return make_error(errc::payload_too_large,
                          "payload of " + std::to_string(request.payload.size()) + " bytes exceeds cap of " +
                              std::to_string(max_payload_bytes_));
    }
    TimestampMs deadline = now_ms() + timeout_ms;
    auto call_state = std::make_shared<PendingCall>();
    {
        std::lock_guard<std::mutex> lock(pending_mutex_);
        pending_[request.message_id] = call_state;
    }
    auto forget = [this, &request] {
        std::lock_guard<std::mutex> lock(pending_mutex_);
        pending_.erase(request.message_id);
    };

    Bytes frame = to_bytes(encode_envelope(request));
    // The first send may race a peer restart; retry the dial until deadline.
    while (true) {
        auto conn = get_connection(peer, deadline);
        if (!conn) {
            forget();
            return make_error(errc::timeout, "peer " + peer.to_string() + " unreachable within deadline");
        }
        if (conn->send(frame)) break;
        drop_connection(peer.to_string(), conn.get());
        if (now_ms() >= deadline) {
            forget();
            return make_error(errc::timeout, "send to " + peer.to_string() + " failed within deadline");
        }
    }

    std::unique_lock<std::mutex> lock(call_state->mutex);
    call_state->cv.wait_until(lock, std::chrono::system_clock::time_point(std::chrono::milliseconds(deadline)),
                              [&] { return call_state->done; });
    if (!call_state->done) {
        lock.unlock();
        forget();
        return make_error(errc::timeout,
                          "no reply from " + peer.to_string() + " within " + std::to_string(timeout_ms) + " ms");
    }
    return std::move(call_state->result);
}

Status MessageTransport::post(const Endpoint& peer, Envelope message) {
    if (message.payload.size() > max_payload_bytes_) {
        return make_error(errc::payload_too_large, "payload exceeds cap");
    }
    auto conn = get_connection(peer, now_ms() + 1000);
    if (!conn) return make_error(errc::connection_failed, "peer " + peer.to_string() + " unreachable");
    Bytes frame = to_bytes(encode_envelope(message));
    return conn->send(frame);
}

}  // namespace deskgrid
