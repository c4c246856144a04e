#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace deskgrid {

using Bytes = std::vector<std::uint8_t>;

// -------------------------------------------------------------------------
// Errors. Failures travel as values; the code is a stable machine-readable
// name (also used verbatim in error replies on the wire).
// -------------------------------------------------------------------------

struct Error {
    std::string code;
    std::string message;

    std::string to_string() const { return code + ": " + message; }
};

inline Error make_error(std::string code, std::string message) {
    return Error{std::move(code), std::move(message)};
}

/// Value-or-Error result. Minimal on purpose: the two accessors throw on
/// misuse, which is a programming bug, not a runtime condition.
template <typename T>
class Result {
public:
    Result(T value) : value_(std::move(value)) {}
    Result(Error error) : value_(std::move(error)) {}

    bool ok() const { return std::holds_alternative<T>(value_); }
    explicit operator bool() const { return ok(); }

    T& value() {
        if (!ok()) throw std::logic_error("Result::value on error: " + error().to_string());
        return std::get<T>(value_);
    }
    const T& value() const {
        if (!ok()) throw std::logic_error("Result::value on error: " + error().to_string());
        return std::get<T>(value_);
    }
    const Error& error() const {
        if (ok()) throw std::logic_error("Result::error on value");
        return std::get<Error>(value_);
    }

    T value_or(T fallback) const { return ok() ? std::get<T>(value_) : std::move(fallback); }

private:
    std::variant<T, Error> value_;
};

/// Result for operations with no payload.
class Status {
public:
    Status() = default;
    Status(Error error) : error_(std::move(error)) {}

    static Status success() { return Status(); }

    bool ok() const { return !error_.has_value(); }
    explicit operator bool() const { return ok(); }
    const Error& error() const {
        if (ok()) throw std::logic_error("Status::error on success");
        return *error_;
    }

private:
    std::optional<Error> error_;
};

// Stable error codes shared across services.
namespace errc {
inline constexpr const char* bind_failure = "BindFailure";
inline constexpr const char* service_load_failure = "ServiceLoadFailure";
inline constexpr const char* unknown_service = "UnknownService";
inline constexpr const char* unknown_node = "UnknownNode";
inline constexpr const char* timeout = "Timeout";
inline constexpr const char* already_installed = "AlreadyInstalled";
inline constexpr const char* not_installed = "NotInstalled";
inline constexpr const char* drain_timeout = "DrainTimeout";
inline constexpr const char* license_rejected = "LicenseRejected";
inline constexpr const char* stale_heartbeat = "StaleHeartbeat";
inline constexpr const char* no_seed_reachable = "NoSeedReachable";
inline constexpr const char* unauthenticated = "Unauthenticated";
inline constexpr const char* invalid_request = "InvalidRequest";
inline constexpr const char* channel_unreachable = "ChannelUnreachable";
inline constexpr const char* auth_failed = "AuthFailed";
inline constexpr const char* not_found = "NotFound";
inline constexpr const char* digest_mismatch = "DigestMismatch";
inline constexpr const char* duplicate_scheme = "DuplicateScheme";
inline constexpr const char* unknown_scheme = "UnknownScheme";
inline constexpr const char* stage_failure = "StageFailure";
inline constexpr const char* unknown_application = "UnknownApplication";
inline constexpr const char* unknown_operation = "UnknownOperation";
inline constexpr const char* unauthorized = "Unauthorized";
inline constexpr const char* unknown_job = "UnknownJob";
inline constexpr const char* illegal_transition = "IllegalTransition";
inline constexpr const char* operation_error = "OperationError";
inline constexpr const char* node_lost = "NodeLost";
inline constexpr const char* app_stopped = "AppStopped";
inline constexpr const char* unknown_model = "UnknownModel";
inline constexpr const char* already_started = "AlreadyStarted";
inline constexpr const char* not_started = "NotStarted";
inline constexpr const char* join_timeout = "JoinTimeout";
inline constexpr const char* aborted = "Aborted";
inline constexpr const char* missing_intermediate = "MissingIntermediate";
inline constexpr const char* undeclared_placeholder = "UndeclaredPlaceholder";
inline constexpr const char* empty_domain = "EmptyDomain";
inline constexpr const char* provider_unavailable = "ProviderUnavailable";
inline constexpr const char* capacity_exceeded = "CapacityExceeded";
inline constexpr const char* store_corrupt = "StoreCorrupt";
inline constexpr const char* store_unavailable = "StoreUnavailable";
inline constexpr const char* denied = "Denied";
inline constexpr const char* connection_failed = "ConnectionFailed";
inline constexpr const char* payload_too_large = "PayloadTooLarge";
inline constexpr const char* invalid_envelope = "InvalidEnvelope";
}  // namespace errc

// -------------------------------------------------------------------------
// Time. Wall-clock timestamps are milliseconds since the Unix epoch, UTC.
// Reservation windows use whole seconds.
// -------------------------------------------------------------------------

using TimestampMs = std::int64_t;
using TimestampS = std::int64_t;

TimestampMs now_ms();
inline TimestampS now_s() { return now_ms() / 1000; }

void sleep_ms(std::int64_t ms);

// -------------------------------------------------------------------------
// Identifiers and endpoints
// -------------------------------------------------------------------------

/// Random v4 UUID in canonical 8-4-4-4-12 hex form.
std::string new_uuid();

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;

    std::string to_string() const { return host + ":" + std::to_string(port); }
    bool operator==(const Endpoint&) const = default;
};

/// Parses "host:port". Returns error on malformed input.
Result<Endpoint> parse_endpoint(std::string_view text);

// -------------------------------------------------------------------------
// Encoding helpers
// -------------------------------------------------------------------------

std::string base64_encode(const Bytes& data);
Result<Bytes> base64_decode(std::string_view text);

std::string to_hex(const Bytes& data);

/// SHA-256 of the given bytes, lowercase hex.
std::string sha256_hex(const Bytes& data);
std::string sha256_hex(std::string_view data);

/// FNV-1a 64-bit. Used for stable cross-node partitioning.
std::uint64_t fnv1a64(const Bytes& data);

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_string(const Bytes& b) { return std::string(b.begin(), b.end()); }

// -------------------------------------------------------------------------
// Logging. Plain stderr lines, filtered by DESKGRID_LOG (error|warn|info|debug).
// -------------------------------------------------------------------------

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

void log_line(LogLevel level, const std::string& component, const std::string& message);
bool log_enabled(LogLevel level);

#define DG_LOG_DEBUG(component, msg) \
    do { if (::deskgrid::log_enabled(::deskgrid::LogLevel::Debug)) ::deskgrid::log_line(::deskgrid::LogLevel::Debug, (component), (msg)); } while (0)
#define DG_LOG_INFO(component, msg) \
    do { if (::deskgrid::log_enabled(::deskgrid::LogLevel::Info)) ::deskgrid::log_line(::deskgrid::LogLevel::Info, (component), (msg)); } while (0)
#define DG_LOG_WARN(component, msg) \
    do { if (::deskgrid::log_enabled(::deskgrid::LogLevel::Warn)) ::deskgrid::log_line(::deskgrid::LogLevel::Warn, (component), (msg)); } while (0)
#define DG_LOG_ERROR(component, msg) \
    do { if (::deskgrid::log_enabled(::deskgrid::LogLevel::Error)) ::deskgrid::log_line(::deskgrid::LogLevel::Error, (component), (msg)); } while (0)

}  // namespace deskgrid
