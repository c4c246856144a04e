#include "deskgrid/common.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <random>
#include <thread>

namespace deskgrid {

TimestampMs now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

void sleep_ms(std::int64_t ms) {
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
}

std::string new_uuid() {
    thread_local std::mt19937_64 rng{std::random_device{}()};
    std::uint64_t hi = rng();
    std::uint64_t lo = rng();
    // v4 / variant 1 bits
    hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
    lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;

    char buf[37];
    std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx",
                  static_cast<unsigned>(hi >> 32), static_cast<unsigned>((hi >> 16) & 0xffff),
                  static_cast<unsigned>(hi & 0xffff), static_cast<unsigned>(lo >> 48),
                  static_cast<unsigned long long>(lo & 0xffffffffffffULL));
    return std::string(buf);
}

Result<Endpoint> parse_endpoint(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 >= text.size()) {
        return make_error(errc::invalid_request, "malformed endpoint: " + std::string(text));
    }
    Endpoint ep;
    ep.host = std::string(text.substr(0, colon));
    long port = 0;
    for (char c : text.substr(colon + 1)) {
        if (c < '0' || c > '9') return make_error(errc::invalid_request, "malformed port in: " + std::string(text));
        port = port * 10 + (c - '0');
        if (port > 65535) return make_error(errc::invalid_request, "port out of range in: " + std::string(text));
    }
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

namespace {
constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::array<std::int8_t, 256> build_b64_reverse() {
    std::array<std::int8_t, 256> rev{};
    rev.fill(-1);
    for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kB64Alphabet[i])] = static_cast<std::int8_t>(i);
    return rev;
}
}  // namespace

std::string base64_encode(const Bytes& data) {
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= data.size()) {
        std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
        i += 3;
    }
    std::size_t rem = data.size() - i;
    if (rem == 1) {
        std::uint32_t v = data[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

Result<Bytes> base64_decode(std::string_view text) {
    static const auto rev = build_b64_reverse();
    if (text.size() % 4 != 0) return make_error(errc::invalid_envelope, "base64 length not a multiple of 4");
    Bytes out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        std::uint32_t v = 0;
        for (int j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) return make_error(errc::invalid_envelope, "bad base64 padding");
                ++pad;
                v <<= 6;
                continue;
            }
            if (pad > 0) return make_error(errc::invalid_envelope, "bad base64 padding");
            std::int8_t d = rev[static_cast<unsigned char>(c)];
            if (d < 0) return make_error(errc::invalid_envelope, "bad base64 character");
            v = (v << 6) | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
    }
    return out;
}

std::string to_hex(const Bytes& data) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(data.size() * 2);
    for (std::uint8_t b : data) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 0xf]);
    }
    return out;
}

std::string sha256_hex(const Bytes& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
    return to_hex(Bytes(digest, digest + len));
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
    return to_hex(Bytes(digest, digest + len));
}

std::uint64_t fnv1a64(const Bytes& data) {
    std::uint64_t hash = 14695981039346656037ULL;
    for (std::uint8_t b : data) {
        hash ^= b;
        hash *= 1099511628211ULL;
    }
    return hash;
}

namespace {
LogLevel current_log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("DESKGRID_LOG");
        if (!env) return LogLevel::Warn;
        std::string_view s(env);
        if (s == "debug") return LogLevel::Debug;
        if (s == "info") return LogLevel::Info;
        if (s == "error") return LogLevel::Error;
        return LogLevel::Warn;
    }();
    return level;
}

const char* level_tag(LogLevel level) {
    switch (level) {
        case LogLevel::Debug: return "DBG";
        case LogLevel::Info: return "INF";
        case LogLevel::Warn: return "WRN";
        case LogLevel::Error: return "ERR";
    }
    return "???";
}

std::mutex log_mutex;
}  // namespace

bool log_enabled(LogLevel level) {
    return static_cast<int>(level) >= static_cast<int>(current_log_level());
}

void log_line(LogLevel level, const std::string& component, const std::string& message) {
    std::lock_guard<std::mutex> lock(log_mutex);
    std::fprintf(stderr, "%lld %s [%s] %s\n", static_cast<long long>(now_ms()), level_tag(level),
                 component.c_str(), message.c_str());
}

}  // namespace deskgrid
