#pragma once

#include "deskgrid/common.hpp"

#include <cstdint>
#include <string>

namespace deskgrid {

// Envelope wire contract: a frame is a 4-byte big-endian length followed by
// that many bytes of UTF-8 JSON. The JSON object carries the fields below,
// with the payload as base64. The framing is the contract; the codec behind
// it is swappable.

inline constexpr std::size_t kDefaultMaxPayloadBytes = 8 * 1024 * 1024;
// JSON + base64 overhead on top of the payload cap.
inline constexpr std::size_t kMaxEnvelopeFrameBytes = 12 * 1024 * 1024;

struct Envelope {
    std::string message_id;
    std::string source_node;
    std::string target_node;
    std::string target_service;
    std::string kind;
    Bytes payload;
    std::string reply_to;  // empty when this is not a reply

    bool is_reply() const { return !reply_to.empty(); }
    bool is_error() const { return kind == "error"; }
};

/// Builds a request envelope with a fresh message id.
Envelope make_request(const std::string& source_node, const std::string& target_node,
                      const std::string& target_service, const std::string& kind, Bytes payload);

/// Builds the reply to `request`, correlated via reply_to.
Envelope make_reply(const Envelope& request, const std::string& self_node, Bytes payload);

/// Builds an error reply carrying {"code","message"} as payload.
Envelope make_error_reply(const Envelope& request, const std::string& self_node, const Error& error);

/// Extracts the Error from an error reply payload.
Error decode_error_payload(const Envelope& reply);

std::string encode_envelope(const Envelope& envelope);
Result<Envelope> decode_envelope(std::string_view json_text);

/// 4-byte big-endian length prefix helpers, shared by the envelope protocol
/// and the file transfer protocol.
void append_u32_be(Bytes& out, std::uint32_t value);
std::uint32_t read_u32_be(const std::uint8_t* data);

}  // namespace deskgrid
