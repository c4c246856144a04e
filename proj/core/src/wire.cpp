#include "deskgrid/wire.hpp"

#include <nlohmann/json.hpp>

namespace deskgrid {

using nlohmann::json;

Envelope make_request(const std::string& source_node, const std::string& target_node,
                      const std::string& target_service, const std::string& kind, Bytes payload) {
    Envelope e;
    e.message_id = new_uuid();
    e.source_node = source_node;
    e.target_node = target_node;
    e.target_service = target_service;
    e.kind = kind;
    e.payload = std::move(payload);
    return e;
}

Envelope make_reply(const Envelope& request, const std::string& self_node, Bytes payload) {
    Envelope e;
    e.message_id = new_uuid();
    e.source_node = self_node;
    e.target_node = request.source_node;
    e.target_service = "";
    e.kind = "reply";
    e.payload = std::move(payload);
    e.reply_to = request.message_id;
    return e;
}

Envelope make_error_reply(const Envelope& request, const std::string& self_node, const Error& error) {
    json body = {{"code", error.code}, {"message", error.message}};
    Envelope e = make_reply(request, self_node, to_bytes(body.dump()));
    e.kind = "error";
    return e;
}

Error decode_error_payload(const Envelope& reply) {
    json body = json::parse(to_string(reply.payload), nullptr, false);
    if (body.is_discarded() || !body.contains("code")) {
        return make_error(errc::invalid_envelope, "malformed error reply");
    }
    return make_error(body.value("code", ""), body.value("message", ""));
}

std::string encode_envelope(const Envelope& envelope) {
    json doc = {
        {"message_id", envelope.message_id},
        {"source_node", envelope.source_node},
        {"target_node", envelope.target_node},
        {"target_service", envelope.target_service},
        {"kind", envelope.kind},
        {"payload", base64_encode(envelope.payload)},
    };
    if (!envelope.reply_to.empty()) doc["reply_to"] = envelope.reply_to;
    return doc.dump();
}

Result<Envelope> decode_envelope(std::string_view json_text) {
    json doc = json::parse(json_text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        return make_error(errc::invalid_envelope, "frame is not a JSON object");
    }
    Envelope e;
    e.message_id = doc.value("message_id", "");
    e.source_node = doc.value("source_node", "");
    e.target_node = doc.value("target_node", "");
    e.target_service = doc.value("target_service", "");
    e.kind = doc.value("kind", "");
    e.reply_to = doc.value("reply_to", "");
    if (e.message_id.empty() || e.kind.empty()) {
        return make_error(errc::invalid_envelope, "missing message_id or kind");
    }
    auto payload = base64_decode(doc.value("payload", ""));
    if (!payload) return payload.error();
    e.payload = std::move(payload.value());
    return e;
}

void append_u32_be(Bytes& out, std::uint32_t value) {
    out.push_back(static_cast<std::uint8_t>((value >> 24) & 0xff));
    out.push_back(static_cast<std::uint8_t>((value >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((value >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(value & 0xff));
}

std::uint32_t read_u32_be(const std::uint8_t* data) {
    return (static_cast<std::uint32_t>(data[0]) << 24) | (static_cast<std::uint32_t>(data[1]) << 16) |
           (static_cast<std::uint32_t>(data[2]) << 8) | static_cast<std::uint32_t>(data[3]);
}

}  // namespace deskgrid
