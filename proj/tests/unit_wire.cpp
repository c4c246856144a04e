#include "deskgrid/wire.hpp"

#include <doctest.h>

#include "harness.hpp"

using namespace deskgrid;

TEST_CASE("envelope codec round-trips arbitrary payloads") {
    auto rng = harness::seeded_rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Envelope e = make_request("node-a", "node-b", "scheduler", "exec.submit",
                                  harness::random_bytes(rng, rng() % 2048));
        if (trial % 3 == 0) e.reply_to = new_uuid();
        auto decoded = decode_envelope(encode_envelope(e));
        REQUIRE(decoded.ok());
        CHECK(decoded.value().message_id == e.message_id);
        CHECK(decoded.value().source_node == e.source_node);
        CHECK(decoded.value().target_node == e.target_node);
        CHECK(decoded.value().target_service == e.target_service);
        CHECK(decoded.value().kind == e.kind);
        CHECK(decoded.value().payload == e.payload);
        CHECK(decoded.value().reply_to == e.reply_to);
    }
}

TEST_CASE("decode rejects garbage") {
    CHECK_FALSE(decode_envelope("not json").ok());
    CHECK_FALSE(decode_envelope("[1,2]").ok());
    CHECK_FALSE(decode_envelope("{}").ok());  // missing message_id/kind
}

TEST_CASE("replies correlate to their requests") {
    Envelope request = make_request("a", "b", "directory", "dir.query", to_bytes("{}"));
    Envelope reply = make_reply(request, "b", to_bytes("{\"ok\":true}"));
    CHECK(reply.reply_to == request.message_id);
    CHECK(reply.target_node == "a");
    CHECK(reply.is_reply());
    CHECK_FALSE(reply.is_error());

    Envelope error = make_error_reply(request, "b", make_error(errc::unknown_service, "nope"));
    CHECK(error.is_error());
    Error decoded = decode_error_payload(error);
    CHECK(decoded.code == errc::unknown_service);
    CHECK(decoded.message == "nope");
}

TEST_CASE("u32 big-endian helpers") {
    Bytes buf;
    append_u32_be(buf, 0x01020304u);
    REQUIRE(buf.size() == 4);
    CHECK(buf[0] == 0x01);
    CHECK(buf[3] == 0x04);
    CHECK(read_u32_be(buf.data()) == 0x01020304u);
}
