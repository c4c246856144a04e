#include "deskgrid/common.hpp"

#include <doctest.h>

#include "harness.hpp"

#include <set>

using namespace deskgrid;

TEST_CASE("base64 round-trips arbitrary bytes") {
    auto rng = harness::seeded_rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        auto data = harness::random_bytes(rng, rng() % 300);
        auto decoded = base64_decode(base64_encode(data));
        REQUIRE(decoded.ok());
        CHECK(decoded.value() == data);
    }
}

TEST_CASE("base64 rejects malformed input") {
    CHECK_FALSE(base64_decode("abc").ok());
    CHECK_FALSE(base64_decode("ab=c").ok());
    CHECK_FALSE(base64_decode("a!bc").ok());
    CHECK(base64_decode("").ok());
}

TEST_CASE("sha256 of the empty input is the known constant") {
    CHECK(sha256_hex(Bytes{}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex(std::string_view{"abc"}) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("fnv1a64 is deterministic and spreads") {
    CHECK(fnv1a64(to_bytes("")) == 14695981039346656037ULL);
    CHECK(fnv1a64(to_bytes("a")) == fnv1a64(to_bytes("a")));
    CHECK(fnv1a64(to_bytes("a")) != fnv1a64(to_bytes("b")));
}

TEST_CASE("endpoint parsing") {
    auto ok = parse_endpoint("127.0.0.1:8080");
    REQUIRE(ok.ok());
    CHECK(ok.value().host == "127.0.0.1");
    CHECK(ok.value().port == 8080);
    CHECK(ok.value().to_string() == "127.0.0.1:8080");

    CHECK_FALSE(parse_endpoint("nohost").ok());
    CHECK_FALSE(parse_endpoint(":80").ok());
    CHECK_FALSE(parse_endpoint("h:").ok());
    CHECK_FALSE(parse_endpoint("h:99999").ok());
    CHECK_FALSE(parse_endpoint("h:12a").ok());
}

TEST_CASE("uuids are unique and well-formed") {
    std::set<std::string> seen;
    for (int i = 0; i < 1000; ++i) {
        std::string id = new_uuid();
        CHECK(id.size() == 36);
        CHECK(id[8] == '-');
        CHECK(id[14] == '4');  // version nibble
        CHECK(seen.insert(id).second);
    }
}

TEST_CASE("timestamps are nondecreasing") {
    TimestampMs a = now_ms();
    TimestampMs b = now_ms();
    CHECK(b >= a);
}
