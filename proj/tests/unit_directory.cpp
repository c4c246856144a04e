#include "deskgrid/directory.hpp"

#include <doctest.h>

#include "harness.hpp"

#include <algorithm>

using namespace deskgrid;
using namespace deskgrid::directory;

namespace {
MembershipRecord record(const std::string& id, std::vector<std::string> services = {"executor"}) {
    MembershipRecord r;
    r.node_id = id;
    r.endpoint = "127.0.0.1:1";
    r.services = std::move(services);
    return r;
}

Heartbeat beat(const std::string& id, std::int64_t seq) {
    Heartbeat hb;
    hb.node_id = id;
    hb.sequence = seq;
    hb.stats.cpu_usage_percent = static_cast<double>(seq % 100);
    return hb;
}
}  // namespace

TEST_CASE("register and query the catalogue") {
    MembershipCatalogue cat(Timeouts::from_interval(1000), 0);
    CHECK(cat.register_node(record("n1"), 1000).ok());
    CHECK(cat.size() == 1);
    auto alive = cat.query("");
    REQUIRE(alive.size() == 1);
    CHECK(alive[0].state == NodeState::Alive);

    CHECK(cat.register_node(record("n2", {"scheduler"}), 1000).ok());
    CHECK(cat.query("executor").size() == 1);
    CHECK(cat.query("scheduler").size() == 1);
    CHECK(cat.query("").size() == 2);
    CHECK(cat.query("nothing").empty());
}

TEST_CASE("license gate rejects the node beyond the cap") {
    MembershipCatalogue cat(Timeouts::from_interval(1000), 3);
    CHECK(cat.register_node(record("n1"), 0).ok());
    CHECK(cat.register_node(record("n2"), 0).ok());
    CHECK(cat.register_node(record("n3"), 0).ok());
    auto fourth = cat.register_node(record("n4"), 0);
    REQUIRE_FALSE(fourth.ok());
    CHECK(fourth.error().code == errc::license_rejected);
    CHECK(cat.alive_plus_suspect_count() == 3);

    // Re-registering an existing node does not consume a license slot.
    CHECK(cat.register_node(record("n2"), 5).ok());
    CHECK(cat.alive_plus_suspect_count() == 3);
}

TEST_CASE("re-register after dead purge is accepted as fresh") {
    Timeouts t{300, 1000, 2000};
    MembershipCatalogue cat(t, 1);
    CHECK(cat.register_node(record("n1"), 0).ok());
    cat.sweep(1500);  // alive → suspect → dead in one pass
    auto dead = cat.find("n1");
    REQUIRE(dead.has_value());
    CHECK(dead->state == NodeState::Dead);
    // Dead nodes do not count against the license, so the fresh register fits.
    CHECK(cat.register_node(record("n1"), 1600).ok());
    CHECK(cat.find("n1")->state == NodeState::Alive);
}

TEST_CASE("heartbeats update records and reject staleness") {
    MembershipCatalogue cat(Timeouts::from_interval(1000), 0);
    CHECK(cat.register_node(record("n1"), 0).ok());

    CHECK(cat.apply_heartbeat(beat("n1", 1), 100).ok());
    CHECK(cat.find("n1")->heartbeat_sequence == 1);

    auto replay = cat.apply_heartbeat(beat("n1", 1), 200);
    REQUIRE_FALSE(replay.ok());
    CHECK(replay.error().code == errc::stale_heartbeat);
    CHECK(cat.find("n1")->last_heartbeat_at == 100);  // unchanged

    auto unknown = cat.apply_heartbeat(beat("ghost", 1), 200);
    REQUIRE_FALSE(unknown.ok());
    CHECK(unknown.error().code == errc::unknown_node);
}

TEST_CASE("suspect nodes return to alive on a heartbeat") {
    Timeouts t{300, 1000, 2000};
    MembershipCatalogue cat(t, 0);
    CHECK(cat.register_node(record("n1"), 0).ok());
    auto transitions = cat.sweep(400);
    REQUIRE(transitions.size() == 1);
    CHECK(cat.find("n1")->state == NodeState::Suspect);
    CHECK(cat.apply_heartbeat(beat("n1", 1), 450).ok());
    CHECK(cat.find("n1")->state == NodeState::Alive);
}

TEST_CASE("sweep walks alive → suspect → dead → purged at the thresholds") {
    Timeouts t{300, 1000, 2000};
    MembershipCatalogue cat(t, 0);
    CHECK(cat.register_node(record("n1"), 0).ok());

    CHECK(cat.sweep(300).empty());  // exactly at the threshold: not yet
    auto suspect = cat.sweep(301);
    REQUIRE(suspect.size() == 1);
    CHECK(suspect[0].to == NodeState::Suspect);

    CHECK(cat.sweep(301).empty());  // idempotent without time passing

    auto dead = cat.sweep(1001);
    REQUIRE(dead.size() == 1);
    CHECK(dead[0].to == NodeState::Dead);
    CHECK(cat.query("").empty());  // dead nodes never surface in queries

    auto purged = cat.sweep(2001);
    REQUIRE(purged.size() == 1);
    CHECK(purged[0].purged);
    CHECK(cat.size() == 0);
}

TEST_CASE("query results are sorted by node id") {
    MembershipCatalogue cat(Timeouts::from_interval(1000), 0);
    for (const auto* id : {"zeta", "alpha", "mid"}) CHECK(cat.register_node(record(id), 0).ok());
    auto all = cat.query("");
    REQUIRE(all.size() == 3);
    CHECK(all[0].node_id == "alpha");
    CHECK(all[2].node_id == "zeta");
}

TEST_CASE("heartbeat streams commute: any permutation lands on the highest sequence") {
    auto rng = harness::seeded_rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Heartbeat> stream;
        for (std::int64_t seq = 1; seq <= 12; ++seq) stream.push_back(beat("n1", seq));

        MembershipCatalogue sorted_cat(Timeouts::from_interval(1000), 0);
        CHECK(sorted_cat.register_node(record("n1"), 0).ok());
        for (const auto& hb : stream) (void)sorted_cat.apply_heartbeat(hb, 50);

        std::shuffle(stream.begin(), stream.end(), rng);
        MembershipCatalogue shuffled_cat(Timeouts::from_interval(1000), 0);
        CHECK(shuffled_cat.register_node(record("n1"), 0).ok());
        for (const auto& hb : stream) (void)shuffled_cat.apply_heartbeat(hb, 50);

        auto a = sorted_cat.find("n1");
        auto b = shuffled_cat.find("n1");
        REQUIRE(a.has_value());
        REQUIRE(b.has_value());
        CHECK(a->heartbeat_sequence == b->heartbeat_sequence);
        CHECK(a->last_stats.cpu_usage_percent == b->last_stats.cpu_usage_percent);
    }
}

TEST_CASE("catalogue snapshot round-trips") {
    MembershipCatalogue cat(Timeouts::from_interval(1000), 0);
    CHECK(cat.register_node(record("n1"), 10).ok());
    CHECK(cat.register_node(record("n2", {"scheduler", "storage"}), 20).ok());
    MembershipCatalogue restored(Timeouts::from_interval(1000), 0);
    restored.restore(cat.snapshot());
    CHECK(restored.size() == 2);
    CHECK(restored.find("n2")->services == std::vector<std::string>{"scheduler", "storage"});
}
