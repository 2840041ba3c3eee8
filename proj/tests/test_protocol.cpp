#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "phenoauth/protocol.hpp"
#include "phenoauth/transport.hpp"

using namespace phenoauth;

namespace {

PufConfig proto_cfg() {
    PufConfig c;
    c.image_width = 32;
    c.image_height = 32;  // 8192-cell regions
    c.cell_count = 8192 * 4;
    return c;
}

struct Pair {
    Device a;
    Device b;
    Rng rng{40400};

    Pair(uint64_t seed_a = 11, uint64_t seed_b = 22)
        : a("alice", seed_a, proto_cfg()), b("bob", seed_b, proto_cfg()) {
        enroll_group({&a, &b}, rng);
    }

    SessionReport session(Device& initiator, Device& responder, Interposer hook = {}) {
        MemoryChannel ch(std::move(hook));
        EnvParams env{rng.below(3) == 0 ? 0u : 1u, static_cast<uint32_t>(rng.below(2))};
        return run_session(initiator, responder, env, rng, ch);
    }
};

bool contains_subsequence(const std::string& haystack, const Bytes& needle) {
    if (needle.empty()) return true;
    auto it = std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end());
    return it != haystack.end();
}

}  // namespace

TEST_CASE("enrollment leaves both sides with identical pairing state") {
    Pair p;
    REQUIRE(p.a.nvm().peers.size() == 1);
    REQUIRE(p.b.nvm().peers.size() == 1);
    const PeerRecord& ra = p.a.nvm().peers.front();
    const PeerRecord& rb = p.b.nvm().peers.front();
    CHECK(ra.challenge == rb.challenge);
    CHECK(ra.pair_mask == rb.pair_mask);
    CHECK(ra.peer_id == p.b.id());
    CHECK(rb.peer_id == p.a.id());
    CHECK(ra.label == "bob");
    CHECK(rb.label == "alice");

    // pair_mask XOR own stable response recovers the peer's stable response.
    Rng probe(7);
    StableChallenge sc_a;
    sc_a.cell_indices = p.a.nvm().stable_map.at(ra.challenge.region_start);
    StableChallenge sc_b;
    sc_b.cell_indices = p.b.nvm().stable_map.at(rb.challenge.region_start);
    EnvParams nominal = p.a.nominal_env();
    StableResponse sr_a = p.a.puf().read_stable(sc_a, nominal, probe);
    StableResponse sr_b = p.b.puf().read_stable(sc_b, nominal, probe);
    CHECK((ra.pair_mask ^ sr_a) == sr_b);
    CHECK((rb.pair_mask ^ sr_b) == sr_a);
}

TEST_CASE("enrollment NVM never contains a raw stable response") {
    Pair p;
    Rng probe(8);
    EnvParams nominal = p.a.nominal_env();
    for (Device* d : {&p.a, &p.b}) {
        std::string snapshot = d->nvm_snapshot();
        for (const auto& [start, indices] : d->nvm().stable_map) {
            StableChallenge sc;
            sc.cell_indices = indices;
            StableResponse sr = d->puf().read_stable(sc, nominal, probe);
            CHECK_FALSE(contains_subsequence(snapshot, sr.bytes()));
            std::string b64 = base64_encode(sr.bytes());
            CHECK(snapshot.find(b64) == std::string::npos);
        }
    }
}

TEST_CASE("a group of three ends with two peer records and one model each") {
    Rng rng(555);
    Device d0("dev0", 71, proto_cfg()), d1("dev1", 72, proto_cfg()), d2("dev2", 73, proto_cfg());
    enroll_group({&d0, &d1, &d2}, rng);
    for (Device* d : {&d0, &d1, &d2}) {
        CHECK(d->nvm().peers.size() == 2);
        CHECK(d->nvm().model_trained);
        CHECK(d->nvm().model.labels.size() == 3);
        for (const char* l : {"dev0", "dev1", "dev2"}) CHECK(d->nvm().model.has_label(l));
    }

    // Any pair authenticates in either direction.
    for (auto [x, y] : std::vector<std::pair<Device*, Device*>>{{&d0, &d1}, {&d1, &d2}, {&d2, &d0}}) {
        MemoryChannel ch;
        SessionReport rep = run_session(*x, *y, {0, 0}, rng, ch);
        CHECK(rep.initiator_outcome.success);
        CHECK(rep.responder_outcome.success);
    }
}

TEST_CASE("enrollment requests carry fresh challenges and the full dataset") {
    Rng rng(602);
    Device d("carol", 88, proto_cfg());
    EnrollRequest r1 = d.enroll_initiate(rng);
    EnrollRequest r2 = d.enroll_initiate(rng);
    CHECK_FALSE(r1.challenge == r2.challenge);

    // Stable response is the configured l bits; dataset cardinality follows
    // the (envs x challenges x repeats) grid.
    CHECK(r1.stable_response.size() * 8 == d.config().stable_bits);
    size_t challenges = std::min<uint64_t>(6, d.puf().geometry().total_slots());
    CHECK(r1.dataset.size() == challenges * d.config().full_env_grid().size() * 2);
    for (const auto& item : r1.dataset.items) CHECK(item.label == "carol");
}

TEST_CASE("enrollment messages are rejected outside the enrollment phase") {
    Pair p;
    Rng rng(556);
    Device late("late", 99, proto_cfg());
    EnrollRequest req = late.enroll_initiate(rng);
    CHECK_THROWS_AS(p.a.enroll_respond(req, rng), ProtocolError);
    CHECK_THROWS_AS(p.a.enroll_finalize(EnrollResponse{}, rng), ProtocolError);
}

TEST_CASE("honest sessions agree on key and next state") {
    Pair p;
    const uint64_t base_index = p.a.nvm().peers.front().challenge.session_index;
    for (int s = 0; s < 10; ++s) {
        SessionReport rep = p.session(p.a, p.b);
        REQUIRE(rep.initiator_outcome.success);
        REQUIRE(rep.responder_outcome.success);
        CHECK(rep.matching);
        CHECK(rep.initiator_outcome.session_key == rep.responder_outcome.session_key);
        const PeerRecord& ra = p.a.nvm().peers.front();
        const PeerRecord& rb = p.b.nvm().peers.front();
        CHECK(ra.challenge == rb.challenge);
        CHECK(ra.pair_mask == rb.pair_mask);
        CHECK(ra.challenge.session_index == base_index + static_cast<uint64_t>(s) + 1);
        // Pseudonym bookkeeping stays mutually consistent.
        CHECK(ra.peer_id == rb.self_id);
        CHECK(rb.peer_id == ra.self_id);
    }
}

TEST_CASE("role symmetry: either side can initiate") {
    Pair p;
    SessionReport r1 = p.session(p.a, p.b);
    REQUIRE(r1.initiator_outcome.success);
    SessionReport r2 = p.session(p.b, p.a);
    REQUIRE(r2.initiator_outcome.success);
    REQUIRE(r2.responder_outcome.success);
    CHECK(p.a.nvm().peers.front().pair_mask == p.b.nvm().peers.front().pair_mask);
}

TEST_CASE("session counts match the cost model") {
    Pair p;
    Meter im, rm;
    MemoryChannel ch;
    SessionReport rep = run_session(p.a, p.b, {0, 0}, p.rng, ch, &im, &rm);
    REQUIRE(rep.initiator_outcome.success);
    OpCounter expected{2, 2, 2, 1, 1};
    CHECK(rep.initiator_ops == expected);
    CHECK(rep.responder_ops == expected);
}

TEST_CASE("operation counts after step 1 alone") {
    Pair p;
    Meter m;
    AuthMessage m1 = p.a.auth_initiate(p.a.nvm().peers.front().peer_id, {0, 0}, p.rng, &m);
    (void)m1;
    OpCounter expected{2, 1, 1, 0, 1};
    CHECK(m.counts() == expected);
    CHECK(p.a.session_live());
    p.a.drop_pending();
}

TEST_CASE("verifier aborted at the tag stops at the documented counts") {
    Pair p;
    AuthMessage m1 = p.a.auth_initiate(p.a.nvm().peers.front().peer_id, {0, 0}, p.rng);
    m1.tag[0] ^= 1;
    Meter rm;
    auto rr = p.b.auth_respond(m1, {0, 0}, p.rng, &rm);
    CHECK_FALSE(rr.response.has_value());
    CHECK(rr.outcome.reason == AbortReason::TagMismatch);
    OpCounter expected{1, 0, 1, 0, 1};
    CHECK(rm.counts() == expected);
    p.a.drop_pending();
}

TEST_CASE("initiation does not touch NVM until finalize") {
    Pair p;
    std::string before = p.a.nvm_snapshot();
    AuthMessage m1 = p.a.auth_initiate(p.a.nvm().peers.front().peer_id, {0, 0}, p.rng);
    (void)m1;
    CHECK(p.a.nvm_snapshot() == before);
    p.a.drop_pending();
    CHECK(p.a.nvm_snapshot() == before);
}

TEST_CASE("any abort leaves the aborting side's NVM bit-identical") {
    Pair p;
    // Tampered request: responder aborts pre-commit.
    std::string b_before = p.b.nvm_snapshot();
    AuthMessage m1 = p.a.auth_initiate(p.a.nvm().peers.front().peer_id, {0, 0}, p.rng);
    AuthMessage bad = m1;
    bad.ad.delta2[3] ^= 0x10;
    auto rr = p.b.auth_respond(bad, {0, 0}, p.rng);
    CHECK_FALSE(rr.outcome.success);
    CHECK(p.b.nvm_snapshot() == b_before);

    // Tampered response: initiator aborts pre-commit.
    std::string a_before = p.a.nvm_snapshot();
    auto rr2 = p.b.auth_respond(m1, {0, 0}, p.rng);
    REQUIRE(rr2.response.has_value());
    AuthMessage m2 = *rr2.response;
    m2.noisy_payload[17] ^= 0x01;
    SessionOutcome out = p.a.auth_finalize(m2);
    CHECK_FALSE(out.success);
    CHECK(out.reason == AbortReason::TagMismatch);
    CHECK(p.a.nvm_snapshot() == a_before);
}

TEST_CASE("pseudonyms never repeat across sessions") {
    Pair p;
    auto hex_id = [](const DeviceId& id) { return to_hex(Bytes(id.begin(), id.end())); };
    std::set<std::string> ids_a, ids_b;
    ids_a.insert(hex_id(p.a.nvm().peers.front().self_id));
    ids_b.insert(hex_id(p.b.nvm().peers.front().self_id));
    for (int s = 0; s < 10; ++s) {
        SessionReport rep = p.session(p.a, p.b);
        REQUIRE(rep.initiator_outcome.success);
        ids_a.insert(hex_id(p.a.nvm().peers.front().self_id));
        ids_b.insert(hex_id(p.b.nvm().peers.front().self_id));
    }
    CHECK(ids_a.size() == 11);
    CHECK(ids_b.size() == 11);
}

TEST_CASE("blocking the response desynchronizes exactly one next session") {
    Pair p;
    int calls = 0;
    auto block_m2 = [&](Direction dir, const Bytes&) {
        ++calls;
        if (dir == Direction::ResponderToInitiator) return Interposition::drop();
        return Interposition::deliver();
    };
    SessionReport blocked = p.session(p.a, p.b, block_m2);
    CHECK(blocked.initiator_outcome.reason == AbortReason::Timeout);
    CHECK(blocked.responder_outcome.success);  // responder committed before sending

    // Next session: the responder no longer recognizes the stale pseudonym,
    // but recognizes it as a stale one.
    SessionReport desynced = p.session(p.a, p.b);
    CHECK_FALSE(desynced.initiator_outcome.success);
    CHECK(desynced.responder_outcome.reason == AbortReason::Desync);

    // No silent resync: the pairing stays dead.
    SessionReport again = p.session(p.a, p.b);
    CHECK(again.responder_outcome.reason == AbortReason::Desync);
}

TEST_CASE("well-framed messages with wrong-length fields abort as malformed") {
    Pair p;
    AuthMessage m1 = p.a.auth_initiate(p.a.nvm().peers.front().peer_id, {0, 0}, p.rng);

    AuthMessage short_mask = m1;
    short_mask.ad.delta2.resize(16);
    CHECK(p.b.auth_respond(short_mask, {0, 0}, p.rng).outcome.reason == AbortReason::Malformed);

    AuthMessage short_payload = m1;
    short_payload.noisy_payload.resize(100);
    CHECK(p.b.auth_respond(short_payload, {0, 0}, p.rng).outcome.reason == AbortReason::Malformed);

    AuthMessage wrong_role = m1;
    wrong_role.role = RoleFlag::AuthOk;
    CHECK(p.b.auth_respond(wrong_role, {0, 0}, p.rng).outcome.reason == AbortReason::Malformed);
    p.a.drop_pending();

    // Enrollment with a mismatched stable-response length is refused.
    Rng rng(603);
    Device open_a("x", 91, proto_cfg()), open_b("y", 92, proto_cfg());
    EnrollRequest req = open_a.enroll_initiate(rng);
    req.stable_response.resize(8);
    CHECK_THROWS_AS(open_b.enroll_respond(req, rng), ProtocolError);
}

TEST_CASE("unknown peers are rejected at both ends") {
    Pair p;
    Rng rng(600);
    Device stranger("mallory", 777, proto_cfg());
    MemoryChannel ch;
    SessionReport rep = run_session(stranger, p.b, {0, 0}, rng, ch);
    CHECK(rep.initiator_outcome.reason == AbortReason::UnknownPeer);

    DeviceId ghost{};
    ghost.fill(0x42);
    CHECK_THROWS_AS(p.a.auth_initiate(ghost, {0, 0}, rng), ProtocolError);
}

TEST_CASE("correct NVM with the wrong physical PUF never authenticates") {
    Pair p;
    Rng rng(601);
    // Clone alice's NVM into a device with a different PUF (the legitimate
    // loader refuses foreign state, so this goes through raw mutation, the
    // way an invasive attacker would write it).
    Device clone("alice", 4242, proto_cfg());
    NvmState stolen = nvm_from_json(nlohmann::json::parse(p.a.nvm_snapshot()), {});
    clone.mutate_nvm([&](NvmState& nvm) { nvm = stolen; });
    clone.close_enrollment();

    auto dir = std::filesystem::temp_directory_path() / "phenoauth_clone_test";
    std::filesystem::create_directories(dir);
    p.a.save_state(dir);
    Device honest_copy("alice", 4242, proto_cfg());
    CHECK_THROWS_AS(honest_copy.load_state(dir / "alice.nvm.json"), std::runtime_error);

    int accepts = 0;
    const int trials = 50;
    for (int t = 0; t < trials; ++t) {
        MemoryChannel ch;
        SessionReport rep = run_session(clone, p.b, {0, 0}, rng, ch);
        accepts += rep.responder_outcome.success;
        clone.drop_pending();
        CHECK_FALSE(rep.responder_outcome.success);
    }
    CHECK(accepts == 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("NVM persists and reloads through the JSON document") {
    Pair p;
    SessionReport rep = p.session(p.a, p.b);
    REQUIRE(rep.initiator_outcome.success);

    auto dir = std::filesystem::temp_directory_path() / "phenoauth_nvm_test";
    std::filesystem::remove_all(dir);
    p.a.save_state(dir);
    CHECK(std::filesystem::exists(dir / "alice.nvm.json"));
    CHECK(std::filesystem::exists(dir / "alice.dpan"));

    Device resurrected("alice", 11, proto_cfg());
    resurrected.load_state(dir / "alice.nvm.json");
    CHECK(resurrected.nvm_snapshot() == p.a.nvm_snapshot());

    // The reloaded device keeps authenticating.
    MemoryChannel ch;
    SessionReport rep2 = run_session(resurrected, p.b, {0, 0}, p.rng, ch);
    CHECK(rep2.initiator_outcome.success);
    CHECK(rep2.responder_outcome.success);
    std::filesystem::remove_all(dir);
}

TEST_CASE("session secrets never appear in persistent state") {
    Pair p;
    std::vector<Bytes> secrets;
    for (int s = 0; s < 5; ++s) {
        SessionReport rep = p.session(p.a, p.b);
        REQUIRE(rep.initiator_outcome.success);
        secrets.push_back(rep.initiator_outcome.session_key.bytes());
    }
    Rng probe(9);
    EnvParams nominal = p.a.nominal_env();
    for (Device* d : {&p.a, &p.b}) {
        for (const auto& [start, indices] : d->nvm().stable_map) {
            StableChallenge sc;
            sc.cell_indices = indices;
            secrets.push_back(d->puf().read_stable(sc, nominal, probe).bytes());
        }
    }
    for (Device* d : {&p.a, &p.b}) {
        std::string snapshot = d->nvm_snapshot();
        for (const auto& secret : secrets) {
            CHECK_FALSE(contains_subsequence(snapshot, secret));
            CHECK(snapshot.find(base64_encode(secret)) == std::string::npos);
        }
    }
}

TEST_CASE("timing report is consistent and counts are replayable") {
    Pair p;
    Meter im, rm;
    MemoryChannel ch;
    run_session(p.a, p.b, {0, 0}, p.rng, ch, &im, &rm);
    TimingReport rep = TimingReport::aggregate({&im, &rm});
    REQUIRE(rep.rows.size() == 5);
    uint64_t total = 0;
    double weighted = 0;
    for (const auto& row : rep.rows) {
        total += row.total_ns;
        weighted += row.mean_ns * static_cast<double>(row.count);
        CHECK(row.count > 0);
    }
    CHECK(total == rep.grand_total_ns);
    CHECK(std::abs(weighted - static_cast<double>(total)) <= 0.05 * static_cast<double>(total));

    // Same seeds, fresh devices: identical counts (times may differ).
    Pair q;
    Meter im2, rm2;
    MemoryChannel ch2;
    run_session(q.a, q.b, {0, 0}, q.rng, ch2, &im2, &rm2);
    CHECK(im2.counts() == im.counts());
    CHECK(rm2.counts() == rm.counts());
}
