#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "phenoauth/protocol.hpp"
#include "phenoauth/transport.hpp"

using namespace phenoauth;

namespace {

PufConfig proto_cfg() {
    PufConfig c;
    c.image_width = 32;
    c.image_height = 32;
    c.cell_count = 8192 * 4;
    return c;
}

struct Pair {
    Device a;
    Device b;
    Rng rng{50500};

    Pair(uint64_t seed_a = 31, uint64_t seed_b = 32)
        : a("alice", seed_a, proto_cfg()), b("bob", seed_b, proto_cfg()) {
        enroll_group({&a, &b}, rng);
    }
};

}  // namespace

TEST_CASE("identity interposer delivers unmodified bytes") {
    MemoryChannel ch([](Direction, const Bytes&) { return Interposition::deliver(); });
    Bytes msg = {1, 2, 3};
    auto delivered = ch.send(Direction::InitiatorToResponder, msg);
    REQUIRE(delivered.has_value());
    CHECK(*delivered == msg);
    REQUIRE(ch.transcript().size() == 1);
    CHECK(ch.transcript()[0].original == msg);
    CHECK(ch.transcript()[0].delivered == msg);
}

TEST_CASE("drop interposer times the session out") {
    Pair p;
    MemoryChannel ch([](Direction, const Bytes&) { return Interposition::drop(); });
    SessionReport rep = run_session(p.a, p.b, {0, 0}, p.rng, ch);
    CHECK(rep.initiator_outcome.reason == AbortReason::Timeout);
    CHECK(rep.responder_outcome.reason == AbortReason::None);  // request never arrived
    CHECK_FALSE(p.a.session_live());
}

TEST_CASE("single-bit replacement aborts at the receiver") {
    Pair p;
    Rng flip_rng(60);
    for (int t = 0; t < 10; ++t) {
        auto hook = [&](Direction dir, const Bytes& bytes) {
            if (dir != Direction::InitiatorToResponder) return Interposition::deliver();
            Bytes mod = bytes;
            size_t bit = 8 * 8 + flip_rng.below(8 * (mod.size() - 8));  // keep the frame header intact
            mod[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
            return Interposition::replace(std::move(mod));
        };
        MemoryChannel ch(hook);
        SessionReport rep = run_session(p.a, p.b, {0, 0}, p.rng, ch);
        CHECK_FALSE(rep.responder_outcome.success);
        CHECK_FALSE(rep.matching);
        CHECK(rep.initiator_outcome.reason == AbortReason::Timeout);
    }
}

TEST_CASE("delay within the step budget still delivers") {
    Pair p;
    MemoryChannel slow([](Direction, const Bytes&) { return Interposition::delay(2); });
    SessionReport rep = run_session(p.a, p.b, {0, 0}, p.rng, slow);
    CHECK(rep.initiator_outcome.success);

    MemoryChannel too_slow([](Direction, const Bytes&) { return Interposition::delay(9); });
    SessionReport rep2 = run_session(p.a, p.b, {0, 0}, p.rng, too_slow);
    CHECK(rep2.initiator_outcome.reason == AbortReason::Timeout);
}

TEST_CASE("channel runs replay bit-exactly") {
    auto run_once = [](uint64_t flip_seed) {
        Pair p;
        Rng flip_rng(flip_seed);
        auto hook = [&](Direction dir, const Bytes& bytes) {
            if (dir == Direction::ResponderToInitiator && flip_rng.coin()) {
                Bytes mod = bytes;
                mod.back() ^= 1;
                return Interposition::replace(std::move(mod));
            }
            return Interposition::deliver();
        };
        MemoryChannel ch(hook);
        SessionReport rep = run_session(p.a, p.b, {0, 0}, p.rng, ch);
        return rep.transcript;
    };
    Transcript t1 = run_once(77);
    Transcript t2 = run_once(77);
    REQUIRE(t1.size() == t2.size());
    for (size_t i = 0; i < t1.size(); ++i) {
        CHECK(t1[i].original == t2[i].original);
        CHECK(t1[i].delivered == t2[i].delivered);
        CHECK(t1[i].step == t2[i].step);
    }
}

TEST_CASE("socket transport carries every message type byte-identically") {
    Rng rng(61);
    Bytes samples[3];
    {
        AuthMessage m;
        m.type = MsgType::AuthReq;
        m.role = RoleFlag::AuthReq;
        for (auto& x : m.ad.dev_id) x = rng.byte();
        m.ad.delta1.resize(32);
        m.ad.delta2.resize(32);
        m.noisy_payload.resize(512);
        for (auto& x : m.noisy_payload) x = rng.byte();
        m.alpha = {1};
        samples[0] = encode(m);
        m.type = MsgType::AuthResp;
        m.role = RoleFlag::AuthOk;
        samples[1] = encode(m);
        EnrollResponse er;
        er.stable_response.resize(32);
        DatasetItem it;
        it.label = "x";
        it.image = {8, 8, Bytes(64)};
        er.dataset.items.push_back(it);
        samples[2] = encode(er);
    }

    Socket listener = Socket::listen_on(45810);
    std::thread echo([&listener] {
        for (int i = 0; i < 3; ++i) {
            Socket conn = listener.accept_one();
            auto frame = conn.recv_frame();
            REQUIRE(frame.has_value());
            conn.send_frame(*frame);
        }
    });
    for (const auto& sample : samples) {
        Socket conn = Socket::connect_to("127.0.0.1", 45810);
        conn.send_frame(sample);
        auto back = conn.recv_frame();
        REQUIRE(back.has_value());
        CHECK(*back == sample);
    }
    echo.join();
}

TEST_CASE("full sessions run over loopback sockets, concurrently on two ports") {
    Pair p1(41, 42);
    Pair p2(43, 44);

    Socket l1 = Socket::listen_on(45811);
    Socket l2 = Socket::listen_on(45812);
    Rng r1(70), r2(71);
    std::vector<SessionOutcome> v1, v2;
    std::thread t1([&] { v1 = serve_sessions(p1.b, l1, 2, {0, 0}, r1); });
    std::thread t2([&] { v2 = serve_sessions(p2.b, l2, 2, {0, 0}, r2); });

    Rng ri1(72), ri2(73);
    for (int s = 0; s < 2; ++s) {
        SessionOutcome o1 = run_socket_session(p1.a, "127.0.0.1", 45811, "bob", {0, 0}, ri1);
        SessionOutcome o2 = run_socket_session(p2.a, "127.0.0.1", 45812, "bob", {0, 0}, ri2);
        CHECK(o1.success);
        CHECK(o2.success);
    }
    t1.join();
    t2.join();
    for (const auto& o : v1) CHECK(o.success);
    for (const auto& o : v2) CHECK(o.success);
}

TEST_CASE("malformed socket frames produce decode errors, not crashes") {
    Socket listener = Socket::listen_on(45813);
    std::vector<AbortReason> seen;
    std::thread server([&] {
        for (int i = 0; i < 2; ++i) {
            Socket conn = listener.accept_one();
            auto frame = conn.recv_frame();
            if (!frame) {
                seen.push_back(AbortReason::Timeout);
                continue;
            }
            try {
                decode_auth(*frame);
                seen.push_back(AbortReason::None);
            } catch (const WireError&) {
                seen.push_back(AbortReason::Malformed);
            }
        }
    });
    {
        Socket conn = Socket::connect_to("127.0.0.1", 45813);
        conn.send_frame(Bytes{'g', 'a', 'r', 'b', 'a', 'g', 'e'});
    }
    {
        Socket conn = Socket::connect_to("127.0.0.1", 45813);
        conn.send_frame(Bytes{});
    }
    server.join();
    REQUIRE(seen.size() == 2);
    CHECK(seen[0] == AbortReason::Malformed);
    CHECK(seen[1] == AbortReason::Malformed);
}
