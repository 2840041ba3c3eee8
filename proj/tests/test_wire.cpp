#include <catch2/catch_amalgamated.hpp>

#include "phenoauth/wire.hpp"

using namespace phenoauth;

namespace {

AuthMessage sample_auth(Rng& rng, MsgType type) {
    AuthMessage m;
    m.type = type;
    m.role = type == MsgType::AuthReq ? RoleFlag::AuthReq : RoleFlag::AuthOk;
    for (auto& b : m.ad.dev_id) b = rng.byte();
    m.ad.delta1.resize(32);
    m.ad.delta2.resize(32);
    for (auto& b : m.ad.delta1) b = rng.byte();
    for (auto& b : m.ad.delta2) b = rng.byte();
    m.noisy_payload.resize(128);
    for (auto& b : m.noisy_payload) b = rng.byte();
    m.alpha = {rng.byte()};
    for (auto& b : m.tag) b = rng.byte();
    return m;
}

}  // namespace

TEST_CASE("auth messages round-trip through the wire format") {
    Rng rng(1234);
    for (int t = 0; t < 100; ++t) {
        AuthMessage m = sample_auth(rng, t % 2 == 0 ? MsgType::AuthReq : MsgType::AuthResp);
        Bytes w = encode(m);
        CHECK(peek_type(w) == m.type);
        CHECK(decode_auth(w) == m);
    }
}

TEST_CASE("enroll messages round-trip through the wire format") {
    Rng rng(1235);
    EnrollRequest req;
    for (auto& b : req.dev_id) b = rng.byte();
    req.challenge = {8192, 4096, 0x7e, 2};
    req.stable_response.resize(32);
    for (auto& b : req.stable_response) b = rng.byte();
    for (int i = 0; i < 3; ++i) {
        DatasetItem it;
        it.label = "devX";
        it.env = {static_cast<uint32_t>(i), 0};
        it.challenge_id = 4096u * static_cast<uint32_t>(i);
        it.read_index = static_cast<uint32_t>(i);
        it.image = {8, 8, Bytes(64)};
        for (auto& px : it.image.pixels) px = rng.byte();
        req.dataset.items.push_back(it);
    }
    Bytes w = encode(req);
    EnrollRequest back = decode_enroll_request(w);
    CHECK(back.dev_id == req.dev_id);
    CHECK(back.challenge == req.challenge);
    CHECK(back.stable_response == req.stable_response);
    REQUIRE(back.dataset.size() == req.dataset.size());
    for (size_t i = 0; i < back.dataset.size(); ++i) {
        CHECK(back.dataset.items[i].label == req.dataset.items[i].label);
        CHECK(back.dataset.items[i].image == req.dataset.items[i].image);
    }

    EnrollResponse resp{req.dev_id, req.stable_response, req.dataset};
    EnrollResponse back2 = decode_enroll_response(encode(resp));
    CHECK(back2.dev_id == resp.dev_id);
    CHECK(back2.stable_response == resp.stable_response);
    CHECK(back2.dataset.size() == resp.dataset.size());
}

TEST_CASE("wire header bytes are pinned") {
    AuthMessage m;
    m.type = MsgType::AuthReq;
    m.role = RoleFlag::AuthReq;
    m.ad.dev_id.fill(0xaa);
    m.ad.delta1 = {0x01};
    m.ad.delta2 = {0x02};
    m.noisy_payload = {0x03};
    m.alpha = {0x04};
    m.tag.fill(0xbb);
    Bytes w = encode(m);
    // "PHA1", type 2, role 1, then u32-length-prefixed dev_id.
    CHECK(w[0] == 'P');
    CHECK(w[1] == 'H');
    CHECK(w[2] == 'A');
    CHECK(w[3] == '1');
    CHECK(w[4] == 2);
    CHECK(w[5] == 1);
    CHECK(read_u32le(w.data() + 6) == 32);
    CHECK(w[10] == 0xaa);
}

TEST_CASE("malformed wire bytes raise decode errors without crashing") {
    Rng rng(1236);
    AuthMessage m = sample_auth(rng, MsgType::AuthReq);
    Bytes good = encode(m);

    Bytes bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_auth(bad_magic), WireError);

    Bytes truncated(good.begin(), good.begin() + static_cast<long>(good.size() / 2));
    CHECK_THROWS_AS(decode_auth(truncated), WireError);

    Bytes trailing = good;
    trailing.push_back(0x00);
    CHECK_THROWS_AS(decode_auth(trailing), WireError);

    Bytes bad_type = good;
    bad_type[4] = 9;
    CHECK_THROWS_AS(decode_auth(bad_type), WireError);

    // Random byte soup must never crash the decoder.
    for (int t = 0; t < 500; ++t) {
        Bytes soup(rng.below(64), 0);
        for (auto& b : soup) b = rng.byte();
        try {
            decode_auth(soup);
        } catch (const WireError&) {
        } catch (const std::invalid_argument&) {
        }
    }
}

TEST_CASE("tag coverage bytes follow the documented layout") {
    AssociatedData ad;
    ad.dev_id.fill(0x11);
    ad.delta1 = {0x22, 0x22};
    ad.delta2 = {0x33};
    Bytes payload = {0x44, 0x55};
    Bytes cover = auth_ad_bytes(RoleFlag::AuthOk, ad, payload);
    REQUIRE(cover.size() == 1 + 32 + 2 + 1 + 2);
    CHECK(cover[0] == 2);        // role flag
    CHECK(cover[1] == 0x11);     // dev_id
    CHECK(cover[33] == 0x22);    // delta1
    CHECK(cover[35] == 0x33);    // delta2
    CHECK(cover[36] == 0x44);    // noisy payload
}
