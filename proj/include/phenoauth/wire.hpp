#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "phenoauth/bytes.hpp"
#include "phenoauth/crypto.hpp"
#include "phenoauth/phenotype.hpp"
#include "phenoauth/puf.hpp"

namespace phenoauth {

struct WireError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using DeviceId = std::array<uint8_t, 32>;

inline constexpr char kWireMagic[4] = {'P', 'H', 'A', '1'};

enum class MsgType : uint8_t { EnrollReq = 0, EnrollResp = 1, AuthReq = 2, AuthResp = 3 };

enum class RoleFlag : uint8_t { Enroll = 0, AuthReq = 1, AuthOk = 2 };

/// Cleartext companion of an authentication message; its integrity is bound
/// by the AEAD tag.
struct AssociatedData {
    DeviceId dev_id{};
    Bytes delta1;  // first l bits of the masked fresh noisy response
    Bytes delta2;  // current stable response XOR fresh stable response

    bool operator==(const AssociatedData&) const = default;
};

struct AuthMessage {
    MsgType type = MsgType::AuthReq;
    RoleFlag role = RoleFlag::AuthReq;
    AssociatedData ad;
    Bytes noisy_payload;  // fresh noisy response XOR keystream
    Bytes alpha;          // AEAD ciphertext of the 1-byte role constant
    std::array<uint8_t, crypto::kTagSize> tag{};

    bool operator==(const AuthMessage&) const = default;
};

struct EnrollRequest {
    DeviceId dev_id{};
    Challenge challenge;
    Bytes stable_response;
    LabeledDataset dataset;
};

struct EnrollResponse {
    DeviceId dev_id{};
    Bytes stable_response;
    LabeledDataset dataset;
};

/// Exact byte string the AEAD tag covers: role flag, then the associated
/// data fields, then the masked noisy payload.
inline Bytes auth_ad_bytes(RoleFlag role, const AssociatedData& ad, const Bytes& noisy_payload) {
    Bytes b;
    b.reserve(1 + ad.dev_id.size() + ad.delta1.size() + ad.delta2.size() + noisy_payload.size());
    b.push_back(static_cast<uint8_t>(role));
    b.insert(b.end(), ad.dev_id.begin(), ad.dev_id.end());
    append(b, ad.delta1);
    append(b, ad.delta2);
    append(b, noisy_payload);
    return b;
}

namespace wire_detail {

inline void put_field(Bytes& out, const Bytes& field) {
    put_u32le(out, static_cast<uint32_t>(field.size()));
    append(out, field);
}

struct Reader {
    const Bytes& data;
    size_t pos = 0;

    void expect(size_t n) const {
        if (pos + n > data.size()) throw WireError("truncated message");
    }
    uint8_t u8() {
        expect(1);
        return data[pos++];
    }
    Bytes field() {
        expect(4);
        uint32_t len = read_u32le(data.data() + pos);
        pos += 4;
        expect(len);
        Bytes f(data.begin() + static_cast<long>(pos), data.begin() + static_cast<long>(pos + len));
        pos += len;
        return f;
    }
    void done() const {
        if (pos != data.size()) throw WireError("trailing bytes in message");
    }
};

inline Bytes header(MsgType type, RoleFlag role) {
    Bytes out(kWireMagic, kWireMagic + 4);
    out.push_back(static_cast<uint8_t>(type));
    out.push_back(static_cast<uint8_t>(role));
    return out;
}

inline Reader open(const Bytes& data, MsgType& type, RoleFlag& role) {
    Reader r{data};
    r.expect(6);
    if (std::memcmp(data.data(), kWireMagic, 4) != 0) throw WireError("bad magic");
    r.pos = 4;
    uint8_t t = r.u8();
    if (t > 3) throw WireError("unknown message type");
    type = static_cast<MsgType>(t);
    uint8_t rf = r.u8();
    if (rf > 2) throw WireError("unknown role flag");
    role = static_cast<RoleFlag>(rf);
    return r;
}

inline Bytes encode_dataset(const LabeledDataset& ds) {
    Bytes out;
    put_u32le(out, static_cast<uint32_t>(ds.items.size()));
    for (const auto& it : ds.items) {
        put_u32le(out, static_cast<uint32_t>(it.label.size()));
        out.insert(out.end(), it.label.begin(), it.label.end());
        put_u32le(out, it.env.temp_idx);
        put_u32le(out, it.env.volt_idx);
        put_u64le(out, it.challenge_id);
        put_u32le(out, it.read_index);
        put_u32le(out, it.image.width);
        put_u32le(out, it.image.height);
        append(out, it.image.pixels);
    }
    return out;
}

inline LabeledDataset decode_dataset(const Bytes& blob) {
    Reader r{blob};
    r.expect(4);
    uint32_t count = read_u32le(blob.data());
    r.pos = 4;
    LabeledDataset ds;
    ds.items.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        DatasetItem it;
        r.expect(4);
        uint32_t label_len = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        r.expect(label_len);
        it.label.assign(blob.begin() + static_cast<long>(r.pos), blob.begin() + static_cast<long>(r.pos + label_len));
        r.pos += label_len;
        r.expect(4 + 4 + 8 + 4 + 4 + 4);
        it.env.temp_idx = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        it.env.volt_idx = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        it.challenge_id = read_u64le(blob.data() + r.pos);
        r.pos += 8;
        it.read_index = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        it.image.width = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        it.image.height = read_u32le(blob.data() + r.pos);
        r.pos += 4;
        size_t n = static_cast<size_t>(it.image.width) * it.image.height;
        if (n > (1u << 26)) throw WireError("oversized image");
        r.expect(n);
        it.image.pixels.assign(blob.begin() + static_cast<long>(r.pos), blob.begin() + static_cast<long>(r.pos + n));
        r.pos += n;
        ds.items.push_back(std::move(it));
    }
    r.done();
    return ds;
}

}  // namespace wire_detail

inline Bytes encode(const AuthMessage& m) {
    using namespace wire_detail;
    Bytes out = header(m.type, m.role);
    put_field(out, Bytes(m.ad.dev_id.begin(), m.ad.dev_id.end()));
    put_field(out, m.ad.delta1);
    put_field(out, m.ad.delta2);
    put_field(out, m.noisy_payload);
    put_field(out, m.alpha);
    put_field(out, Bytes(m.tag.begin(), m.tag.end()));
    return out;
}

inline Bytes encode(const EnrollRequest& m) {
    using namespace wire_detail;
    Bytes out = header(MsgType::EnrollReq, RoleFlag::Enroll);
    put_field(out, Bytes(m.dev_id.begin(), m.dev_id.end()));
    put_field(out, serialize_challenge(m.challenge));
    put_field(out, m.stable_response);
    put_field(out, encode_dataset(m.dataset));
    return out;
}

inline Bytes encode(const EnrollResponse& m) {
    using namespace wire_detail;
    Bytes out = header(MsgType::EnrollResp, RoleFlag::Enroll);
    put_field(out, Bytes(m.dev_id.begin(), m.dev_id.end()));
    put_field(out, m.stable_response);
    put_field(out, encode_dataset(m.dataset));
    return out;
}

inline MsgType peek_type(const Bytes& data) {
    MsgType t;
    RoleFlag r;
    wire_detail::open(data, t, r);
    return t;
}

inline AuthMessage decode_auth(const Bytes& data) {
    using namespace wire_detail;
    MsgType type;
    RoleFlag role;
    Reader r = open(data, type, role);
    if (type != MsgType::AuthReq && type != MsgType::AuthResp) throw WireError("not an auth message");
    AuthMessage m;
    m.type = type;
    m.role = role;
    Bytes id = r.field();
    if (id.size() != m.ad.dev_id.size()) throw WireError("bad device id length");
    std::copy(id.begin(), id.end(), m.ad.dev_id.begin());
    m.ad.delta1 = r.field();
    m.ad.delta2 = r.field();
    m.noisy_payload = r.field();
    m.alpha = r.field();
    Bytes tag = r.field();
    if (tag.size() != m.tag.size()) throw WireError("bad tag length");
    std::copy(tag.begin(), tag.end(), m.tag.begin());
    r.done();
    return m;
}

inline EnrollRequest decode_enroll_request(const Bytes& data) {
    using namespace wire_detail;
    MsgType type;
    RoleFlag role;
    Reader r = open(data, type, role);
    if (type != MsgType::EnrollReq) throw WireError("not an enrollment request");
    EnrollRequest m;
    Bytes id = r.field();
    if (id.size() != m.dev_id.size()) throw WireError("bad device id length");
    std::copy(id.begin(), id.end(), m.dev_id.begin());
    Bytes ch = r.field();
    m.challenge = deserialize_challenge(ch.data(), ch.size());
    m.stable_response = r.field();
    m.dataset = decode_dataset(r.field());
    r.done();
    return m;
}

inline EnrollResponse decode_enroll_response(const Bytes& data) {
    using namespace wire_detail;
    MsgType type;
    RoleFlag role;
    Reader r = open(data, type, role);
    if (type != MsgType::EnrollResp) throw WireError("not an enrollment response");
    EnrollResponse m;
    Bytes id = r.field();
    if (id.size() != m.dev_id.size()) throw WireError("bad device id length");
    std::copy(id.begin(), id.end(), m.dev_id.begin());
    m.stable_response = r.field();
    m.dataset = decode_dataset(r.field());
    r.done();
    return m;
}

}  // namespace phenoauth
