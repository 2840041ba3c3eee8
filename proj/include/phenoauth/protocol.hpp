#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenoauth/authenticator.hpp"
#include "phenoauth/bytes.hpp"
#include "phenoauth/crypto.hpp"
#include "phenoauth/metrics.hpp"
#include "phenoauth/phenotype.hpp"
#include "phenoauth/puf.hpp"
#include "phenoauth/wire.hpp"

namespace phenoauth {

inline const Bytes kKdfSalt = {'P', 'H', 'A', '1', '-', 'k', 'd', 'f'};
inline constexpr const char* kCtxSessionKey = "mk";
inline constexpr const char* kCtxMaskReq = "noisy-mask-req";
inline constexpr const char* kCtxMaskResp = "noisy-mask-resp";
inline const Bytes kPlainAuthReq = {0x01};
inline const Bytes kPlainAuthOk = {0x02};

enum class AbortReason : uint8_t {
    None = 0,
    UnknownPeer,
    TagMismatch,
    ClassifierReject,
    LowConfidence,
    Desync,
    Timeout,
    Malformed,
};

inline const char* abort_reason_name(AbortReason r) {
    switch (r) {
        case AbortReason::None: return "None";
        case AbortReason::UnknownPeer: return "UnknownPeer";
        case AbortReason::TagMismatch: return "TagMismatch";
        case AbortReason::ClassifierReject: return "ClassifierReject";
        case AbortReason::LowConfidence: return "LowConfidence";
        case AbortReason::Desync: return "Desync";
        case AbortReason::Timeout: return "Timeout";
        case AbortReason::Malformed: return "Malformed";
    }
    return "?";
}

struct SessionOutcome {
    bool success = false;
    AbortReason reason = AbortReason::None;
    crypto::SecretBytes session_key;  // confirmed key, set only on success

    static SessionOutcome ok(crypto::SecretBytes key) { return {true, AbortReason::None, std::move(key)}; }
    static SessionOutcome abort(AbortReason r) { return {false, r, {}}; }
};

struct ProtocolError : std::runtime_error {
    AbortReason reason;
    explicit ProtocolError(AbortReason r) : std::runtime_error(abort_reason_name(r)), reason(r) {}
};

/// Everything a device remembers about one live peer pairing. Pseudonym
/// chains are scoped to the pairing: self_id is the pseudonym this device
/// presents to this peer, peer_id the one it expects back, and both advance
/// by hash(id ‖ mk) on every successful session of this pair. A chain scoped
/// any wider would go stale in every third-party record the moment one pair
/// runs a session. prev_peer_id keeps one generation back so a
/// desynchronized partner is recognized as such; label is the fixed
/// enrollment identity the classifier knows the peer under.
struct PeerRecord {
    DeviceId self_id{};
    DeviceId peer_id{};
    DeviceId prev_peer_id{};
    std::string label;
    Challenge challenge;
    BitString pair_mask;  // own stable response XOR peer stable response
};

/// Persistent device state. Holds no stable response, no session key and no
/// raw PUF data: the stable map is cell indices only, the pair mask is an
/// XOR of two secrets, and pseudonyms are hash-chain values.
struct NvmState {
    DeviceId self_id{};
    DeviceId puf_fingerprint{};  // preimage-resistant tag of the physical instance
    std::string label;
    std::vector<PeerRecord> peers;
    PhenotypeModel model;
    double threshold = 1.0;
    bool model_trained = false;
    std::map<uint64_t, std::vector<uint64_t>> stable_map;  // region_start -> stable cell indices
};

namespace nvm_detail {

inline std::string b64_id(const DeviceId& id) { return base64_encode(Bytes(id.begin(), id.end())); }

inline DeviceId id_from_b64(const std::string& s) {
    Bytes b = base64_decode(s);
    if (b.size() != 32) throw std::runtime_error("bad pseudonym length in NVM document");
    DeviceId id{};
    std::copy(b.begin(), b.end(), id.begin());
    return id;
}

}  // namespace nvm_detail

/// Single JSON document with base64 fields. When model_ref is nonempty the
/// model is stored by reference to its binary file; otherwise it is embedded
/// so the document is a complete snapshot.
inline nlohmann::json nvm_to_json(const NvmState& nvm, const std::string& model_ref = "") {
    nlohmann::json peers = nlohmann::json::array();
    for (const auto& p : nvm.peers) {
        peers.push_back({{"self_id", nvm_detail::b64_id(p.self_id)},
                         {"peer_id", nvm_detail::b64_id(p.peer_id)},
                         {"prev_peer_id", nvm_detail::b64_id(p.prev_peer_id)},
                         {"label", p.label},
                         {"challenge", base64_encode(serialize_challenge(p.challenge))},
                         {"pair_mask", base64_encode(p.pair_mask.bytes())},
                         {"pair_mask_bits", p.pair_mask.size()}});
    }
    nlohmann::json stable = nlohmann::json::object();
    for (const auto& [start, indices] : nvm.stable_map) stable[std::to_string(start)] = indices;

    nlohmann::json j = {{"version", 1},
                        {"self_id", nvm_detail::b64_id(nvm.self_id)},
                        {"puf_fingerprint", nvm_detail::b64_id(nvm.puf_fingerprint)},
                        {"label", nvm.label},
                        {"peers", peers},
                        {"threshold", nvm.threshold},
                        {"stable_map", stable}};
    if (nvm.model_trained) {
        if (model_ref.empty())
            j["model"] = base64_encode(encode_model(nvm.model, nvm.threshold));
        else
            j["model_file"] = model_ref;
    }
    return j;
}

inline NvmState nvm_from_json(const nlohmann::json& j, const std::filesystem::path& model_dir) {
    NvmState nvm;
    nvm.self_id = nvm_detail::id_from_b64(j.at("self_id").get<std::string>());
    nvm.puf_fingerprint = nvm_detail::id_from_b64(j.at("puf_fingerprint").get<std::string>());
    nvm.label = j.at("label").get<std::string>();
    nvm.threshold = j.at("threshold").get<double>();
    for (const auto& pj : j.at("peers")) {
        PeerRecord p;
        p.self_id = nvm_detail::id_from_b64(pj.at("self_id").get<std::string>());
        p.peer_id = nvm_detail::id_from_b64(pj.at("peer_id").get<std::string>());
        p.prev_peer_id = nvm_detail::id_from_b64(pj.at("prev_peer_id").get<std::string>());
        p.label = pj.at("label").get<std::string>();
        Bytes ch = base64_decode(pj.at("challenge").get<std::string>());
        p.challenge = deserialize_challenge(ch.data(), ch.size());
        p.pair_mask = BitString::from_bytes(base64_decode(pj.at("pair_mask").get<std::string>()),
                                            pj.at("pair_mask_bits").get<size_t>());
        nvm.peers.push_back(std::move(p));
    }
    for (const auto& [key, indices] : j.at("stable_map").items())
        nvm.stable_map[std::stoull(key)] = indices.get<std::vector<uint64_t>>();
    if (j.contains("model_file")) {
        auto [model, threshold] = load_model(model_dir / j.at("model_file").get<std::string>());
        nvm.model = std::move(model);
        nvm.threshold = threshold;
        nvm.model_trained = true;
    } else if (j.contains("model")) {
        auto [model, threshold] = decode_model(base64_decode(j.at("model").get<std::string>()));
        nvm.model = std::move(model);
        nvm.threshold = threshold;
        nvm.model_trained = true;
    }
    return nvm;
}

/// One protocol participant: a physical PUF plus its NVM plus the volatile
/// state of at most one live initiated session.
class Device {
public:
    Device(std::string label, uint64_t device_seed, PufConfig cfg)
        : puf_(device_seed, cfg), cfg_(std::move(cfg)) {
        nvm_.label = label;
        Bytes id_src = {'P', 'H', 'A', '1', '-', 'i', 'd', ':'};
        id_src.insert(id_src.end(), label.begin(), label.end());
        put_u64le(id_src, device_seed);
        nvm_.self_id = crypto::hash(id_src);

        Bytes fp_src = {'P', 'H', 'A', '1', '-', 'p', 'u', 'f', '-', 'f', 'p'};
        put_u64le(fp_src, device_seed);
        nvm_.puf_fingerprint = crypto::hash(fp_src);

        build_stable_map();
    }

    const std::string& label() const { return nvm_.label; }
    const DeviceId& id() const { return nvm_.self_id; }
    const NvmState& nvm() const { return nvm_; }
    const DpufDevice& puf() const { return puf_; }
    const PufConfig& config() const { return cfg_; }
    bool enrollment_open() const { return enrollment_open_; }
    bool session_live() const { return pending_.has_value(); }

    EnvParams nominal_env() const {
        EnvParams env{0, 0};
        double best_t = 1e18, best_v = 1e18;
        for (uint32_t t = 0; t < cfg_.temp_grid.size(); ++t) {
            double d = std::abs(cfg_.temp_grid[t] - cfg_.temp_nominal);
            if (d < best_t) {
                best_t = d;
                env.temp_idx = t;
            }
        }
        for (uint32_t v = 0; v < cfg_.volt_grid.size(); ++v) {
            double d = std::abs(cfg_.volt_grid[v] - cfg_.volt_nominal);
            if (d < best_v) {
                best_v = d;
                env.volt_idx = v;
            }
        }
        return env;
    }

    // --- Enrollment (secure channel assumed; no adversary interposition) ---

    EnrollRequest enroll_initiate(Rng& rng) {
        require_enrollment_open();
        Challenge c;
        c.region_len = cfg_.region_len_cells();
        c.region_start = rng.below(puf_.geometry().total_slots()) * c.region_len;
        c.pattern = rng.byte();
        // The session counter starts at a random point, which both makes
        // independently drawn enrollment challenges collide only with
        // probability ~2^-64 and decorrelates the challenge chains of
        // distinct pairings.
        c.session_index = rng.next();

        auto [noisy, stable] = raw_dpuf_query(c, nominal_env(), rng);
        (void)noisy;
        pending_enroll_ = PendingEnroll{c, stable};
        return EnrollRequest{nvm_.self_id, c, stable.bytes(), own_dataset()};
    }

    EnrollResponse enroll_respond(const EnrollRequest& req, Rng& rng) {
        require_enrollment_open();
        std::string peer_label = dataset_label(req.dataset);
        auto [noisy, stable] = raw_dpuf_query(req.challenge, nominal_env(), rng);
        (void)noisy;
        BitString peer_stable = BitString::from_bytes(req.stable_response, 8 * req.stable_response.size());
        if (peer_stable.size() != stable.size()) throw ProtocolError(AbortReason::Malformed);

        PeerRecord rec;
        rec.self_id = nvm_.self_id;
        rec.peer_id = req.dev_id;
        rec.prev_peer_id = req.dev_id;
        rec.label = peer_label;
        rec.challenge = req.challenge;
        rec.pair_mask = stable ^ peer_stable;
        upsert_peer(std::move(rec));

        absorb_dataset(req.dataset);
        retrain();
        return EnrollResponse{nvm_.self_id, stable.bytes(), own_dataset()};
    }

    void enroll_finalize(const EnrollResponse& resp, Rng& rng) {
        (void)rng;
        require_enrollment_open();
        if (!pending_enroll_) throw ProtocolError(AbortReason::Malformed);
        PendingEnroll pe = std::move(*pending_enroll_);
        pending_enroll_.reset();

        std::string peer_label = dataset_label(resp.dataset);
        BitString peer_stable = BitString::from_bytes(resp.stable_response, 8 * resp.stable_response.size());
        if (peer_stable.size() != pe.stable.size()) throw ProtocolError(AbortReason::Malformed);

        PeerRecord rec;
        rec.self_id = nvm_.self_id;
        rec.peer_id = resp.dev_id;
        rec.prev_peer_id = resp.dev_id;
        rec.label = peer_label;
        rec.challenge = pe.challenge;
        rec.pair_mask = pe.stable ^ peer_stable;
        upsert_peer(std::move(rec));

        absorb_dataset(resp.dataset);
        retrain();
    }

    void close_enrollment() {
        enrollment_open_ = false;
        pending_enroll_.reset();
    }

    // --- Authentication ---

    AuthMessage auth_initiate(const DeviceId& peer_id, EnvParams env, Rng& rng, Meter* meter = nullptr) {
        PeerRecord* rec = find_current(peer_id);
        if (rec == nullptr) throw ProtocolError(AbortReason::UnknownPeer);
        if (pending_) throw std::logic_error("a session is already live on this device");

        auto [noisy_now, base_stable] = dpuf_query(rec->challenge, env, rng, meter);
        (void)noisy_now;  // read per protocol; only the stable part feeds the key
        crypto::SymmetricKey mk = derive_session_key(base_stable, meter);
        Challenge next = counted_next_challenge(rec->challenge, mk, meter);
        auto [noisy_next, stable_next] = dpuf_query(next, env, rng, meter);

        AuthMessage m;
        m.type = MsgType::AuthReq;
        m.role = RoleFlag::AuthReq;
        m.noisy_payload = mask_payload(noisy_next, base_stable, kCtxMaskReq);
        m.ad.dev_id = rec->self_id;
        m.ad.delta1 = Bytes(m.noisy_payload.begin(), m.noisy_payload.begin() + cfg_.stable_bits / 8);
        m.ad.delta2 = (base_stable ^ stable_next).bytes();
        Bytes ad_bytes = auth_ad_bytes(m.role, m.ad, m.noisy_payload);
        crypto::AeadOutput sealed = counted_encrypt(mk, crypto::NonceCounter::initiator(0), ad_bytes,
                                                    kPlainAuthReq, meter);
        m.alpha = sealed.ciphertext;
        m.tag = sealed.tag;

        pending_ = PendingAuth{peer_id, mk, crypto::SecretBytes(Bytes(mk.raw().begin(), mk.raw().end())),
                               base_stable, stable_next, next};
        return m;
    }

    struct RespondResult {
        std::optional<AuthMessage> response;
        SessionOutcome outcome;
    };

    /// Hostile input tolerated: every validation happens before the NVM
    /// commit, so any abort leaves persistent state untouched.
    RespondResult auth_respond(const AuthMessage& req, EnvParams env, Rng& rng, Meter* meter = nullptr) {
        if (req.type != MsgType::AuthReq || req.role != RoleFlag::AuthReq)
            return {std::nullopt, SessionOutcome::abort(AbortReason::Malformed)};

        auto [rec, lookup] = find_peer(req.ad.dev_id);
        if (lookup == Lookup::Stale) return {std::nullopt, SessionOutcome::abort(AbortReason::Desync)};
        if (lookup == Lookup::Unknown) return {std::nullopt, SessionOutcome::abort(AbortReason::UnknownPeer)};

        const size_t mask_bytes = cfg_.stable_bits / 8;
        const size_t payload_bytes = cfg_.region_len_cells() / 8;
        if (req.ad.delta1.size() != mask_bytes || req.ad.delta2.size() != mask_bytes ||
            req.noisy_payload.size() != payload_bytes || req.alpha.size() != kPlainAuthReq.size())
            return {std::nullopt, SessionOutcome::abort(AbortReason::Malformed)};

        auto [own_noisy, own_stable] = dpuf_query(rec->challenge, env, rng, meter);
        (void)own_noisy;
        BitString base_stable = rec->pair_mask ^ own_stable;  // peer's current stable response
        crypto::SymmetricKey mk = derive_session_key(base_stable, meter);

        Bytes ad_bytes = auth_ad_bytes(req.role, req.ad, req.noisy_payload);
        if (!counted_tag_check(mk, crypto::NonceCounter::initiator(0), ad_bytes, kPlainAuthReq,
                               {req.alpha, req.tag}, meter))
            return {std::nullopt, SessionOutcome::abort(AbortReason::TagMismatch)};

        NoisyResponse peer_noisy = unmask_payload(req.noisy_payload, base_stable, kCtxMaskReq);
        auto verdict = counted_accept(peer_noisy, rec->label, meter);
        if (verdict != AbortReason::None) return {std::nullopt, SessionOutcome::abort(verdict)};

        BitString peer_stable_next =
            BitString::from_bytes(req.ad.delta2, 8 * req.ad.delta2.size()) ^ base_stable;
        Challenge next = counted_next_challenge(rec->challenge, mk, meter);
        auto [own_noisy_next, own_stable_next] = dpuf_query(next, env, rng, meter);

        AuthMessage m;
        m.type = MsgType::AuthResp;
        m.role = RoleFlag::AuthOk;
        m.noisy_payload = mask_payload(own_noisy_next, base_stable, kCtxMaskResp);
        m.ad.dev_id = rec->self_id;
        m.ad.delta1 = Bytes(m.noisy_payload.begin(), m.noisy_payload.begin() + mask_bytes);
        m.ad.delta2 = (base_stable ^ own_stable_next).bytes();
        Bytes ad_v = auth_ad_bytes(m.role, m.ad, m.noisy_payload);
        crypto::AeadOutput sealed =
            counted_encrypt(mk, crypto::NonceCounter::responder(0), ad_v, kPlainAuthOk, meter);
        m.alpha = sealed.ciphertext;
        m.tag = sealed.tag;

        // Commit: the responder advances before learning the initiator's
        // fate; a blocked response therefore desynchronizes the pair.
        rec->challenge = next;
        rec->pair_mask = peer_stable_next ^ own_stable_next;
        advance_ids(*rec, mk, meter);

        crypto::SecretBytes confirmed(Bytes(mk.raw().begin(), mk.raw().end()));
        return {std::move(m), SessionOutcome::ok(std::move(confirmed))};
    }

    SessionOutcome auth_finalize(const AuthMessage& resp, Meter* meter = nullptr) {
        if (!pending_) return SessionOutcome::abort(AbortReason::Malformed);
        PendingAuth p = std::move(*pending_);
        pending_.reset();

        if (resp.type != MsgType::AuthResp || resp.role != RoleFlag::AuthOk)
            return SessionOutcome::abort(AbortReason::Malformed);
        const size_t mask_bytes = cfg_.stable_bits / 8;
        const size_t payload_bytes = cfg_.region_len_cells() / 8;
        if (resp.ad.delta1.size() != mask_bytes || resp.ad.delta2.size() != mask_bytes ||
            resp.noisy_payload.size() != payload_bytes || resp.alpha.size() != kPlainAuthOk.size())
            return SessionOutcome::abort(AbortReason::Malformed);

        Bytes ad_bytes = auth_ad_bytes(resp.role, resp.ad, resp.noisy_payload);
        if (!counted_tag_check(p.key, crypto::NonceCounter::responder(0), ad_bytes, kPlainAuthOk,
                               {resp.alpha, resp.tag}, meter))
            return SessionOutcome::abort(AbortReason::TagMismatch);
        if (resp.ad.dev_id != p.peer_id) return SessionOutcome::abort(AbortReason::TagMismatch);

        PeerRecord* rec = find_current(p.peer_id);
        if (rec == nullptr) return SessionOutcome::abort(AbortReason::UnknownPeer);

        NoisyResponse peer_noisy = unmask_payload(resp.noisy_payload, p.base_stable, kCtxMaskResp);
        auto verdict = counted_accept(peer_noisy, rec->label, meter);
        if (verdict != AbortReason::None) return SessionOutcome::abort(verdict);

        BitString peer_stable_next =
            BitString::from_bytes(resp.ad.delta2, 8 * resp.ad.delta2.size()) ^ p.base_stable;

        rec->challenge = p.next_challenge;
        rec->pair_mask = p.next_stable ^ peer_stable_next;
        advance_ids(*rec, p.key, meter);

        return SessionOutcome::ok(std::move(p.key_copy));
    }

    /// Clears the live session without touching NVM (transport timeout).
    void drop_pending() { pending_.reset(); }

    // --- State inspection / adversary surface ---

    /// Canonical serialized NVM snapshot (model embedded), used by the
    /// Reveal oracle and the abort-atomicity checks.
    std::string nvm_snapshot() const { return nvm_to_json(nvm_).dump(); }

    /// Corrupt oracle: arbitrary mutation of persistent state.
    void mutate_nvm(const std::function<void(NvmState&)>& fn) { fn(nvm_); }

    /// Issue oracle: raw physical access to the PUF, stable map included.
    std::pair<NoisyResponse, StableResponse> issue_query(const Challenge& ch, EnvParams env, Rng& rng) const {
        return raw_dpuf_query(ch, env, rng);
    }

    void save_state(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::string model_name = nvm_.label + ".dpan";
        if (nvm_.model_trained) save_model(nvm_.model, nvm_.threshold, dir / model_name);
        std::ofstream f(dir / (nvm_.label + ".nvm.json"));
        f << nvm_to_json(nvm_, nvm_.model_trained ? model_name : "").dump(2) << "\n";
    }

    void load_state(const std::filesystem::path& nvm_json_path) {
        std::ifstream f(nvm_json_path);
        if (!f) throw std::runtime_error("cannot open NVM document: " + nvm_json_path.string());
        nlohmann::json j = nlohmann::json::parse(f);
        NvmState loaded = nvm_from_json(j, nvm_json_path.parent_path());
        if (loaded.puf_fingerprint != nvm_.puf_fingerprint)
            throw std::runtime_error("persisted state belongs to a different physical device: " +
                                     nvm_json_path.string());
        nvm_ = std::move(loaded);
        enrollment_open_ = false;
        pending_.reset();
    }

private:
    struct PendingEnroll {
        Challenge challenge;
        StableResponse stable;
    };

    struct PendingAuth {
        DeviceId peer_id{};
        crypto::SymmetricKey key;
        crypto::SecretBytes key_copy;
        BitString base_stable;
        BitString next_stable;
        Challenge next_challenge;
    };

    enum class Lookup { Found, Stale, Unknown };

    void require_enrollment_open() const {
        if (!enrollment_open_) throw ProtocolError(AbortReason::Malformed);
    }

    void build_stable_map() {
        Rng map_rng = Rng(puf_.seed()).fork(stream_tag("stable-map"));
        const uint32_t region_len = cfg_.region_len_cells();
        for (uint64_t slot = 0; slot < puf_.geometry().total_slots(); ++slot) {
            Rng slot_rng = map_rng.fork(slot);
            Challenge region{slot * region_len, region_len, 0xff, 0};
            StableChallenge sc = reliability_analysis(puf_, {region}, cfg_.full_env_grid(),
                                                      cfg_.reliability_repeats, cfg_.error_threshold,
                                                      cfg_.stable_bits, slot_rng);
            nvm_.stable_map[region.region_start] = std::move(sc.cell_indices);
        }
    }

    StableChallenge sc_for(const Challenge& ch) const {
        auto it = nvm_.stable_map.find(ch.region_start);
        if (it == nvm_.stable_map.end()) throw OutOfRange("no stable map entry for challenge region");
        StableChallenge sc;
        sc.cell_indices = it->second;
        return sc;
    }

    std::pair<NoisyResponse, StableResponse> raw_dpuf_query(const Challenge& ch, EnvParams env,
                                                            Rng& rng) const {
        return {puf_.read(ch, env, rng), puf_.read_stable(sc_for(ch), env, rng)};
    }

    std::pair<NoisyResponse, StableResponse> dpuf_query(const Challenge& ch, EnvParams env, Rng& rng,
                                                        Meter* meter) const {
        if (meter == nullptr) return raw_dpuf_query(ch, env, rng);
        return meter->timed(PrimitiveOp::Dpuf, [&] { return raw_dpuf_query(ch, env, rng); });
    }

    crypto::SymmetricKey derive_session_key(const BitString& base_stable, Meter* meter) const {
        auto run = [&] {
            return crypto::SymmetricKey::from_secret(
                crypto::kdf(base_stable.bytes(), 8 * crypto::kKeySize, kKdfSalt, kCtxSessionKey),
                crypto::KeyRole::SessionKey);
        };
        if (meter == nullptr) return run();
        return meter->timed(PrimitiveOp::Kdf, run);
    }

    Challenge counted_next_challenge(const Challenge& c, const crypto::SymmetricKey& mk, Meter* meter) const {
        auto run = [&] { return derive_next_challenge(c, mk, puf_.geometry()); };
        if (meter == nullptr) return run();
        return meter->timed(PrimitiveOp::Hash, run);
    }

    static crypto::AeadOutput counted_encrypt(const crypto::SymmetricKey& mk, crypto::NonceCounter n,
                                              const Bytes& ad, const Bytes& m, Meter* meter) {
        auto run = [&] { return crypto::aead_encrypt(mk, n, ad, m); };
        if (meter == nullptr) return run();
        return meter->timed(PrimitiveOp::AeadEnc, run);
    }

    static bool counted_tag_check(const crypto::SymmetricKey& mk, crypto::NonceCounter n, const Bytes& ad,
                                  const Bytes& m, const crypto::AeadOutput& received, Meter* meter) {
        auto run = [&] { return crypto::aead_tag_matches(mk, n, ad, m, received); };
        if (meter == nullptr) return run();
        return meter->timed(PrimitiveOp::AeadEnc, run);
    }

    AbortReason counted_accept(const NoisyResponse& noisy, const std::string& expected_label,
                               Meter* meter) const {
        if (!nvm_.model_trained) return AbortReason::ClassifierReject;
        auto run = [&]() -> AbortReason {
            PhenotypeImage img = imgen(noisy, cfg_.image_width, cfg_.image_height);
            auto [label, confidence] = nvm_.model.classify(img);
            if (label != expected_label) return AbortReason::ClassifierReject;
            if (confidence < nvm_.threshold) return AbortReason::LowConfidence;
            return AbortReason::None;
        };
        if (meter == nullptr) return run();
        return meter->timed(PrimitiveOp::Dpan, run);
    }

    Bytes mask_payload(const NoisyResponse& noisy, const BitString& base_stable, const char* context) const {
        crypto::SecretBytes stream =
            crypto::kdf(base_stable.bytes(), noisy.size(), kKdfSalt, context);  // mask expansion, uncounted
        Bytes out = noisy.bytes();
        for (size_t i = 0; i < out.size(); ++i) out[i] ^= stream.bytes()[i];
        return out;
    }

    NoisyResponse unmask_payload(const Bytes& payload, const BitString& base_stable, const char* context) const {
        crypto::SecretBytes stream = crypto::kdf(base_stable.bytes(), 8 * payload.size(), kKdfSalt, context);
        Bytes out = payload;
        for (size_t i = 0; i < out.size(); ++i) out[i] ^= stream.bytes()[i];
        return BitString::from_bytes(std::move(out), 8 * payload.size());
    }

    static DeviceId evolve_id(const DeviceId& id, const crypto::SymmetricKey& mk) {
        Bytes input(id.begin(), id.end());
        input.insert(input.end(), mk.raw().begin(), mk.raw().end());
        return crypto::hash(input);
    }

    /// Pseudonym chain update. The self id advance is one of the two counted
    /// chain hashes; the stored peer id advance mirrors the update the peer
    /// performs (and counts) on its own side.
    void advance_ids(PeerRecord& rec, const crypto::SymmetricKey& mk, Meter* meter) {
        if (meter == nullptr) {
            rec.self_id = evolve_id(rec.self_id, mk);
        } else {
            rec.self_id = meter->timed(PrimitiveOp::Hash, [&] { return evolve_id(rec.self_id, mk); });
        }
        rec.prev_peer_id = rec.peer_id;
        rec.peer_id = evolve_id(rec.peer_id, mk);
    }

    PeerRecord* find_current(const DeviceId& id) {
        for (auto& p : nvm_.peers)
            if (p.peer_id == id) return &p;
        return nullptr;
    }

    std::pair<PeerRecord*, Lookup> find_peer(const DeviceId& id) {
        if (PeerRecord* p = find_current(id)) return {p, Lookup::Found};
        for (auto& p : nvm_.peers)
            if (p.prev_peer_id == id && p.prev_peer_id != p.peer_id) return {nullptr, Lookup::Stale};
        return {nullptr, Lookup::Unknown};
    }

    void upsert_peer(PeerRecord rec) {
        for (auto& p : nvm_.peers) {
            if (p.label == rec.label) {
                p = std::move(rec);
                return;
            }
        }
        nvm_.peers.push_back(std::move(rec));
    }

    static std::string dataset_label(const LabeledDataset& ds) {
        if (ds.items.empty()) throw ProtocolError(AbortReason::Malformed);
        const std::string& label = ds.items.front().label;
        for (const auto& it : ds.items)
            if (it.label != label) throw ProtocolError(AbortReason::Malformed);
        return label;
    }

    const LabeledDataset& own_dataset() {
        if (own_dataset_.items.empty()) {
            Rng ds_rng = Rng(puf_.seed()).fork(stream_tag("enroll-dataset"));
            std::vector<Challenge> challenges;
            const uint32_t region_len = cfg_.region_len_cells();
            const uint64_t n = std::min<uint64_t>(enroll_challenge_count_, puf_.geometry().total_slots());
            for (uint64_t s = 0; s < n; ++s) challenges.push_back({s * region_len, region_len, 0xff, 0});
            own_dataset_ = generate_dataset({{nvm_.label, &puf_}}, challenges, cfg_.full_env_grid(),
                                            enroll_reads_per_point_, ds_rng);
        }
        return own_dataset_;
    }

    void absorb_dataset(const LabeledDataset& ds) {
        std::string label = dataset_label(ds);
        pool_[label] = ds;
    }

    void retrain() {
        LabeledDataset all = own_dataset();
        for (const auto& [label, ds] : pool_) {
            (void)label;
            all.items.insert(all.items.end(), ds.items.begin(), ds.items.end());
        }
        TrainResult tr = train(all);
        nvm_.model = std::move(tr.model);
        nvm_.threshold = tr.threshold;
        nvm_.model_trained = true;
    }

    DpufDevice puf_;
    PufConfig cfg_;
    NvmState nvm_;
    bool enrollment_open_ = true;
    std::optional<PendingEnroll> pending_enroll_;
    std::optional<PendingAuth> pending_;
    LabeledDataset own_dataset_;
    std::map<std::string, LabeledDataset> pool_;
    uint64_t enroll_challenge_count_ = 6;
    uint32_t enroll_reads_per_point_ = 2;
};

/// All-pairs enrollment of a device group over the assumed-secure channel.
/// Every device ends with one model covering every group label and one peer
/// record per other member.
inline void enroll_group(const std::vector<Device*>& devices, Rng& rng) {
    if (devices.size() < 2) throw std::invalid_argument("enrollment needs at least two devices");
    for (size_t i = 0; i < devices.size(); ++i) {
        for (size_t j = i + 1; j < devices.size(); ++j) {
            EnrollRequest req = devices[i]->enroll_initiate(rng);
            EnrollResponse resp = devices[j]->enroll_respond(req, rng);
            devices[i]->enroll_finalize(resp, rng);
        }
    }
    for (Device* d : devices) d->close_enrollment();
}

}  // namespace phenoauth
