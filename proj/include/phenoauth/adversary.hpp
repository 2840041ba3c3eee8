#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenoauth/protocol.hpp"
#include "phenoauth/transport.hpp"

namespace phenoauth {

/// One channel run observed by the harness, with the bookkeeping the
/// security games need: whether the messages were honestly relayed between
/// two valid devices, and whether the session counts as clean.
struct SessionRecord {
    size_t index = 0;
    std::string initiator_label;
    std::string responder_label;
    bool adversary_endpoint = false;
    bool matching = false;
    bool no_live_tampering = true;  // no Reveal/Corrupt while the session ran
    SessionOutcome initiator_outcome;
    SessionOutcome responder_outcome;
    Transcript transcript;
};

struct GameResult {
    std::string game;
    std::string strategy;
    uint64_t trials = 0;
    uint64_t adversary_wins = 0;
    uint64_t clean_trials = 0;
    uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"game", game},       {"strategy", strategy},       {"trials", trials},
                {"wins", adversary_wins}, {"clean_trials", clean_trials}, {"seed", seed}};
    }
};

/// Executable realization of the oracle interface: Launch, Send (via the
/// channel's Replace hook), Issue, Reveal, Corrupt and Block, plus the
/// cleanness and matching-session bookkeeping the games are judged by.
class OracleContext {
public:
    explicit OracleContext(std::vector<Device*> devices, uint64_t seed)
        : devices_(std::move(devices)), rng_(seed), seed_(seed) {}

    Rng& rng() { return rng_; }
    uint64_t seed() const { return seed_; }
    const std::vector<SessionRecord>& sessions() const { return sessions_; }
    bool any_issue() const { return any_issue_; }

    /// Cleanness is game-scoped with respect to the Issue oracle: one Issue
    /// voids every session of the game, past and future. Reveal/Corrupt only
    /// void the session they interrupt.
    bool session_clean(const SessionRecord& rec) const { return rec.no_live_tampering && !any_issue_; }
    bool session_clean(size_t index) const { return session_clean(sessions_.at(index)); }

    /// Launch: a new session between two registered devices, the adversary
    /// owning the channel. A launch issued while another session is running
    /// (i.e. from inside an interposer) is queued and run afterwards.
    std::optional<size_t> launch(Device& initiator, Device& responder, Interposer hook = {},
                                 bool adversary_endpoint = false) {
        if (running_) {
            queued_.push_back({&initiator, &responder, std::move(hook), adversary_endpoint});
            return std::nullopt;
        }
        size_t index = run_one(initiator, responder, std::move(hook), adversary_endpoint);
        while (!queued_.empty()) {
            Queued q = std::move(queued_.front());
            queued_.pop_front();
            run_one(*q.initiator, *q.responder, std::move(q.hook), q.adversary_endpoint);
        }
        return index;
    }

    /// Send oracle: deliver an arbitrary attacker-chosen request into a
    /// session. All injection goes through the channel's Replace hook, so
    /// there is exactly one path onto the wire; the victim initiator's own
    /// request is what gets replaced.
    std::optional<size_t> send_request(Device& victim_initiator, Device& responder, Bytes wire) {
        auto hook = [wire = std::move(wire)](Direction dir, const Bytes&) {
            if (dir == Direction::InitiatorToResponder) return Interposition::replace(wire);
            return Interposition::deliver();
        };
        return launch(victim_initiator, responder, hook);
    }

    /// Reveal oracle: full serialized NVM. Invoking it while the protocol is
    /// running on the device clears the current session's cleanness.
    std::string reveal_nvm(const Device& dev) {
        if (running_ && device_in_current_session(dev)) current_clean_ = false;
        return dev.nvm_snapshot();
    }

    /// Corrupt oracle: arbitrary NVM mutation under the same cleanness rule.
    void corrupt_nvm(Device& dev, const std::function<void(NvmState&)>& fn) {
        if (running_ && device_in_current_session(dev)) current_clean_ = false;
        dev.mutate_nvm(fn);
    }

    /// Issue oracle: physical access to the PUF. Breaks cleanness for the
    /// whole game.
    std::pair<NoisyResponse, StableResponse> issue_dpuf(const Device& dev, const Challenge& ch,
                                                        EnvParams env) {
        any_issue_ = true;
        return dev.issue_query(ch, env, rng_);
    }

    /// Block oracle as an interposer: drops the n-th traversal (1 = request,
    /// 2 = response) of the session it is installed on.
    static Interposer block_message(uint32_t n) {
        auto counter = std::make_shared<uint32_t>(0);
        return [counter, n](Direction, const Bytes&) {
            if (++*counter == n) return Interposition::drop();
            return Interposition::deliver();
        };
    }

private:
    struct Queued {
        Device* initiator;
        Device* responder;
        Interposer hook;
        bool adversary_endpoint;
    };

    bool device_in_current_session(const Device& dev) const {
        return current_devices_.count(&dev) != 0;
    }

    size_t run_one(Device& initiator, Device& responder, Interposer hook, bool adversary_endpoint) {
        running_ = true;
        current_clean_ = true;
        current_devices_ = {&initiator, &responder};
        MemoryChannel channel(std::move(hook));
        EnvParams env = random_env(initiator.config());
        SessionReport rep = run_session(initiator, responder, env, rng_, channel);
        running_ = false;
        current_devices_.clear();

        SessionRecord rec;
        rec.index = sessions_.size();
        rec.initiator_label = initiator.label();
        rec.responder_label = responder.label();
        rec.adversary_endpoint = adversary_endpoint;
        rec.matching = rep.matching && !adversary_endpoint;
        rec.no_live_tampering = current_clean_;
        rec.initiator_outcome = std::move(rep.initiator_outcome);
        rec.responder_outcome = std::move(rep.responder_outcome);
        rec.transcript = std::move(rep.transcript);
        sessions_.push_back(std::move(rec));
        return sessions_.back().index;
    }

    EnvParams random_env(const PufConfig& cfg) {
        return {static_cast<uint32_t>(rng_.below(cfg.temp_grid.size())),
                static_cast<uint32_t>(rng_.below(cfg.volt_grid.size()))};
    }

    std::vector<Device*> devices_;
    Rng rng_;
    uint64_t seed_;
    std::vector<SessionRecord> sessions_;
    std::deque<Queued> queued_;
    bool running_ = false;
    bool current_clean_ = true;
    bool any_issue_ = false;
    std::set<const Device*> current_devices_;
};

/// A session counts as an adversary win when an acceptor reached Success
/// without an honest matching partner.
inline bool is_win(const SessionRecord& rec) {
    return !rec.matching && (rec.responder_outcome.success || rec.initiator_outcome.success);
}

enum class MuStrategy { Replay, RandomForge, BitTamper, NvmCloneWithoutPuf, WhiteBox };

inline const char* mu_strategy_name(MuStrategy s) {
    switch (s) {
        case MuStrategy::Replay: return "replay";
        case MuStrategy::RandomForge: return "random-forge";
        case MuStrategy::BitTamper: return "bit-tamper";
        case MuStrategy::NvmCloneWithoutPuf: return "nvm-clone-without-puf";
        case MuStrategy::WhiteBox: return "whitebox";
    }
    return "?";
}

namespace adversary_detail {

inline Bytes random_wire_request(Rng& rng, const PufConfig& cfg) {
    AuthMessage m;
    m.type = MsgType::AuthReq;
    m.role = RoleFlag::AuthReq;
    for (auto& b : m.ad.dev_id) b = rng.byte();
    m.ad.delta1.resize(cfg.stable_bits / 8);
    m.ad.delta2.resize(cfg.stable_bits / 8);
    for (auto& b : m.ad.delta1) b = rng.byte();
    for (auto& b : m.ad.delta2) b = rng.byte();
    m.noisy_payload.resize(cfg.region_len_cells() / 8);
    for (auto& b : m.noisy_payload) b = rng.byte();
    m.alpha = {rng.byte()};
    for (auto& b : m.tag) b = rng.byte();
    return encode(m);
}

/// Forged request targeting a known pseudonym: everything else random.
inline Bytes forged_request_for(const DeviceId& peer_id, Rng& rng, const PufConfig& cfg) {
    Bytes wire = random_wire_request(rng, cfg);
    AuthMessage m = decode_auth(wire);
    m.ad.dev_id = peer_id;
    return encode(m);
}

/// Honest-prover emulation driven entirely by the Issue oracle plus a
/// one-time NVM reveal: what a fully white-box adversary can do.
struct WhiteBoxProver {
    DeviceId self_id{};
    Challenge challenge;
    BitString pair_mask;  // unused by the initiator path, kept for fidelity
    const Device* target = nullptr;

    static WhiteBoxProver capture(OracleContext& ctx, const Device& target, const std::string& pair_label) {
        // Reveal between sessions: pseudonym, current challenge, pair mask.
        nlohmann::json j = nlohmann::json::parse(ctx.reveal_nvm(target));
        WhiteBoxProver wb;
        wb.target = &target;
        for (const auto& pj : j.at("peers")) {
            if (pj.at("label").get<std::string>() != pair_label) continue;
            wb.self_id = nvm_detail::id_from_b64(pj.at("self_id").get<std::string>());
            Bytes ch = base64_decode(pj.at("challenge").get<std::string>());
            wb.challenge = deserialize_challenge(ch.data(), ch.size());
            wb.pair_mask = BitString::from_bytes(base64_decode(pj.at("pair_mask").get<std::string>()),
                                                 pj.at("pair_mask_bits").get<size_t>());
            return wb;
        }
        throw std::runtime_error("white-box capture: pairing not found in revealed NVM");
    }

    Bytes forge_request(OracleContext& ctx, EnvParams env) {
        const PufConfig& cfg = target->config();
        auto [noisy_now, base_stable] = ctx.issue_dpuf(*target, challenge, env);
        (void)noisy_now;
        crypto::SymmetricKey mk = crypto::SymmetricKey::from_secret(
            crypto::kdf(base_stable.bytes(), 8 * crypto::kKeySize, kKdfSalt, kCtxSessionKey),
            crypto::KeyRole::SessionKey);
        Challenge next = derive_next_challenge(challenge, mk, target->puf().geometry());
        auto [noisy_next, stable_next] = ctx.issue_dpuf(*target, next, env);

        crypto::SecretBytes stream =
            crypto::kdf(base_stable.bytes(), noisy_next.size(), kKdfSalt, kCtxMaskReq);
        Bytes payload = noisy_next.bytes();
        for (size_t i = 0; i < payload.size(); ++i) payload[i] ^= stream.bytes()[i];

        AuthMessage m;
        m.type = MsgType::AuthReq;
        m.role = RoleFlag::AuthReq;
        m.ad.dev_id = self_id;
        m.ad.delta1 = Bytes(payload.begin(), payload.begin() + cfg.stable_bits / 8);
        m.ad.delta2 = (base_stable ^ stable_next).bytes();
        m.noisy_payload = payload;
        Bytes ad_bytes = auth_ad_bytes(m.role, m.ad, m.noisy_payload);
        crypto::AeadOutput sealed =
            crypto::aead_encrypt(mk, crypto::NonceCounter::initiator(0), ad_bytes, kPlainAuthReq);
        m.alpha = sealed.ciphertext;
        m.tag = sealed.tag;

        // Track state like the impersonated prover would.
        challenge = next;
        Bytes id_in(self_id.begin(), self_id.end());
        id_in.insert(id_in.end(), mk.raw().begin(), mk.raw().end());
        self_id = crypto::hash(id_in);
        return encode(m);
    }
};

}  // namespace adversary_detail

/// The forgery game: per trial the adversary produces one authentication
/// attempt under the chosen strategy; a win is an acceptance without a
/// matching session. Clean trials never involve the Issue oracle.
inline GameResult run_mu_game(OracleContext& ctx, Device& prover, Device& verifier, MuStrategy strategy,
                              uint64_t trials) {
    GameResult result;
    result.game = "MU";
    result.strategy = mu_strategy_name(strategy);
    result.seed = ctx.seed();

    Rng& rng = ctx.rng();
    const PufConfig& cfg = prover.config();
    EnvParams env{0, 0};

    std::vector<size_t> attempt_indexes;
    std::optional<adversary_detail::WhiteBoxProver> whitebox;
    std::optional<Device> clone;
    if (strategy == MuStrategy::WhiteBox)
        whitebox = adversary_detail::WhiteBoxProver::capture(ctx, prover, verifier.label());
    if (strategy == MuStrategy::NvmCloneWithoutPuf) {
        clone.emplace(prover.label(), rng.next(), cfg);  // different physical PUF
        nlohmann::json snapshot = nlohmann::json::parse(ctx.reveal_nvm(prover));
        NvmState stolen = nvm_from_json(snapshot, {});
        clone->mutate_nvm([&](NvmState& nvm) { nvm = stolen; });
        clone->close_enrollment();
    }

    for (uint64_t t = 0; t < trials; ++t) {
        size_t before = ctx.sessions().size();
        switch (strategy) {
            case MuStrategy::Replay: {
                // Eavesdrop an honest session, then replay its request in a
                // fresh session.
                ctx.launch(prover, verifier);
                const SessionRecord& honest = ctx.sessions().back();
                if (honest.transcript.empty()) break;
                Bytes captured = honest.transcript.front().original;
                ctx.send_request(prover, verifier, std::move(captured));
                break;
            }
            case MuStrategy::RandomForge: {
                // Target the currently valid pseudonym so the forgery is not
                // rejected at the lookup for a trivial reason.
                DeviceId target{};
                for (const auto& rec : verifier.nvm().peers)
                    if (rec.label == prover.label()) target = rec.peer_id;
                ctx.send_request(prover, verifier, adversary_detail::forged_request_for(target, rng, cfg));
                break;
            }
            case MuStrategy::BitTamper: {
                Rng flip(rng.next());
                auto hook = [&flip](Direction dir, const Bytes& bytes) {
                    if (dir != Direction::InitiatorToResponder) return Interposition::deliver();
                    Bytes mod = bytes;
                    size_t bit = 48 + flip.below(8 * mod.size() - 48);  // past the fixed header
                    mod[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
                    return Interposition::replace(std::move(mod));
                };
                ctx.launch(prover, verifier, hook);
                break;
            }
            case MuStrategy::NvmCloneWithoutPuf: {
                ctx.launch(*clone, verifier, {}, /*adversary_endpoint=*/true);
                break;
            }
            case MuStrategy::WhiteBox: {
                Bytes wire = whitebox->forge_request(ctx, env);
                ctx.send_request(prover, verifier, std::move(wire));
                break;
            }
        }
        for (size_t i = before; i < ctx.sessions().size(); ++i) {
            if (ctx.sessions()[i].matching) continue;  // eavesdropped honest runs are not attempts
            attempt_indexes.push_back(i);
        }
    }
    for (size_t i : attempt_indexes) {
        const SessionRecord& rec = ctx.sessions()[i];
        ++result.trials;
        result.clean_trials += ctx.session_clean(rec);
        result.adversary_wins += is_win(rec);
    }
    return result;
}

// --- Indistinguishability game ---

/// Field view of a transcript: for each message, in order, the variable wire
/// fields (dev_id, delta1, delta2, noisy_payload, alpha, tag). Framing
/// constants are public knowledge and excluded.
struct IndSample {
    std::vector<Bytes> fields;

    size_t total_bytes() const {
        size_t n = 0;
        for (const auto& f : fields) n += f.size();
        return n;
    }
};

enum class IndDistinguisher { ByteFrequency, RepeatedField, CrossSessionIdMatcher, KeyOracle };

inline const char* ind_distinguisher_name(IndDistinguisher d) {
    switch (d) {
        case IndDistinguisher::ByteFrequency: return "byte-frequency";
        case IndDistinguisher::RepeatedField: return "repeated-field";
        case IndDistinguisher::CrossSessionIdMatcher: return "cross-session-id-matcher";
        case IndDistinguisher::KeyOracle: return "key-oracle";
    }
    return "?";
}

namespace adversary_detail {

inline void push_fields(IndSample& sample, const AuthMessage& m) {
    sample.fields.push_back(Bytes(m.ad.dev_id.begin(), m.ad.dev_id.end()));
    sample.fields.push_back(m.ad.delta1);
    sample.fields.push_back(m.ad.delta2);
    sample.fields.push_back(m.noisy_payload);
    sample.fields.push_back(m.alpha);
    sample.fields.push_back(Bytes(m.tag.begin(), m.tag.end()));
}

inline IndSample randomized_like(const IndSample& real, Rng& rng) {
    IndSample fake;
    for (const auto& f : real.fields) {
        Bytes r(f.size());
        for (auto& b : r) b = rng.byte();
        fake.fields.push_back(std::move(r));
    }
    return fake;
}

inline bool guess_byte_frequency(const IndSample& s, Rng& rng) {
    // Chi-square of the byte histogram against uniform; a structured stream
    // would light this up. Honest field bytes are keystream-masked or hash
    // outputs, so the statistic stays in the null band for both worlds and
    // the guess degenerates to the prior.
    std::array<uint64_t, 256> hist{};
    uint64_t n = 0;
    for (const auto& f : s.fields)
        for (uint8_t b : f) {
            ++hist[b];
            ++n;
        }
    if (n == 0) return rng.coin();
    double expected = static_cast<double>(n) / 256.0;
    double chi2 = 0;
    for (uint64_t h : hist) {
        double d = static_cast<double>(h) - expected;
        chi2 += d * d / expected;
    }
    // 255 degrees of freedom; flag "real" only far outside the null band.
    return chi2 > 255.0 + 6.0 * std::sqrt(2.0 * 255.0) ? true : rng.coin();
}

inline bool guess_repeated_field(const IndSample& s, Rng& rng) {
    for (size_t i = 0; i < s.fields.size(); ++i)
        for (size_t j = i + 1; j < s.fields.size(); ++j)
            if (s.fields[i].size() >= 16 && s.fields[i] == s.fields[j]) return true;
    return rng.coin();
}

inline bool guess_id_matcher(const IndSample& s, Rng& rng) {
    // dev_id fields sit at stride-6 offsets; a pseudonym reused across the
    // sample means a traceable device.
    std::vector<const Bytes*> ids;
    for (size_t i = 0; i < s.fields.size(); i += 6) ids.push_back(&s.fields[i]);
    for (size_t i = 0; i < ids.size(); ++i)
        for (size_t j = i + 1; j < ids.size(); ++j)
            if (*ids[i] == *ids[j]) return true;
    return rng.coin();
}

inline bool guess_key_oracle(const IndSample& s, const crypto::SecretBytes& mk_bytes) {
    // Control arm: with the session key the tag of the first message can be
    // recomputed exactly.
    if (s.fields.size() < 6) return false;
    AssociatedData ad;
    std::copy(s.fields[0].begin(), s.fields[0].end(), ad.dev_id.begin());
    ad.delta1 = s.fields[1];
    ad.delta2 = s.fields[2];
    Bytes ad_bytes = auth_ad_bytes(RoleFlag::AuthReq, ad, s.fields[3]);
    crypto::SymmetricKey mk = crypto::SymmetricKey::from_secret(mk_bytes, crypto::KeyRole::SessionKey);
    crypto::AeadOutput sealed =
        crypto::aead_encrypt(mk, crypto::NonceCounter::initiator(0), ad_bytes, kPlainAuthReq);
    return s.fields[5].size() == sealed.tag.size() &&
           std::equal(sealed.tag.begin(), sealed.tag.end(), s.fields[5].begin()) &&
           s.fields[4] == sealed.ciphertext;
}

}  // namespace adversary_detail

/// The transcript-privacy game: per trial the challenger presents either the
/// variable fields of a real session transcript (two consecutive sessions
/// for the cross-session matcher) or a same-shape uniformly random sample;
/// the distinguisher guesses which world it is in.
inline GameResult run_ind_game(OracleContext& ctx, Device& a, Device& b, IndDistinguisher d,
                               uint64_t trials) {
    GameResult result;
    result.game = "IND";
    result.strategy = ind_distinguisher_name(d);
    result.seed = ctx.seed();
    Rng& rng = ctx.rng();

    const int sessions_per_trial = d == IndDistinguisher::CrossSessionIdMatcher ? 2 : 1;

    for (uint64_t t = 0; t < trials; ++t) {
        IndSample real;
        crypto::SecretBytes mk;
        bool ok = true;
        for (int s = 0; s < sessions_per_trial; ++s) {
            ctx.launch(a, b);
            const SessionRecord& rec = ctx.sessions().back();
            if (!rec.responder_outcome.success || rec.transcript.size() < 2) {
                ok = false;
                break;
            }
            adversary_detail::push_fields(real, decode_auth(rec.transcript[0].original));
            adversary_detail::push_fields(real, decode_auth(rec.transcript[1].original));
            mk = crypto::SecretBytes(rec.responder_outcome.session_key.bytes());
        }
        if (!ok) continue;

        bool coin_real = rng.coin();
        IndSample shown = coin_real ? real : adversary_detail::randomized_like(real, rng);

        bool guess_real = false;
        switch (d) {
            case IndDistinguisher::ByteFrequency:
                guess_real = adversary_detail::guess_byte_frequency(shown, rng);
                break;
            case IndDistinguisher::RepeatedField:
                guess_real = adversary_detail::guess_repeated_field(shown, rng);
                break;
            case IndDistinguisher::CrossSessionIdMatcher:
                guess_real = adversary_detail::guess_id_matcher(shown, rng);
                break;
            case IndDistinguisher::KeyOracle:
                guess_real = adversary_detail::guess_key_oracle(shown, mk);
                break;
        }
        ++result.trials;
        result.clean_trials += d != IndDistinguisher::KeyOracle;  // key access is a non-clean control
        result.adversary_wins += guess_real == coin_real;
    }
    return result;
}

}  // namespace phenoauth
