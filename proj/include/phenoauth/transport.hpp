#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "phenoauth/bytes.hpp"
#include "phenoauth/metrics.hpp"
#include "phenoauth/protocol.hpp"
#include "phenoauth/wire.hpp"

namespace phenoauth {

enum class Direction : uint8_t { InitiatorToResponder = 0, ResponderToInitiator = 1 };

/// What the channel owner decided to do with one in-flight message.
struct Interposition {
    enum class Kind : uint8_t { Deliver, Drop, Replace, Delay };
    Kind kind = Kind::Deliver;
    Bytes replacement;
    uint32_t delay_steps = 0;

    static Interposition deliver() { return {}; }
    static Interposition drop() { return {Kind::Drop, {}, 0}; }
    static Interposition replace(Bytes b) { return {Kind::Replace, std::move(b), 0}; }
    static Interposition delay(uint32_t steps) { return {Kind::Delay, {}, steps}; }
};

using Interposer = std::function<Interposition(Direction, const Bytes&)>;

struct TranscriptEvent {
    uint64_t step = 0;
    Direction direction = Direction::InitiatorToResponder;
    Bytes original;
    std::optional<Bytes> delivered;  // nullopt: dropped or timed out
};

using Transcript = std::vector<TranscriptEvent>;

struct ChannelClosed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic in-process channel. Every traversal is logged once with its
/// pre- and post-interposition form; a receiver gives up on a message that is
/// delayed past the step budget.
class MemoryChannel {
public:
    explicit MemoryChannel(Interposer hook = {}, uint32_t step_budget = 4)
        : hook_(std::move(hook)), step_budget_(step_budget) {}

    std::optional<Bytes> send(Direction dir, const Bytes& bytes) {
        if (closed_) throw ChannelClosed("channel closed");
        ++step_;
        TranscriptEvent ev{step_, dir, bytes, std::nullopt};
        Interposition act = hook_ ? hook_(dir, bytes) : Interposition::deliver();
        switch (act.kind) {
            case Interposition::Kind::Deliver:
                ev.delivered = bytes;
                break;
            case Interposition::Kind::Drop:
                break;
            case Interposition::Kind::Replace:
                ev.delivered = act.replacement;
                break;
            case Interposition::Kind::Delay:
                step_ += act.delay_steps;
                if (act.delay_steps <= step_budget_) ev.delivered = bytes;
                break;
        }
        log_.push_back(ev);
        return log_.back().delivered;
    }

    const Transcript& transcript() const { return log_; }
    uint64_t steps() const { return step_; }
    void close() { closed_ = true; }

private:
    Interposer hook_;
    uint32_t step_budget_;
    uint64_t step_ = 0;
    bool closed_ = false;
    Transcript log_;
};

struct SessionReport {
    SessionOutcome initiator_outcome;
    SessionOutcome responder_outcome;
    OpCounter initiator_ops;
    OpCounter responder_ops;
    Transcript transcript;
    bool matching = false;  // every message honestly relayed between the two parties
};

inline std::optional<DeviceId> peer_id_by_label(const Device& dev, const std::string& label) {
    for (const auto& rec : dev.nvm().peers)
        if (rec.label == label) return rec.peer_id;
    return std::nullopt;
}

/// Drives one full session between two devices over a channel, mapping
/// drops/decode failures to the protocol's abort semantics: an aborting
/// responder stays silent, so the initiator's view of any remote failure is
/// a timeout.
inline SessionReport run_session(Device& initiator, Device& responder, EnvParams env, Rng& rng,
                                 MemoryChannel& channel, Meter* initiator_meter = nullptr,
                                 Meter* responder_meter = nullptr) {
    SessionReport rep;
    Meter local_im, local_rm;
    Meter* im = initiator_meter ? initiator_meter : &local_im;
    Meter* rm = responder_meter ? responder_meter : &local_rm;

    auto finish = [&](SessionOutcome io, SessionOutcome ro) {
        rep.initiator_outcome = std::move(io);
        rep.responder_outcome = std::move(ro);
        rep.initiator_ops = im->counts();
        rep.responder_ops = rm->counts();
        rep.transcript = channel.transcript();
        return rep;
    };

    std::optional<DeviceId> peer = peer_id_by_label(initiator, responder.label());
    if (!peer)
        return finish(SessionOutcome::abort(AbortReason::UnknownPeer), SessionOutcome::abort(AbortReason::None));

    AuthMessage m1;
    try {
        m1 = initiator.auth_initiate(*peer, env, rng, im);
    } catch (const ProtocolError& e) {
        return finish(SessionOutcome::abort(e.reason), SessionOutcome::abort(AbortReason::None));
    }
    Bytes m1_wire = encode(m1);
    std::optional<Bytes> m1_delivered = channel.send(Direction::InitiatorToResponder, m1_wire);
    if (!m1_delivered) {
        initiator.drop_pending();
        return finish(SessionOutcome::abort(AbortReason::Timeout), SessionOutcome::abort(AbortReason::None));
    }

    Device::RespondResult rr;
    try {
        rr = responder.auth_respond(decode_auth(*m1_delivered), env, rng, rm);
    } catch (const WireError&) {
        rr = {std::nullopt, SessionOutcome::abort(AbortReason::Malformed)};
    }
    if (!rr.response) {
        initiator.drop_pending();
        return finish(SessionOutcome::abort(AbortReason::Timeout), std::move(rr.outcome));
    }

    Bytes m2_wire = encode(*rr.response);
    std::optional<Bytes> m2_delivered = channel.send(Direction::ResponderToInitiator, m2_wire);
    if (!m2_delivered) {
        initiator.drop_pending();
        return finish(SessionOutcome::abort(AbortReason::Timeout), std::move(rr.outcome));
    }

    SessionOutcome io;
    try {
        io = initiator.auth_finalize(decode_auth(*m2_delivered), im);
    } catch (const WireError&) {
        initiator.drop_pending();
        io = SessionOutcome::abort(AbortReason::Malformed);
    }

    rep.matching = *m1_delivered == m1_wire && *m2_delivered == m2_wire;
    return finish(std::move(io), std::move(rr.outcome));
}

// --- Socket transport: u32 little-endian length-prefixed frames over TCP ---

struct SocketError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket() { close_fd(); }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Socket& operator=(Socket&& o) noexcept {
        close_fd();
        fd_ = o.fd_;
        o.fd_ = -1;
        return *this;
    }

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }

    static Socket listen_on(uint16_t port) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw SocketError("socket() failed");
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(fd);
            throw SocketError("bind() failed on port " + std::to_string(port));
        }
        if (::listen(fd, 4) != 0) {
            ::close(fd);
            throw SocketError("listen() failed");
        }
        return Socket(fd);
    }

    Socket accept_one() const {
        int c = ::accept(fd_, nullptr, nullptr);
        if (c < 0) throw SocketError("accept() failed");
        return Socket(c);
    }

    static Socket connect_to(const std::string& host, uint16_t port) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw SocketError("socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
            ::close(fd);
            throw SocketError("bad address: " + host);
        }
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(fd);
            throw SocketError("connect() failed");
        }
        return Socket(fd);
    }

    void send_frame(const Bytes& payload) const {
        Bytes frame;
        put_u32le(frame, static_cast<uint32_t>(payload.size()));
        append(frame, payload);
        size_t sent = 0;
        while (sent < frame.size()) {
            ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, 0);
            if (n <= 0) throw SocketError("send() failed");
            sent += static_cast<size_t>(n);
        }
    }

    std::optional<Bytes> recv_frame(int timeout_ms = 2000) const {
        timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
        Bytes header(4);
        if (!recv_exact(header.data(), 4)) return std::nullopt;
        uint32_t len = read_u32le(header.data());
        if (len > (1u << 26)) throw SocketError("oversized frame");
        Bytes payload(len);
        if (len > 0 && !recv_exact(payload.data(), len)) return std::nullopt;
        return payload;
    }

private:
    bool recv_exact(uint8_t* dst, size_t n) const {
        size_t got = 0;
        while (got < n) {
            ssize_t r = ::recv(fd_, dst + got, n - got, 0);
            if (r <= 0) return false;
            got += static_cast<size_t>(r);
        }
        return true;
    }

    void close_fd() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

    int fd_ = -1;
};

/// Responder loop for a socket endpoint: serves session requests until the
/// requested count or a receive timeout.
inline std::vector<SessionOutcome> serve_sessions(Device& device, Socket& listener, int n_sessions,
                                                  EnvParams env, Rng& rng, int timeout_ms = 5000) {
    std::vector<SessionOutcome> outcomes;
    for (int i = 0; i < n_sessions; ++i) {
        Socket conn = listener.accept_one();
        std::optional<Bytes> frame = conn.recv_frame(timeout_ms);
        if (!frame) {
            outcomes.push_back(SessionOutcome::abort(AbortReason::Timeout));
            continue;
        }
        Device::RespondResult rr;
        try {
            rr = device.auth_respond(decode_auth(*frame), env, rng, nullptr);
        } catch (const WireError&) {
            rr = {std::nullopt, SessionOutcome::abort(AbortReason::Malformed)};
        }
        if (rr.response) conn.send_frame(encode(*rr.response));
        outcomes.push_back(std::move(rr.outcome));
    }
    return outcomes;
}

inline SessionOutcome run_socket_session(Device& initiator, const std::string& host, uint16_t port,
                                         const std::string& peer_label, EnvParams env, Rng& rng,
                                         int timeout_ms = 5000) {
    std::optional<DeviceId> peer = peer_id_by_label(initiator, peer_label);
    if (!peer) return SessionOutcome::abort(AbortReason::UnknownPeer);
    AuthMessage m1;
    try {
        m1 = initiator.auth_initiate(*peer, env, rng, nullptr);
    } catch (const ProtocolError& e) {
        return SessionOutcome::abort(e.reason);
    }
    Socket conn = Socket::connect_to(host, port);
    conn.send_frame(encode(m1));
    std::optional<Bytes> reply = conn.recv_frame(timeout_ms);
    if (!reply) {
        initiator.drop_pending();
        return SessionOutcome::abort(AbortReason::Timeout);
    }
    try {
        return initiator.auth_finalize(decode_auth(*reply), nullptr);
    } catch (const WireError&) {
        initiator.drop_pending();
        return SessionOutcome::abort(AbortReason::Malformed);
    }
}

}  // namespace phenoauth
