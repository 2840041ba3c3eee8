#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace phenoauth {

/// The five primitives the cost model counts, at protocol level: a DPUF
/// query yielding (noisy, stable) responses, a chain-update hash, an
/// AEAD.Enc invocation (encryption or verify-by-re-encryption), a classifier
/// evaluation, and a session-key derivation.
enum class PrimitiveOp : uint8_t { Dpuf = 0, Hash = 1, AeadEnc = 2, Dpan = 3, Kdf = 4 };

inline const char* primitive_name(PrimitiveOp op) {
    switch (op) {
        case PrimitiveOp::Dpuf: return "DPUF";
        case PrimitiveOp::Hash: return "H";
        case PrimitiveOp::AeadEnc: return "AEAD.Enc";
        case PrimitiveOp::Dpan: return "DPAN";
        case PrimitiveOp::Kdf: return "KDF";
    }
    return "?";
}

struct OpCounter {
    uint32_t dpuf = 0;
    uint32_t hash = 0;
    uint32_t aead_enc = 0;
    uint32_t dpan = 0;
    uint32_t kdf = 0;

    bool operator==(const OpCounter&) const = default;

    uint32_t& operator[](PrimitiveOp op) {
        switch (op) {
            case PrimitiveOp::Dpuf: return dpuf;
            case PrimitiveOp::Hash: return hash;
            case PrimitiveOp::AeadEnc: return aead_enc;
            case PrimitiveOp::Dpan: return dpan;
            case PrimitiveOp::Kdf: return kdf;
        }
        return dpuf;
    }

    std::string to_string() const {
        return "{DPUF:" + std::to_string(dpuf) + ", H:" + std::to_string(hash) +
               ", AEAD.Enc:" + std::to_string(aead_enc) + ", DPAN:" + std::to_string(dpan) +
               ", KDF:" + std::to_string(kdf) + "}";
    }
};

/// Per-role instrumentation point: counts primitive invocations within one
/// session and accumulates their wall time.
class Meter {
public:
    void add(PrimitiveOp op, uint64_t ns = 0) {
        counts_[op] += 1;
        ns_[static_cast<size_t>(op)] += ns;
    }

    const OpCounter& counts() const { return counts_; }
    uint64_t nanos(PrimitiveOp op) const { return ns_[static_cast<size_t>(op)]; }

    void reset() {
        counts_ = {};
        ns_ = {};
    }

    /// Times a call and books it under the given primitive.
    template <typename F>
    auto timed(PrimitiveOp op, F&& f) -> decltype(f()) {
        auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            add(op, static_cast<uint64_t>(
                        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
                            .count()));
        } else {
            auto result = f();
            add(op, static_cast<uint64_t>(
                        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0)
                            .count()));
            return result;
        }
    }

private:
    OpCounter counts_{};
    std::array<uint64_t, 5> ns_{};
};

/// Aggregated timing rows over a batch of sessions. Reported numbers are this
/// implementation's own measurements, not a reproduction of any hardware
/// figures.
struct TimingReport {
    struct Row {
        std::string op;
        uint64_t count = 0;
        double mean_ns = 0;
        uint64_t total_ns = 0;
    };
    std::vector<Row> rows;
    uint64_t grand_total_ns = 0;

    static TimingReport aggregate(const std::vector<const Meter*>& meters) {
        TimingReport rep;
        for (PrimitiveOp op : {PrimitiveOp::Dpuf, PrimitiveOp::Hash, PrimitiveOp::AeadEnc,
                               PrimitiveOp::Dpan, PrimitiveOp::Kdf}) {
            Row row;
            row.op = primitive_name(op);
            for (const Meter* m : meters) {
                OpCounter c = m->counts();
                row.count += c[op];
                row.total_ns += m->nanos(op);
            }
            row.mean_ns = row.count == 0 ? 0.0 : static_cast<double>(row.total_ns) / static_cast<double>(row.count);
            rep.grand_total_ns += row.total_ns;
            rep.rows.push_back(row);
        }
        return rep;
    }

    std::string to_csv() const {
        std::string out = "op,count,mean_ns,total_ns\n";
        for (const auto& r : rows)
            out += r.op + "," + std::to_string(r.count) + "," + std::to_string(r.mean_ns) + "," +
                   std::to_string(r.total_ns) + "\n";
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows)
            j.push_back({{"op", r.op}, {"count", r.count}, {"mean_ns", r.mean_ns}, {"total_ns", r.total_ns}});
        return j;
    }
};

}  // namespace phenoauth
