#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "phenoauth/bytes.hpp"
#include "phenoauth/crypto.hpp"
#include "phenoauth/prng.hpp"

namespace phenoauth {

struct BadConfig : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct OutOfRange : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct InsufficientStableCells : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Index pair into the configured temperature/voltage grids.
struct EnvParams {
    uint32_t temp_idx = 0;
    uint32_t volt_idx = 0;

    bool operator==(const EnvParams&) const = default;
};

/// One read request: a contiguous cell region plus the written pattern and
/// the session counter it belongs to.
struct Challenge {
    uint64_t region_start = 0;
    uint32_t region_len = 0;  // cells (= bits)
    uint8_t pattern = 0xff;
    uint64_t session_index = 0;

    bool operator==(const Challenge&) const = default;
};

/// Fixed wire/NVM encoding: region_start u64 LE, region_len u32 LE,
/// pattern u8, session_index u64 LE.
inline Bytes serialize_challenge(const Challenge& c) {
    Bytes out;
    out.reserve(21);
    put_u64le(out, c.region_start);
    put_u32le(out, c.region_len);
    out.push_back(c.pattern);
    put_u64le(out, c.session_index);
    return out;
}

inline Challenge deserialize_challenge(const uint8_t* p, size_t n) {
    if (n != 21) throw std::invalid_argument("challenge encoding must be 21 bytes");
    Challenge c;
    c.region_start = read_u64le(p);
    c.region_len = read_u32le(p + 8);
    c.pattern = p[12];
    c.session_index = read_u64le(p + 13);
    return c;
}

struct PufConfig {
    uint64_t cell_count = 1ull << 20;

    // Bias model: a fraction of cells pinned near the rails, the rest a
    // symmetric Beta body. The rail fraction is the measured floor for
    // >99%-reliable DRAM cells.
    double f_super = 0.0267;
    double rail_eps = 1e-4;
    double beta_a = 0.15;

    // Environmental sensitivity (log-odds per unit of normalized deviation).
    double env_temp_sigma = 0.25;
    double env_volt_sigma = 0.25;

    // Device-characteristic layout texture: a log-odds field constant over
    // tiles of the region (one value per tile, iid per device) with period
    // equal to one challenge region, so every region expresses the same
    // per-device pattern.
    uint32_t texture_tiles = 16;
    double texture_sigma = 2.6;
    double texture_dc_sigma = 0.8;

    uint32_t image_width = 64;
    uint32_t image_height = 64;

    std::vector<int> temp_grid = {20, 40, 60};
    std::vector<int> volt_grid = {1200, 1260};
    double temp_nominal = 40.0, temp_scale = 20.0;
    double volt_nominal = 1200.0, volt_scale = 60.0;

    // Stable-readout parameters.
    uint32_t stable_bits = 256;        // l
    uint32_t stable_read_votes = 15;   // odd majority per stable cell
    uint32_t reliability_repeats = 300;  // r
    double error_threshold = 0.01;     // t_e; stability threshold is 1 - t_e

    uint32_t region_len_cells() const { return 8u * image_width * image_height; }

    void validate() const {
        if (cell_count == 0) throw BadConfig("cell_count must be nonzero");
        if (!(f_super > 0.0 && f_super <= 1.0)) throw BadConfig("f_super must be in (0,1]");
        if (image_width == 0 || image_height == 0) throw BadConfig("image dimensions must be nonzero");
        if (cell_count % region_len_cells() != 0)
            throw BadConfig("cell_count must be a multiple of the region length");
        if (cell_count < 2ull * region_len_cells())
            throw BadConfig("device must hold at least two challenge regions");
        if (temp_grid.empty() || volt_grid.empty()) throw BadConfig("environment grids must be nonempty");
        if (stable_read_votes % 2 == 0) throw BadConfig("stable_read_votes must be odd");
        if (!(error_threshold > 0.0 && error_threshold < 0.5))
            throw BadConfig("error_threshold must be in (0, 0.5)");
    }

    std::vector<EnvParams> full_env_grid() const {
        std::vector<EnvParams> grid;
        for (uint32_t t = 0; t < temp_grid.size(); ++t)
            for (uint32_t v = 0; v < volt_grid.size(); ++v) grid.push_back({t, v});
        return grid;
    }
};

struct DeviceGeometry {
    uint64_t cell_count = 0;
    uint32_t region_len = 0;

    /// Challenge regions reachable by the hash chain: region-aligned offsets
    /// reduced mod (cell_count - region_len).
    uint64_t chain_slots() const { return (cell_count - region_len) / region_len; }
    uint64_t total_slots() const { return cell_count / region_len; }
};

using NoisyResponse = BitString;
using StableResponse = BitString;

/// Cells pre-selected as reliable across the environment grid, with the
/// majority value each one reads. The polarity half never leaves volatile
/// memory; persistent state keeps indices only.
struct StableChallenge {
    std::vector<uint64_t> cell_indices;
    BitString expected_polarity;
};

/// Statistical model of one DRAM PUF instance: a per-cell read-1 probability
/// in log-odds form, per-cell environmental sensitivities, and a per-device
/// periodic layout texture. Immutable after construction; reads draw from a
/// caller-owned stream.
class DpufDevice {
public:
    DpufDevice(uint64_t device_seed, PufConfig cfg) : cfg_(std::move(cfg)), seed_(device_seed) {
        cfg_.validate();
        const uint64_t n = cfg_.cell_count;
        logit_.resize(n);
        env_t_.resize(n);
        env_v_.resize(n);

        Rng root(device_seed);
        Rng bias_rng = root.fork(stream_tag("bias"));
        Rng env_rng = root.fork(stream_tag("env"));
        Rng tex_rng = root.fork(stream_tag("texture"));

        const double rail_logit = std::log((1.0 - cfg_.rail_eps) / cfg_.rail_eps);
        for (uint64_t c = 0; c < n; ++c) {
            if (bias_rng.u01() < cfg_.f_super) {
                logit_[c] = static_cast<float>(bias_rng.coin() ? rail_logit : -rail_logit);
            } else {
                double p = sample_beta(bias_rng, cfg_.beta_a);
                p = std::min(1.0 - 1e-9, std::max(1e-9, p));
                logit_[c] = static_cast<float>(std::log(p / (1.0 - p)));
            }
            env_t_[c] = static_cast<float>(env_rng.normal() * cfg_.env_temp_sigma);
            env_v_[c] = static_cast<float>(env_rng.normal() * cfg_.env_volt_sigma);
        }

        build_texture(tex_rng);
    }

    /// Test hook: exact per-cell biases (0 and 1 are honored exactly), no
    /// environmental sensitivity, no texture.
    static DpufDevice from_biases(const std::vector<double>& biases, PufConfig cfg) {
        DpufDevice d(0, std::move(cfg), biases.size());
        for (size_t c = 0; c < biases.size(); ++c) {
            double p = biases[c];
            if (p <= 0.0)
                d.logit_[c] = -std::numeric_limits<float>::infinity();
            else if (p >= 1.0)
                d.logit_[c] = std::numeric_limits<float>::infinity();
            else
                d.logit_[c] = static_cast<float>(std::log(p / (1.0 - p)));
        }
        return d;
    }

    const PufConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    uint64_t cell_count() const { return logit_.size(); }
    DeviceGeometry geometry() const { return {cell_count(), cfg_.region_len_cells()}; }

    /// Read-1 probability of a cell under the given environment point.
    double p_effective(uint64_t cell, const EnvParams& env) const {
        check_env(env);
        double t_dev = (cfg_.temp_grid[env.temp_idx] - cfg_.temp_nominal) / cfg_.temp_scale;
        double v_dev = (cfg_.volt_grid[env.volt_idx] - cfg_.volt_nominal) / cfg_.volt_scale;
        return p_from_logit(cell_logit(cell) + t_dev * env_t_[cell] + v_dev * env_v_[cell]);
    }

    double p_nominal(uint64_t cell) const { return p_from_logit(cell_logit(cell)); }

    /// One noisy readout of a challenge region: each bit an independent
    /// Bernoulli draw under the cell's effective probability.
    NoisyResponse read(const Challenge& ch, const EnvParams& env, Rng& rng) const {
        if (ch.region_start + ch.region_len > cell_count())
            throw OutOfRange("challenge region exceeds device");
        check_env(env);
        double t_dev = (cfg_.temp_grid[env.temp_idx] - cfg_.temp_nominal) / cfg_.temp_scale;
        double v_dev = (cfg_.volt_grid[env.volt_idx] - cfg_.volt_nominal) / cfg_.volt_scale;
        NoisyResponse r(ch.region_len);
        for (uint32_t j = 0; j < ch.region_len; ++j) {
            uint64_t c = ch.region_start + j;
            double p = p_from_logit(cell_logit(c) + t_dev * env_t_[c] + v_dev * env_v_[c]);
            r.set(j, rng.u01() < p);
        }
        return r;
    }

    /// Readout of pre-selected stable cells: per-cell majority over an odd
    /// number of raw reads (votes = 1 degenerates to a single raw read).
    StableResponse read_stable(const StableChallenge& sc, const EnvParams& env, Rng& rng) const {
        check_env(env);
        double t_dev = (cfg_.temp_grid[env.temp_idx] - cfg_.temp_nominal) / cfg_.temp_scale;
        double v_dev = (cfg_.volt_grid[env.volt_idx] - cfg_.volt_nominal) / cfg_.volt_scale;
        const uint32_t votes = cfg_.stable_read_votes;
        StableResponse out(sc.cell_indices.size());
        for (size_t j = 0; j < sc.cell_indices.size(); ++j) {
            uint64_t c = sc.cell_indices[j];
            if (c >= cell_count()) throw OutOfRange("stable cell index exceeds device");
            double p = p_from_logit(cell_logit(c) + t_dev * env_t_[c] + v_dev * env_v_[c]);
            uint32_t ones = 0;
            for (uint32_t k = 0; k < votes; ++k) ones += rng.u01() < p ? 1u : 0u;
            out.set(j, ones * 2 > votes);
        }
        return out;
    }

    /// Majority value of each region cell under nominal conditions; used by
    /// uniqueness checks, not by the protocol.
    BitString majority_readout(const Challenge& ch) const {
        if (ch.region_start + ch.region_len > cell_count())
            throw OutOfRange("challenge region exceeds device");
        BitString r(ch.region_len);
        for (uint32_t j = 0; j < ch.region_len; ++j) r.set(j, p_nominal(ch.region_start + j) > 0.5);
        return r;
    }

    /// Ground-truth reliability over the full configured environment grid:
    /// the worst-case probability of reading the cell's majority value, or
    /// 0.5 when the majority value itself changes with the environment.
    double ground_truth_reliability(uint64_t cell) const {
        bool first = true;
        bool majority = false;
        double worst = 1.0;
        for (uint32_t t = 0; t < cfg_.temp_grid.size(); ++t) {
            for (uint32_t v = 0; v < cfg_.volt_grid.size(); ++v) {
                double p = p_effective(cell, {t, v});
                bool maj = p > 0.5;
                if (first) {
                    majority = maj;
                    first = false;
                } else if (maj != majority) {
                    return 0.5;
                }
                worst = std::min(worst, maj ? p : 1.0 - p);
            }
        }
        return worst;
    }

    double super_stable_fraction(double threshold = 0.99) const {
        uint64_t count = 0;
        for (uint64_t c = 0; c < cell_count(); ++c)
            if (ground_truth_reliability(c) > threshold) ++count;
        return static_cast<double>(count) / static_cast<double>(cell_count());
    }

private:
    DpufDevice(uint64_t seed, PufConfig cfg, size_t cells) : cfg_(std::move(cfg)), seed_(seed) {
        logit_.assign(cells, 0.0f);
        env_t_.assign(cells, 0.0f);
        env_v_.assign(cells, 0.0f);
        texture_.assign(cfg_.image_width * cfg_.image_height, 0.0f);
        texture_period_ = cfg_.region_len_cells();
    }

    static double sample_beta(Rng& rng, double a) {
        // Johnk's method for Beta(a, a); acceptance rate ~0.97 at a = 0.15.
        for (;;) {
            double u = rng.u01();
            double v = rng.u01();
            if (u == 0.0 || v == 0.0) continue;
            double x = std::pow(u, 1.0 / a);
            double y = std::pow(v, 1.0 / a);
            double s = x + y;
            if (s > 0.0 && s <= 1.0) return x / s;
        }
    }

    void build_texture(Rng& rng) {
        const uint32_t w = cfg_.image_width, h = cfg_.image_height;
        texture_.assign(static_cast<size_t>(w) * h, 0.0f);
        texture_period_ = cfg_.region_len_cells();

        const uint32_t tiles = std::min({cfg_.texture_tiles, w, h});
        const double dc = rng.normal() * cfg_.texture_dc_sigma;
        std::vector<float> tile_vals(static_cast<size_t>(tiles) * tiles);
        for (auto& v : tile_vals) v = static_cast<float>(dc + rng.normal() * cfg_.texture_sigma);
        for (uint32_t py = 0; py < h; ++py) {
            const uint32_t ty = py * tiles / h;
            for (uint32_t px = 0; px < w; ++px) {
                const uint32_t tx = px * tiles / w;
                texture_[static_cast<size_t>(py) * w + px] = tile_vals[static_cast<size_t>(ty) * tiles + tx];
            }
        }
    }

    double cell_logit(uint64_t c) const {
        double base = logit_[c];
        if (!std::isfinite(base)) return base;  // degenerate test biases stay exact
        uint64_t pos = c % texture_period_;
        return base + texture_[pos >> 3];
    }

    static double p_from_logit(double l) {
        if (l == std::numeric_limits<double>::infinity()) return 1.0;
        if (l == -std::numeric_limits<double>::infinity()) return 0.0;
        return 1.0 / (1.0 + std::exp(-l));
    }

    void check_env(const EnvParams& env) const {
        if (env.temp_idx >= cfg_.temp_grid.size() || env.volt_idx >= cfg_.volt_grid.size())
            throw OutOfRange("environment index outside configured grid");
    }

    PufConfig cfg_;
    uint64_t seed_;
    std::vector<float> logit_;
    std::vector<float> env_t_;
    std::vector<float> env_v_;
    std::vector<float> texture_;
    uint64_t texture_period_ = 0;
};

/// Next challenge in the hash chain: digest of serialize(C_i) ‖ mk, mapped to
/// a region-aligned offset mod (cell_count - region_len) with the first
/// digest byte as the new write pattern.
inline Challenge derive_next_challenge(const Challenge& c, const crypto::SymmetricKey& mk,
                                       const DeviceGeometry& geom) {
    Bytes input = serialize_challenge(c);
    input.insert(input.end(), mk.raw().begin(), mk.raw().end());
    crypto::Digest d = crypto::hash(input);

    Challenge next;
    next.region_len = geom.region_len;
    next.pattern = d[0];
    uint64_t raw = read_u64le(d.data() + 8);
    next.region_start = (raw % geom.chain_slots()) * geom.region_len;
    next.session_index = c.session_index + 1;
    return next;
}

}  // namespace phenoauth
