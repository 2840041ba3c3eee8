#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenoauth/bytes.hpp"
#include "phenoauth/puf.hpp"
#include "phenoauth/prng.hpp"

namespace phenoauth {

struct LengthMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Grayscale encoding of a noisy response: pixel (row, col) is the byte built
/// MSB-first from response bits [8k, 8k+8) at k = row*width + col.
struct PhenotypeImage {
    uint32_t width = 0;
    uint32_t height = 0;
    Bytes pixels;  // row-major, width*height entries in [0,255]

    bool operator==(const PhenotypeImage&) const = default;
};

inline PhenotypeImage imgen(const NoisyResponse& r, uint32_t w, uint32_t h) {
    if (r.size() != 8ull * w * h) throw LengthMismatch("response length does not match image dimensions");
    // MSB-first packing makes the byte view of the response the pixel array.
    return {w, h, r.bytes()};
}

/// Inverse of imgen for a fixed (w, h): recovers the exact bit sequence.
inline NoisyResponse image_to_response(const PhenotypeImage& img) {
    return BitString::from_bytes(img.pixels, 8ull * img.width * img.height);
}

struct DatasetItem {
    PhenotypeImage image;
    std::string label;
    EnvParams env;
    uint64_t challenge_id = 0;  // region_start of the generating challenge
    uint32_t read_index = 0;
};

struct LabeledDataset {
    std::vector<DatasetItem> items;

    size_t size() const { return items.size(); }
};

/// Phenotype dataset over the (env x device x challenge x repeat) grid, each
/// item labeled with its generating device.
inline LabeledDataset generate_dataset(const std::vector<std::pair<std::string, const DpufDevice*>>& devices,
                                       const std::vector<Challenge>& challenges,
                                       const std::vector<EnvParams>& env_grid, uint32_t reads_per_point,
                                       Rng& rng) {
    if (devices.empty() || challenges.empty() || env_grid.empty() || reads_per_point == 0)
        throw std::invalid_argument("dataset generation needs devices, challenges, envs and reads");
    LabeledDataset ds;
    ds.items.reserve(devices.size() * challenges.size() * env_grid.size() * reads_per_point);
    for (const auto& env : env_grid) {
        for (const auto& [label, dev] : devices) {
            const auto& cfg = dev->config();
            for (const auto& ch : challenges) {
                for (uint32_t k = 0; k < reads_per_point; ++k) {
                    NoisyResponse r = dev->read(ch, env, rng);
                    ds.items.push_back(
                        {imgen(r, cfg.image_width, cfg.image_height), label, env, ch.region_start, k});
                }
            }
        }
    }
    return ds;
}

/// Hamming-weight reliability scan: a cell is kept only when, at every
/// environment point, at least a (1 - t_e) fraction of r repeat reads agree
/// on one value, with the same value at every point. Scanning walks the given
/// challenge regions in order and extends contiguously (wrapping once around
/// the device) when they run out before l cells are found.
inline StableChallenge reliability_analysis(const DpufDevice& device, const std::vector<Challenge>& challenges,
                                            const std::vector<EnvParams>& env_grid, uint32_t r, double t_e,
                                            uint32_t l, Rng& rng) {
    if (r < 100) throw std::invalid_argument("repeat count must be at least 100");
    double t_stable = 1.0 - t_e;
    if (!(t_stable > 0.5 && t_stable <= 1.0)) throw std::invalid_argument("stability threshold must be in (0.5, 1]");
    if (challenges.empty()) throw std::invalid_argument("at least one challenge region required");
    if (env_grid.empty()) throw std::invalid_argument("environment grid must be nonempty");

    const uint64_t n = device.cell_count();
    const uint64_t max_flips = static_cast<uint64_t>(t_e * r + 1e-9);

    StableChallenge sc;
    sc.expected_polarity = BitString(l);
    std::vector<bool> visited(n, false);

    auto probe_cell = [&](uint64_t cell) -> bool {
        bool first = true;
        bool polarity = false;
        for (const auto& env : env_grid) {
            double p = device.p_effective(cell, env);
            uint64_t ones = 0, zeros = 0;
            for (uint32_t k = 0; k < r; ++k) {
                if (rng.u01() < p)
                    ++ones;
                else
                    ++zeros;
                // Once both values exceed the flip budget the cell cannot
                // qualify no matter how the remaining reads land.
                if (ones > max_flips && zeros > max_flips) return false;
            }
            bool maj = ones > zeros;
            uint64_t flips = maj ? zeros : ones;
            if (flips > max_flips) return false;
            if (first) {
                polarity = maj;
                first = false;
            } else if (maj != polarity) {
                return false;
            }
        }
        sc.expected_polarity.set(sc.cell_indices.size(), polarity);
        sc.cell_indices.push_back(cell);
        return true;
    };

    auto scan_range = [&](uint64_t start, uint64_t len) {
        for (uint64_t j = 0; j < len && sc.cell_indices.size() < l; ++j) {
            uint64_t cell = (start + j) % n;
            if (visited[cell]) continue;
            visited[cell] = true;
            probe_cell(cell);
        }
    };

    for (const auto& ch : challenges) {
        if (ch.region_start + ch.region_len > n) throw OutOfRange("challenge region exceeds device");
        scan_range(ch.region_start, ch.region_len);
        if (sc.cell_indices.size() >= l) break;
    }
    if (sc.cell_indices.size() < l) {
        // Extend past the last region, wrapping once over the whole device.
        uint64_t resume = (challenges.back().region_start + challenges.back().region_len) % n;
        scan_range(resume, n);
    }
    if (sc.cell_indices.size() < l)
        throw InsufficientStableCells("candidate pool exhausted before reaching requested length");
    return sc;
}

inline void write_pgm(const PhenotypeImage& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline PhenotypeImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    uint32_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255) throw std::runtime_error("unsupported PGM variant");
    in.get();
    PhenotypeImage img{w, h, Bytes(static_cast<size_t>(w) * h)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!in) throw std::runtime_error("truncated PGM payload");
    return img;
}

/// One PGM per item plus a JSON index listing items and labels.
inline void export_dataset(const LabeledDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    for (const auto& item : ds.items) {
        std::string env_name = "t" + std::to_string(item.env.temp_idx) + "v" + std::to_string(item.env.volt_idx);
        std::string name = item.label + "_" + env_name + "_" + std::to_string(item.challenge_id) + "_" +
                           std::to_string(item.read_index) + ".pgm";
        write_pgm(item.image, dir / name);
        index.push_back({{"file", name},
                         {"label", item.label},
                         {"temp_idx", item.env.temp_idx},
                         {"volt_idx", item.env.volt_idx},
                         {"challenge", item.challenge_id},
                         {"read", item.read_index}});
    }
    std::ofstream out(dir / "index.json");
    out << index.dump(2) << "\n";
}

}  // namespace phenoauth
