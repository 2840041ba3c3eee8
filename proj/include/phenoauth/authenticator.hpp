#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "phenoauth/bytes.hpp"
#include "phenoauth/crypto.hpp"
#include "phenoauth/phenotype.hpp"

namespace phenoauth {

struct InsufficientData : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateLabels : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Reliable / unreliable bit positions of the scanned region, derived from
/// the stability of the training measurements themselves.
struct Characterization {
    std::vector<uint64_t> rdpuf;
    std::vector<uint64_t> udpuf;
};

/// Nearest-centroid phenotype classifier. Features are d x d block means of
/// the grayscale image; confidence is a margin softmax over centroid
/// distances with temperature tau (median pairwise centroid distance).
class PhenotypeModel {
public:
    uint16_t pool_dim = 16;
    uint32_t image_width = 0;   // 0 after load: any divisible image accepted
    uint32_t image_height = 0;
    std::vector<std::string> labels;
    std::vector<std::vector<float>> centroids;
    double tau = 1.0;
    // Feature normalization constants; identity for the reference pipeline.
    float feature_offset = 0.0f;
    float feature_scale = 1.0f;

    std::vector<float> features(const PhenotypeImage& img) const {
        if (img.width == 0 || img.height == 0 || img.width % pool_dim != 0 || img.height % pool_dim != 0)
            throw ShapeMismatch("image dimensions do not pool to the model grid");
        if (image_width != 0 && (img.width != image_width || img.height != image_height))
            throw ShapeMismatch("image dimensions differ from training dimensions");
        const uint32_t bw = img.width / pool_dim, bh = img.height / pool_dim;
        std::vector<float> f(static_cast<size_t>(pool_dim) * pool_dim, 0.0f);
        for (uint32_t y = 0; y < img.height; ++y) {
            const uint32_t by = y / bh;
            for (uint32_t x = 0; x < img.width; ++x) {
                f[static_cast<size_t>(by) * pool_dim + x / bw] +=
                    static_cast<float>(img.pixels[static_cast<size_t>(y) * img.width + x]);
            }
        }
        const float inv = 1.0f / static_cast<float>(bw * bh);
        for (auto& v : f) v = (v * inv - feature_offset) * feature_scale;
        return f;
    }

    std::vector<double> distances(const std::vector<float>& f) const {
        std::vector<double> d(centroids.size(), 0.0);
        for (size_t k = 0; k < centroids.size(); ++k) {
            double acc = 0;
            for (size_t i = 0; i < f.size(); ++i) {
                double diff = static_cast<double>(f[i]) - static_cast<double>(centroids[k][i]);
                acc += diff * diff;
            }
            d[k] = std::sqrt(acc);
        }
        return d;
    }

    /// (label, confidence S). S = exp(-d_best/tau) / sum_k exp(-d_k/tau),
    /// computed in the numerically stable margin form.
    std::pair<std::string, double> classify(const PhenotypeImage& img) const {
        std::vector<double> d = distances(features(img));
        size_t best = static_cast<size_t>(std::min_element(d.begin(), d.end()) - d.begin());
        double denom = 0;
        for (double dk : d) denom += std::exp(-(dk - d[best]) / tau);
        return {labels[best], 1.0 / denom};
    }

    bool has_label(const std::string& label) const {
        return std::find(labels.begin(), labels.end(), label) != labels.end();
    }
};

/// Accept iff the classifier names the expected label with confidence at
/// least the threshold (boundary inclusive).
inline bool accept(const PhenotypeModel& model, double threshold, const PhenotypeImage& img,
                   const std::string& expected_label) {
    auto [label, s] = model.classify(img);
    return label == expected_label && s >= threshold;
}

struct TrainResult {
    PhenotypeModel model;
    double threshold = 1.0;
    Characterization characterization;
    double holdout_accuracy = 0.0;
};

namespace detail {

inline Bytes item_content(const DatasetItem& it) {
    Bytes b;
    put_u32le(b, static_cast<uint32_t>(it.label.size()));
    b.insert(b.end(), it.label.begin(), it.label.end());
    put_u32le(b, it.env.temp_idx);
    put_u32le(b, it.env.volt_idx);
    put_u64le(b, it.challenge_id);
    put_u32le(b, it.read_index);
    put_u32le(b, it.image.width);
    put_u32le(b, it.image.height);
    append(b, it.image.pixels);
    return b;
}

inline PhenotypeImage blend_images(const PhenotypeImage& a, const PhenotypeImage& b, double wa) {
    PhenotypeImage out{a.width, a.height, Bytes(a.pixels.size())};
    for (size_t i = 0; i < out.pixels.size(); ++i) {
        double v = wa * a.pixels[i] + (1.0 - wa) * b.pixels[i];
        out.pixels[i] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

inline PhenotypeImage shuffle_blocks(const PhenotypeImage& img, uint16_t d, Rng& rng) {
    const uint32_t bw = img.width / d, bh = img.height / d;
    std::vector<uint32_t> perm(static_cast<size_t>(d) * d);
    std::iota(perm.begin(), perm.end(), 0u);
    for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    PhenotypeImage out{img.width, img.height, Bytes(img.pixels.size())};
    for (uint32_t by = 0; by < d; ++by) {
        for (uint32_t bx = 0; bx < d; ++bx) {
            uint32_t src = perm[static_cast<size_t>(by) * d + bx];
            uint32_t sy = (src / d) * bh, sx = (src % d) * bw;
            for (uint32_t y = 0; y < bh; ++y)
                for (uint32_t x = 0; x < bw; ++x)
                    out.pixels[static_cast<size_t>((by * bh + y)) * img.width + bx * bw + x] =
                        img.pixels[static_cast<size_t>(sy + y) * img.width + sx + x];
        }
    }
    return out;
}

}  // namespace detail

/// Train the multi-device authenticator. The dataset is canonicalized
/// (deduplicated, content-hash ordered) so the result is invariant to row
/// order; split_ratio goes to centroid estimation and the remainder is split
/// evenly between an accuracy hold-out and a disjoint threshold-tuning set.
/// The confidence threshold is tuned to reject, with zero accepts, a bank of
/// synthetic open-set negatives (uniform noise, cross-label blends, block
/// shuffles) plus every misclassified tuning image.
inline TrainResult train(const LabeledDataset& dataset, double split_ratio = 0.6) {
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw std::invalid_argument("split_ratio must be in (0,1)");

    // Canonical order, duplicates removed.
    std::map<crypto::Digest, const DatasetItem*> canonical;
    for (const auto& it : dataset.items) canonical.emplace(crypto::hash(detail::item_content(it)), &it);

    std::map<std::string, std::vector<const DatasetItem*>> by_label;
    for (const auto& [h, it] : canonical) by_label[it->label].push_back(it);
    if (by_label.size() < 2) throw InsufficientData("training needs at least two device labels");
    for (const auto& [label, items] : by_label)
        if (items.size() < 4) throw InsufficientData("training needs at least four items per label");

    const uint32_t w = dataset.items.front().image.width;
    const uint32_t h = dataset.items.front().image.height;
    PhenotypeModel model;
    model.pool_dim = static_cast<uint16_t>(std::min<uint32_t>(16, std::gcd(w, h)));
    model.image_width = w;
    model.image_height = h;

    std::vector<const DatasetItem*> train_split, test_split, tune_split;
    for (const auto& [label, items] : by_label) {
        size_t n_train = std::max<size_t>(1, static_cast<size_t>(std::ceil(items.size() * split_ratio)));
        n_train = std::min(n_train, items.size() - 2);
        size_t rest = items.size() - n_train;
        size_t n_test = (rest + 1) / 2;
        for (size_t i = 0; i < items.size(); ++i) {
            if (i < n_train)
                train_split.push_back(items[i]);
            else if (i < n_train + n_test)
                test_split.push_back(items[i]);
            else
                tune_split.push_back(items[i]);
        }
    }

    for (const auto& [label, items] : by_label) {
        (void)items;
        model.labels.push_back(label);
    }
    model.centroids.assign(model.labels.size(),
                           std::vector<float>(static_cast<size_t>(model.pool_dim) * model.pool_dim, 0.0f));
    std::vector<size_t> counts(model.labels.size(), 0);
    for (const auto* it : train_split) {
        size_t k = static_cast<size_t>(
            std::find(model.labels.begin(), model.labels.end(), it->label) - model.labels.begin());
        std::vector<float> f = model.features(it->image);
        for (size_t i = 0; i < f.size(); ++i) model.centroids[k][i] += f[i];
        ++counts[k];
    }
    for (size_t k = 0; k < model.centroids.size(); ++k)
        for (auto& v : model.centroids[k]) v /= static_cast<float>(counts[k]);

    // Temperature: median pairwise centroid distance.
    std::vector<double> pairwise;
    for (size_t a = 0; a < model.centroids.size(); ++a) {
        for (size_t b = a + 1; b < model.centroids.size(); ++b) {
            double acc = 0;
            for (size_t i = 0; i < model.centroids[a].size(); ++i) {
                double diff = model.centroids[a][i] - model.centroids[b][i];
                acc += diff * diff;
            }
            pairwise.push_back(std::sqrt(acc));
        }
    }
    std::sort(pairwise.begin(), pairwise.end());

    // Degeneracy: two labels whose centroids sit closer than the noise floor
    // of the training measurements cannot be told apart.
    double intra = 0;
    for (const auto* it : train_split) {
        size_t k = static_cast<size_t>(
            std::find(model.labels.begin(), model.labels.end(), it->label) - model.labels.begin());
        std::vector<float> f = model.features(it->image);
        double acc = 0;
        for (size_t i = 0; i < f.size(); ++i) {
            double diff = static_cast<double>(f[i]) - static_cast<double>(model.centroids[k][i]);
            acc += diff * diff;
        }
        intra += std::sqrt(acc);
    }
    intra /= static_cast<double>(train_split.size());
    if (pairwise.front() < std::max(1e-6, 0.5 * intra))
        throw DegenerateLabels("two device centroids coincide within the measurement noise floor");
    model.tau = pairwise[pairwise.size() / 2];

    TrainResult result;
    result.model = model;

    size_t correct = 0;
    for (const auto* it : test_split) correct += model.classify(it->image).first == it->label;
    result.holdout_accuracy = test_split.empty() ? 0.0 : static_cast<double>(correct) / test_split.size();

    // Threshold tuning: every negative must fall strictly below t-hat.
    Bytes tune_digest_src;
    for (const auto& [hash, it] : canonical) {
        (void)it;
        tune_digest_src.insert(tune_digest_src.end(), hash.begin(), hash.end());
    }
    crypto::Digest tune_seed = crypto::hash(tune_digest_src);
    Rng neg_rng(read_u64le(tune_seed.data()));

    double max_negative = 0.0;
    auto observe = [&](const PhenotypeImage& img) {
        max_negative = std::max(max_negative, model.classify(img).second);
    };

    for (int t = 0; t < 200; ++t) {
        PhenotypeImage noise{w, h, Bytes(static_cast<size_t>(w) * h)};
        for (auto& px : noise.pixels) px = neg_rng.byte();
        observe(noise);
    }
    if (!tune_split.empty()) {
        for (int t = 0; t < 300; ++t) {
            const auto* a = tune_split[neg_rng.below(tune_split.size())];
            const DatasetItem* b = nullptr;
            for (int guard = 0; guard < 32 && (b == nullptr || b->label == a->label); ++guard)
                b = tune_split[neg_rng.below(tune_split.size())];
            if (b == nullptr || b->label == a->label) continue;
            observe(detail::blend_images(a->image, b->image, 0.5));
        }
        for (int t = 0; t < 100; ++t) {
            const auto* a = tune_split[neg_rng.below(tune_split.size())];
            observe(detail::shuffle_blocks(a->image, model.pool_dim, neg_rng));
        }
        for (const auto* it : tune_split) {
            auto [label, s] = model.classify(it->image);
            if (label != it->label) max_negative = std::max(max_negative, s);
        }
    }
    // Slack above the worst observed negative buys out-of-sample headroom
    // without reaching the genuine-image score band.
    result.threshold = std::min(1.0, max_negative + 0.02);

    // Re-scan: the zero-false-positive invariant must hold exactly on the
    // tuning materials.
    for (const auto* it : tune_split) {
        auto [label, s] = model.classify(it->image);
        if (label != it->label && s >= result.threshold)
            throw std::logic_error("threshold re-scan found an accepted impostor");
    }

    // Characterization: bit positions that ever flip between repeat
    // measurements of the same (label, challenge) group are unreliable.
    std::map<std::pair<std::string, uint64_t>, std::vector<const DatasetItem*>> groups;
    for (const auto& [hash, it] : canonical) {
        (void)hash;
        groups[{it->label, it->challenge_id}].push_back(it);
    }
    const uint64_t region_bits = 8ull * w * h;
    std::vector<bool> unstable(region_bits, false);
    for (const auto& [key, items] : groups) {
        (void)key;
        for (size_t i = 1; i < items.size(); ++i) {
            for (uint64_t bit = 0; bit < region_bits; ++bit) {
                uint64_t byte = bit >> 3;
                uint8_t mask = static_cast<uint8_t>(1u << (7 - (bit & 7)));
                if ((items[0]->image.pixels[byte] & mask) != (items[i]->image.pixels[byte] & mask))
                    unstable[bit] = true;
            }
        }
    }
    for (uint64_t bit = 0; bit < region_bits; ++bit)
        (unstable[bit] ? result.characterization.udpuf : result.characterization.rdpuf).push_back(bit);

    return result;
}

/// Versioned binary model encoding: magic "DPAN", format version u16, label
/// count u16, pool dimension u16, then per label a u32-length-prefixed label
/// id plus d*d little-endian f32 centroid values; trailing f64 threshold.
inline Bytes encode_model(const PhenotypeModel& model, double threshold) {
    Bytes out;
    out.insert(out.end(), {'D', 'P', 'A', 'N'});
    out.push_back(1);
    out.push_back(0);  // version 1, u16 LE
    out.push_back(static_cast<uint8_t>(model.labels.size() & 0xff));
    out.push_back(static_cast<uint8_t>(model.labels.size() >> 8));
    out.push_back(static_cast<uint8_t>(model.pool_dim & 0xff));
    out.push_back(static_cast<uint8_t>(model.pool_dim >> 8));
    for (size_t k = 0; k < model.labels.size(); ++k) {
        put_u32le(out, static_cast<uint32_t>(model.labels[k].size()));
        out.insert(out.end(), model.labels[k].begin(), model.labels[k].end());
        for (float v : model.centroids[k]) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32le(out, bits);
        }
    }
    uint64_t tbits;
    std::memcpy(&tbits, &threshold, 8);
    put_u64le(out, tbits);
    return out;
}

inline void save_model(const PhenotypeModel& model, double threshold, const std::filesystem::path& path) {
    Bytes out = encode_model(model, threshold);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open model file for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

inline std::pair<PhenotypeModel, double> decode_model(const Bytes& data) {
    size_t pos = 0;
    auto need = [&](size_t n) {
        if (pos + n > data.size()) throw std::runtime_error("truncated model file");
    };
    need(10);
    if (std::memcmp(data.data(), "DPAN", 4) != 0) throw std::runtime_error("bad model magic");
    uint16_t version = static_cast<uint16_t>(data[4] | data[5] << 8);
    if (version != 1) throw std::runtime_error("unsupported model version");
    uint16_t label_count = static_cast<uint16_t>(data[6] | data[7] << 8);
    PhenotypeModel model;
    model.pool_dim = static_cast<uint16_t>(data[8] | data[9] << 8);
    pos = 10;
    const size_t feat = static_cast<size_t>(model.pool_dim) * model.pool_dim;
    for (uint16_t k = 0; k < label_count; ++k) {
        need(4);
        uint32_t len = read_u32le(data.data() + pos);
        pos += 4;
        need(len);
        model.labels.emplace_back(data.begin() + static_cast<long>(pos),
                                  data.begin() + static_cast<long>(pos + len));
        pos += len;
        need(feat * 4);
        std::vector<float> centroid(feat);
        for (size_t i = 0; i < feat; ++i) {
            uint32_t bits = read_u32le(data.data() + pos);
            pos += 4;
            std::memcpy(&centroid[i], &bits, 4);
        }
        model.centroids.push_back(std::move(centroid));
    }
    need(8);
    uint64_t tbits = read_u64le(data.data() + pos);
    pos += 8;
    double threshold;
    std::memcpy(&threshold, &tbits, 8);
    if (pos != data.size()) throw std::runtime_error("trailing bytes in model file");

    // Temperature is derived state: recompute from the centroids.
    std::vector<double> pairwise;
    for (size_t a = 0; a < model.centroids.size(); ++a) {
        for (size_t b = a + 1; b < model.centroids.size(); ++b) {
            double acc = 0;
            for (size_t i = 0; i < feat; ++i) {
                double diff = model.centroids[a][i] - model.centroids[b][i];
                acc += diff * diff;
            }
            pairwise.push_back(std::sqrt(acc));
        }
    }
    if (!pairwise.empty()) {
        std::sort(pairwise.begin(), pairwise.end());
        model.tau = pairwise[pairwise.size() / 2];
    }
    return {model, threshold};
}

inline std::pair<PhenotypeModel, double> load_model(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open model file: " + path.string());
    Bytes data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_model(data);
}

}  // namespace phenoauth
