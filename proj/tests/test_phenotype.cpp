#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "phenoauth/phenotype.hpp"

using namespace phenoauth;

namespace {

PufConfig small_cfg() {
    PufConfig c;
    c.cell_count = 2ull * c.region_len_cells();  // 65536 cells, two regions
    return c;
}

}  // namespace

TEST_CASE("imgen encodes bytes MSB-first") {
    NoisyResponse zeros(8 * 4 * 4);
    PhenotypeImage img = imgen(zeros, 4, 4);
    for (auto px : img.pixels) CHECK(px == 0);

    NoisyResponse msb(8 * 4 * 4);
    for (size_t i = 0; i < msb.size(); i += 8) msb.set(i, true);  // 10000000 per byte
    img = imgen(msb, 4, 4);
    for (auto px : img.pixels) CHECK(px == 128);
}

TEST_CASE("imgen rejects mismatched lengths and inverts exactly") {
    CHECK_THROWS_AS(imgen(NoisyResponse(100), 4, 4), LengthMismatch);

    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
        NoisyResponse r = BitString::random(8 * 8 * 8, rng);
        PhenotypeImage img = imgen(r, 8, 8);
        CHECK(image_to_response(img) == r);
    }
}

TEST_CASE("dataset generation counts, labels and determinism") {
    PufConfig cfg;
    cfg.image_width = 16;
    cfg.image_height = 16;  // 2048-cell regions
    cfg.cell_count = 2048 * 8;
    DpufDevice d0(50, cfg), d1(51, cfg), d2(52, cfg);
    std::vector<std::pair<std::string, const DpufDevice*>> devices = {
        {"dev0", &d0}, {"dev1", &d1}, {"dev2", &d2}};
    std::vector<Challenge> challenges;
    for (uint64_t s = 0; s < 4; ++s) challenges.push_back({s * 2048, 2048, 0xff, 0});
    auto grid = cfg.full_env_grid();
    REQUIRE(grid.size() == 6);

    Rng rng_a(77);
    LabeledDataset ds = generate_dataset(devices, challenges, grid, 1, rng_a);
    CHECK(ds.size() == 3 * 4 * 6 * 1);
    for (const auto& item : ds.items) {
        const DpufDevice* src = item.label == "dev0" ? &d0 : item.label == "dev1" ? &d1 : &d2;
        CHECK(src != nullptr);
        CHECK(item.image.width == 16);
    }
    size_t dev1_items = 0;
    for (const auto& item : ds.items) dev1_items += item.label == "dev1";
    CHECK(dev1_items == 4 * 6);

    Rng rng_b(77);
    LabeledDataset ds2 = generate_dataset(devices, challenges, grid, 1, rng_b);
    REQUIRE(ds2.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) CHECK(ds.items[i].image == ds2.items[i].image);
}

TEST_CASE("reliability analysis returns genuinely stable cells") {
    PufConfig cfg = small_cfg();
    DpufDevice dev(60, cfg);
    Rng rng(61);
    std::vector<Challenge> challenges = {{0, cfg.region_len_cells(), 0xff, 0}};

    StableChallenge sc = reliability_analysis(dev, challenges, cfg.full_env_grid(),
                                              cfg.reliability_repeats, cfg.error_threshold,
                                              cfg.stable_bits, rng);
    REQUIRE(sc.cell_indices.size() == cfg.stable_bits);
    for (size_t j = 0; j < sc.cell_indices.size(); ++j) {
        CHECK(dev.ground_truth_reliability(sc.cell_indices[j]) >= 0.985);
        CHECK(sc.expected_polarity.get(j) == (dev.p_nominal(sc.cell_indices[j]) > 0.5));
    }
    // Indices are unique and ascending given a single-region scan.
    for (size_t j = 1; j < sc.cell_indices.size(); ++j) CHECK(sc.cell_indices[j] > sc.cell_indices[j - 1]);
}

TEST_CASE("a vacuous threshold accepts nearly everything") {
    PufConfig cfg = small_cfg();
    DpufDevice dev(62, cfg);
    Rng rng(63);
    std::vector<Challenge> challenges = {{0, cfg.region_len_cells(), 0xff, 0}};
    StableChallenge sc = reliability_analysis(dev, challenges, cfg.full_env_grid(), 100, 0.499, 64, rng);
    CHECK(sc.cell_indices.size() == 64);
    CHECK(sc.cell_indices.back() <= 80);  // nearly every scanned cell qualified
}

TEST_CASE("impossible demands raise InsufficientStableCells") {
    PufConfig cfg = small_cfg();
    std::vector<double> biases(cfg.cell_count, 0.5);
    DpufDevice dev = DpufDevice::from_biases(biases, cfg);
    Rng rng(64);
    std::vector<Challenge> challenges = {{0, cfg.region_len_cells(), 0xff, 0}};
    CHECK_THROWS_AS(reliability_analysis(dev, challenges, cfg.full_env_grid(), 100, 0.0, 16, rng),
                    InsufficientStableCells);
    CHECK_THROWS_AS(reliability_analysis(dev, challenges, cfg.full_env_grid(), 50, 0.01, 16, rng),
                    std::invalid_argument);
}

TEST_CASE("reliability scan extends past exhausted regions") {
    PufConfig cfg = small_cfg();
    std::vector<double> biases(cfg.cell_count, 0.5);
    // Stable cells only in the second region.
    for (uint64_t c = cfg.region_len_cells(); c < cfg.region_len_cells() + 512; ++c) biases[c] = 1.0;
    DpufDevice dev = DpufDevice::from_biases(biases, cfg);
    Rng rng(65);
    std::vector<Challenge> challenges = {{0, cfg.region_len_cells(), 0xff, 0}};
    StableChallenge sc = reliability_analysis(dev, challenges, cfg.full_env_grid(), 100, 0.01, 256, rng);
    REQUIRE(sc.cell_indices.size() == 256);
    CHECK(sc.cell_indices.front() >= cfg.region_len_cells());
}

TEST_CASE("estimator soundness and completeness against ground truth") {
    PufConfig cfg = small_cfg();
    DpufDevice dev(66, cfg);
    Rng rng(67);
    const uint32_t scan_len = 4096;
    std::vector<Challenge> challenges = {{0, scan_len, 0xff, 0}};
    double t_stable = 1.0 - cfg.error_threshold;

    uint32_t qualifying = 0;
    for (uint64_t c = 0; c < scan_len; ++c)
        if (dev.ground_truth_reliability(c) >= t_stable) ++qualifying;
    REQUIRE(qualifying > 200);

    StableChallenge sc = reliability_analysis(dev, challenges, cfg.full_env_grid(), cfg.reliability_repeats,
                                              cfg.error_threshold, qualifying / 2, rng);
    REQUIRE(sc.cell_indices.back() < scan_len);

    size_t unsound = 0;
    for (uint64_t c : sc.cell_indices)
        if (dev.ground_truth_reliability(c) < t_stable - 0.005) ++unsound;
    CHECK(static_cast<double>(unsound) / static_cast<double>(sc.cell_indices.size()) <= 0.01);

    // Completeness: of clearly-stable cells the scan passed over, >= 95%
    // must have been accepted.
    std::vector<bool> in_sc(scan_len, false);
    for (uint64_t c : sc.cell_indices) in_sc[c] = true;
    size_t clearly_stable = 0, accepted = 0;
    for (uint64_t c = 0; c <= sc.cell_indices.back(); ++c) {
        if (dev.ground_truth_reliability(c) >= t_stable + 0.005) {
            ++clearly_stable;
            accepted += in_sc[c];
        }
    }
    REQUIRE(clearly_stable > 100);
    CHECK(static_cast<double>(accepted) / static_cast<double>(clearly_stable) >= 0.95);
}

TEST_CASE("dataset export writes PGM files and an index") {
    PufConfig cfg;
    cfg.image_width = 8;
    cfg.image_height = 8;
    cfg.cell_count = 512 * 2;
    DpufDevice dev(70, cfg);
    Rng rng(71);
    LabeledDataset ds = generate_dataset({{"devA", &dev}}, {{0, 512, 0xff, 0}}, {{0, 0}, {1, 0}}, 2, rng);
    REQUIRE(ds.size() == 4);

    auto dir = std::filesystem::temp_directory_path() / "pheno_export_test";
    std::filesystem::remove_all(dir);
    export_dataset(ds, dir);
    CHECK(std::filesystem::exists(dir / "index.json"));
    CHECK(std::filesystem::exists(dir / "devA_t0v0_0_0.pgm"));

    PhenotypeImage back = read_pgm(dir / "devA_t0v0_0_0.pgm");
    CHECK(back == ds.items[0].image);
    std::filesystem::remove_all(dir);
}
