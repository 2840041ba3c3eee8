// Scenario runner: enroll device groups, run authentication sessions, execute
// attack suites, and emit cost/timing reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "phenoauth/adversary.hpp"
#include "phenoauth/metrics.hpp"
#include "phenoauth/protocol.hpp"
#include "phenoauth/transport.hpp"

using namespace phenoauth;
namespace fs = std::filesystem;

namespace {

struct ScenarioConfig {
    uint64_t seed = 1;
    uint32_t device_count = 3;

    uint64_t cell_count = 1ull << 20;
    uint32_t image_width = 64;
    uint32_t image_height = 64;
    uint32_t stable_bits = 256;
    uint32_t reliability_repeats = 300;
    uint32_t stable_read_votes = 15;
    double error_threshold = 0.01;
    double f_super = 0.0267;
    double texture_sigma = 2.6;

    uint32_t sessions = 100;
    uint32_t trials = 1000;
    bool swap_roles = false;
    std::string transport = "memory";
    std::string out_dir = "out";
    uint16_t socket_port = 47001;
    bool json_output = false;

    PufConfig to_puf_config() const {
        PufConfig cfg;
        cfg.cell_count = cell_count;
        cfg.image_width = image_width;
        cfg.image_height = image_height;
        cfg.stable_bits = stable_bits;
        cfg.reliability_repeats = reliability_repeats;
        cfg.stable_read_votes = stable_read_votes;
        cfg.error_threshold = error_threshold;
        cfg.f_super = f_super;
        cfg.texture_sigma = texture_sigma;
        cfg.validate();
        return cfg;
    }
};

std::string device_label(uint32_t i) { return "dev" + std::to_string(i); }

uint64_t device_seed(const ScenarioConfig& sc, uint32_t i) {
    uint64_t s = sc.seed ^ 0x9e3779b97f4a7c15ULL;
    for (uint32_t k = 0; k <= i; ++k) splitmix64(s);
    return s;
}

std::vector<std::unique_ptr<Device>> build_devices(const ScenarioConfig& sc, uint32_t count) {
    PufConfig cfg = sc.to_puf_config();
    std::vector<std::unique_ptr<Device>> devices;
    for (uint32_t i = 0; i < count; ++i)
        devices.push_back(std::make_unique<Device>(device_label(i), device_seed(sc, i), cfg));
    return devices;
}

void enroll_all(std::vector<std::unique_ptr<Device>>& devices, const ScenarioConfig& sc) {
    std::vector<Device*> ptrs;
    for (auto& d : devices) ptrs.push_back(d.get());
    Rng rng(sc.seed ^ stream_tag("enroll"));
    enroll_group(ptrs, rng);
}

void write_report(const ScenarioConfig& sc, const std::string& name, const nlohmann::json& j) {
    fs::create_directories(sc.out_dir);
    std::ofstream f(fs::path(sc.out_dir) / name);
    f << j.dump(2) << "\n";
}

int cmd_enroll(const ScenarioConfig& sc) {
    if (sc.device_count < 2) {
        std::cerr << "enroll: need at least 2 devices, got " << sc.device_count << "\n";
        return 2;
    }
    auto devices = build_devices(sc, sc.device_count);
    enroll_all(devices, sc);

    fs::create_directories(sc.out_dir);
    nlohmann::json report = nlohmann::json::array();
    for (auto& d : devices) {
        d->save_state(sc.out_dir);
        report.push_back({{"label", d->label()},
                          {"peers", d->nvm().peers.size()},
                          {"model_labels", d->nvm().model.labels.size()},
                          {"threshold", d->nvm().threshold}});
    }
    write_report(sc, "enroll_report.json", report);
    if (sc.json_output) std::cout << report.dump(2) << "\n";
    for (auto& d : devices) {
        if (d->nvm().peers.size() != sc.device_count - 1 ||
            d->nvm().model.labels.size() != sc.device_count) {
            std::cerr << "enroll: inconsistent group state for " << d->label() << "\n";
            return 1;
        }
        std::cout << d->label() << ": " << d->nvm().peers.size() << " peers, model over "
                  << d->nvm().model.labels.size() << " labels, threshold " << d->nvm().threshold << "\n";
    }
    std::cout << "state written to " << sc.out_dir << "\n";
    return 0;
}

int run_auth_memory(const ScenarioConfig& sc, Device& a, Device& b, nlohmann::json& report) {
    Rng rng(sc.seed ^ stream_tag("auth"));
    const OpCounter expected{2, 2, 2, 1, 1};
    auto grid = a.config().full_env_grid();

    uint32_t successes = 0, count_mismatches = 0;
    std::map<std::string, uint32_t> reasons;
    for (uint32_t s = 0; s < sc.sessions; ++s) {
        Device& initiator = (sc.swap_roles && s % 2 == 1) ? b : a;
        Device& responder = (sc.swap_roles && s % 2 == 1) ? a : b;
        Meter im, rm;
        MemoryChannel ch;
        EnvParams env = grid[rng.below(grid.size())];
        SessionReport rep = run_session(initiator, responder, env, rng, ch, &im, &rm);
        bool ok = rep.initiator_outcome.success && rep.responder_outcome.success;
        successes += ok;
        if (!ok) {
            ++reasons[abort_reason_name(rep.initiator_outcome.success ? rep.responder_outcome.reason
                                                                      : rep.initiator_outcome.reason)];
        } else if (!(rep.initiator_ops == expected) || !(rep.responder_ops == expected)) {
            ++count_mismatches;
        }
    }
    report["sessions"] = sc.sessions;
    report["successes"] = successes;
    report["cost_model_mismatches"] = count_mismatches;
    report["expected_counts"] = "DPUF:2 H:2 AEAD.Enc:2 DPAN:1 KDF:1 per role";
    report["abort_reasons"] = reasons;
    double rate = static_cast<double>(successes) / sc.sessions;
    std::cout << "sessions " << sc.sessions << ", successes " << successes << " (" << rate * 100
              << "%), cost-model mismatches " << count_mismatches << "\n";
    return (rate >= 0.99 && count_mismatches == 0) ? 0 : 1;
}

int run_auth_socket(const ScenarioConfig& sc, Device& a, Device& b, nlohmann::json& report) {
    Socket listener = Socket::listen_on(sc.socket_port);
    Rng responder_rng(sc.seed ^ stream_tag("auth-resp"));
    std::vector<SessionOutcome> responder_outcomes;
    std::thread responder([&] {
        responder_outcomes = serve_sessions(b, listener, static_cast<int>(sc.sessions), {0, 0}, responder_rng);
    });

    Rng rng(sc.seed ^ stream_tag("auth"));
    uint32_t successes = 0;
    for (uint32_t s = 0; s < sc.sessions; ++s) {
        SessionOutcome out = run_socket_session(a, "127.0.0.1", sc.socket_port, b.label(), {0, 0}, rng);
        successes += out.success;
    }
    responder.join();
    uint32_t responder_success = 0;
    for (const auto& o : responder_outcomes) responder_success += o.success;

    report["sessions"] = sc.sessions;
    report["successes"] = successes;
    report["responder_successes"] = responder_success;
    report["transport"] = "socket";
    double rate = static_cast<double>(successes) / sc.sessions;
    std::cout << "socket sessions " << sc.sessions << ", successes " << successes << " (" << rate * 100
              << "%)\n";
    return rate >= 0.99 ? 0 : 1;
}

int cmd_auth(const ScenarioConfig& sc, const std::string& initiator, const std::string& peer) {
    auto devices = build_devices(sc, sc.device_count);

    // Reuse persisted state when the out directory carries it; otherwise
    // enroll a fresh group. State enrolled under a different root seed
    // belongs to different physical devices and cannot be reused.
    bool loaded = true;
    for (auto& d : devices) {
        fs::path nvm_path = fs::path(sc.out_dir) / (d->label() + ".nvm.json");
        if (!fs::exists(nvm_path)) {
            loaded = false;
            break;
        }
        try {
            d->load_state(nvm_path);
        } catch (const std::exception& e) {
            std::cerr << "note: " << e.what() << "; enrolling fresh\n";
            loaded = false;
            break;
        }
    }
    if (!loaded) {
        devices = build_devices(sc, sc.device_count);  // discard any partially loaded state
        enroll_all(devices, sc);
    }

    Device* a = nullptr;
    Device* b = nullptr;
    for (auto& d : devices) {
        if (d->label() == initiator) a = d.get();
        if (d->label() == peer) b = d.get();
    }
    if (a == nullptr || b == nullptr || a == b) {
        std::cerr << "auth: initiator/peer must name two distinct devices (dev0..dev"
                  << sc.device_count - 1 << ")\n";
        return 2;
    }

    nlohmann::json report;
    report["initiator"] = initiator;
    report["peer"] = peer;
    report["loaded_from_disk"] = loaded;
    int rc = sc.transport == "socket" ? run_auth_socket(sc, *a, *b, report)
                                      : run_auth_memory(sc, *a, *b, report);
    write_report(sc, "auth_report.json", report);
    if (sc.json_output) std::cout << report.dump(2) << "\n";
    return rc;
}

int cmd_attack(const ScenarioConfig& sc, const std::string& suite) {
    nlohmann::json report = nlohmann::json::array();
    bool pass = true;
    auto note = [&](const GameResult& g, bool ok) {
        nlohmann::json j = g.to_json();
        j["pass"] = ok;
        report.push_back(j);
        pass = pass && ok;
        std::cout << g.game << "/" << g.strategy << ": wins " << g.adversary_wins << "/" << g.trials
                  << (ok ? " [ok]" : " [FAIL]") << "\n";
    };

    // Every suite gets a freshly enrolled pair: a successful impersonation
    // run deliberately desynchronizes its victim pairing.
    auto run_mu = [&](MuStrategy strategy, bool expect_wins) {
        auto devices = build_devices(sc, 2);
        enroll_all(devices, sc);
        OracleContext ctx({devices[0].get(), devices[1].get()}, sc.seed ^ stream_tag(mu_strategy_name(strategy)));
        GameResult g = run_mu_game(ctx, *devices[0], *devices[1], strategy, sc.trials);
        bool ok = expect_wins ? g.adversary_wins >= g.trials * 99 / 100
                              : (g.adversary_wins == 0 && g.clean_trials == g.trials);
        note(g, ok);
    };
    auto run_ind = [&](IndDistinguisher d, bool control) {
        auto devices = build_devices(sc, 2);
        enroll_all(devices, sc);
        OracleContext ctx({devices[0].get(), devices[1].get()},
                          sc.seed ^ stream_tag(ind_distinguisher_name(d)));
        GameResult g = run_ind_game(ctx, *devices[0], *devices[1], d, sc.trials);
        double rate = g.trials == 0 ? 0.0 : static_cast<double>(g.adversary_wins) / g.trials;
        bool ok = control ? rate > 0.99 : (rate >= 0.45 && rate <= 0.55);
        note(g, ok);
    };

    bool all = suite == "all";
    if (all || suite == "replay") run_mu(MuStrategy::Replay, false);
    if (all || suite == "forge") run_mu(MuStrategy::RandomForge, false);
    if (all || suite == "tamper") run_mu(MuStrategy::BitTamper, false);
    if (all || suite == "clone") run_mu(MuStrategy::NvmCloneWithoutPuf, false);
    if (all || suite == "whitebox") run_mu(MuStrategy::WhiteBox, true);
    if (all || suite == "ind") {
        run_ind(IndDistinguisher::ByteFrequency, false);
        run_ind(IndDistinguisher::RepeatedField, false);
        run_ind(IndDistinguisher::CrossSessionIdMatcher, false);
        run_ind(IndDistinguisher::KeyOracle, true);
    }
    if (report.empty()) {
        std::cerr << "attack: unknown suite '" << suite
                  << "' (expected replay|forge|tamper|clone|whitebox|ind|all)\n";
        return 2;
    }

    write_report(sc, "attack_report.json", report);
    if (sc.json_output) std::cout << report.dump(2) << "\n";
    return pass ? 0 : 1;
}

int cmd_bench(const ScenarioConfig& sc) {
    auto devices = build_devices(sc, 2);
    enroll_all(devices, sc);
    Device& a = *devices[0];
    Device& b = *devices[1];

    Rng rng(sc.seed ^ stream_tag("bench"));
    std::vector<Meter> meters(2 * sc.sessions);
    const OpCounter expected{2, 2, 2, 1, 1};
    bool counts_ok = true;
    for (uint32_t s = 0; s < sc.sessions; ++s) {
        MemoryChannel ch;
        SessionReport rep = run_session(a, b, {0, 0}, rng, ch, &meters[2 * s], &meters[2 * s + 1]);
        if (!rep.initiator_outcome.success) continue;
        counts_ok = counts_ok && meters[2 * s].counts() == expected && meters[2 * s + 1].counts() == expected;
    }
    std::vector<const Meter*> ptrs;
    for (const auto& m : meters) ptrs.push_back(&m);
    TimingReport rep = TimingReport::aggregate(ptrs);

    fs::create_directories(sc.out_dir);
    std::ofstream csv(fs::path(sc.out_dir) / "bench.csv");
    csv << rep.to_csv();
    write_report(sc, "bench.json", rep.to_json());

    std::cout << rep.to_csv();
    std::cout << "total " << rep.grand_total_ns / 1e6 << " ms over " << sc.sessions
              << " sessions; counts " << (counts_ok ? "exact" : "MISMATCH") << "\n";
    bool nonzero = true;
    for (const auto& row : rep.rows) nonzero = nonzero && row.count > 0 && row.total_ns > 0;
    return (counts_ok && nonzero) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PhenoAuth protocol scenario runner"};
    app.require_subcommand(1);
    app.fallthrough();

    ScenarioConfig sc;
    app.set_config("--config", "", "TOML scenario configuration");
    app.allow_config_extras(false);
    app.add_option("--seed", sc.seed, "root seed for all randomness");
    app.add_option("--out", sc.out_dir, "output directory for state and reports");
    app.add_option("--transport", sc.transport, "channel to use")
        ->check(CLI::IsMember({"memory", "socket"}));
    app.add_flag("--json", sc.json_output, "print machine-readable reports to stdout");
    app.add_option("--devices", sc.device_count, "number of devices in the group");
    app.add_option("--cells", sc.cell_count, "PUF cells per device");
    app.add_option("--image-width", sc.image_width, "phenotype image width");
    app.add_option("--image-height", sc.image_height, "phenotype image height");
    app.add_option("--stable-bits", sc.stable_bits, "stable response length l");
    app.add_option("--repeats", sc.reliability_repeats, "reliability scan repeats r");
    app.add_option("--error-threshold", sc.error_threshold, "reliability error threshold t_e");
    app.add_option("--votes", sc.stable_read_votes, "majority votes per stable cell read");
    app.add_option("--port", sc.socket_port, "loopback port for the socket transport");

    auto* enroll = app.add_subcommand("enroll", "enroll a device group and persist NVM + model files");

    auto* auth = app.add_subcommand("auth", "run authentication sessions between two enrolled devices");
    std::string initiator = "dev0", peer = "dev1";
    auth->add_option("--initiator", initiator, "initiating device label");
    auth->add_option("--peer", peer, "responding device label");
    auth->add_option("--sessions", sc.sessions, "number of sessions to run");
    auth->add_flag("--swap-roles", sc.swap_roles, "alternate the initiating side");

    auto* attack = app.add_subcommand("attack", "run adversary suites and emit game reports");
    std::string suite = "all";
    attack->add_option("--suite", suite, "replay|forge|tamper|clone|whitebox|ind|all");
    attack->add_option("--trials", sc.trials, "trials per game");

    auto* bench = app.add_subcommand("bench", "measure per-primitive costs over a session batch");
    bench->add_option("--sessions", sc.sessions, "number of sessions to measure");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(enroll)) return cmd_enroll(sc);
        if (app.got_subcommand(auth)) return cmd_auth(sc, initiator, peer);
        if (app.got_subcommand(attack)) return cmd_attack(sc, suite);
        if (app.got_subcommand(bench)) return cmd_bench(sc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
