// Acceptance gate: one pass/fail line per criterion, non-zero exit on any
// failure. Tolerances are pinned here, next to the checks that use them.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "sesemi/clients.h"
#include "sesemi/sim.h"

using namespace sesemi;

namespace {

int g_failures = 0;

struct Criterion {
    int num;
    std::string title;
    std::vector<std::string> problems;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    Criterion(int n, std::string t) : num(n), title(std::move(t)) {}

    void expect(bool ok, const std::string& what) {
        if (!ok) problems.push_back(what);
    }
    double elapsed_s() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    void require_elapsed_under(double limit_s) {
        double e = elapsed_s();
        if (e >= limit_s)
            problems.push_back("runtime " + std::to_string(e) + " s exceeds " +
                               std::to_string(limit_s) + " s");
    }
    ~Criterion() {
        if (problems.empty()) {
            std::printf("[PASS] criterion %d: %s (%.2f s)\n", num, title.c_str(), elapsed_s());
        } else {
            ++g_failures;
            std::printf("[FAIL] criterion %d: %s\n", num, title.c_str());
            for (const auto& p : problems) std::printf("       - %s\n", p.c_str());
        }
        std::fflush(stdout);
    }
};

attest::CodeIdentity ks_identity() {
    attest::CodeIdentity ci;
    ci.runtime_name = "ksvc";
    ci.runtime_version = "0.1";
    ci.backend_name = "store";
    return ci;
}

std::string read_config(const std::string& name) {
    std::string path = std::string(SESEMI_CONFIG_DIR) + "/" + name;
    std::ifstream f(path);
    if (!f) throw std::runtime_error("missing config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

double p95_of(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    size_t idx = static_cast<size_t>(std::ceil(0.95 * v.size()));
    if (idx > 0) --idx;
    return v[std::min(idx, v.size() - 1)];
}

// --- criterion 1 -----------------------------------------------------------

void criterion_access_control() {
    Criterion c(1, "access-control truth table, 1000 randomized stores, 0 deviations");
    const int kModels = 5, kUsers = 5, kMeas = 3;

    attest::PlatformAuthority authority;
    keyservice::KeyService ks(authority, ks_identity());
    DeterministicRng rng(101);
    std::mt19937_64 gen(2026);

    crypto::SymKey owner_key = crypto::SymKey::random(rng);
    crypto::Digest oid = ks.user_registration(owner_key);
    crypto::NonceSequence on;

    std::vector<crypto::SymKey> ukeys(kUsers);
    std::vector<crypto::Digest> uids(kUsers);
    std::vector<crypto::NonceSequence> un(kUsers);
    for (int u = 0; u < kUsers; ++u) {
        ukeys[u] = crypto::SymKey::random(rng);
        uids[u] = ks.user_registration(ukeys[u]);
    }
    std::vector<attest::Measurement> meas(kMeas);
    for (int e = 0; e < kMeas; ++e)
        meas[e] = attest::Measurement{crypto::sha256(rng.bytes(8))};

    // mirror of what the broker should contain
    bool has_km[kModels] = {};
    bool in_acm[kModels][kMeas][kUsers] = {};
    bool in_ksr[kModels][kMeas][kUsers] = {};

    uint64_t deviations = 0;
    auto full_check = [&] {
        for (int m = 0; m < kModels; ++m) {
            std::string mid = "m" + std::to_string(m);
            for (int e = 0; e < kMeas; ++e)
                for (int u = 0; u < kUsers; ++u) {
                    bool expect = has_km[m] && in_acm[m][e][u] && in_ksr[m][e][u];
                    bool got = ks.key_provisioning(uids[u], mid, meas[e]).has_value();
                    if (expect != got) ++deviations;
                }
        }
    };

    for (int op = 0; op < 1000; ++op) {
        int m = static_cast<int>(gen() % kModels);
        int e = static_cast<int>(gen() % kMeas);
        int u = static_cast<int>(gen() % kUsers);
        std::string mid = "m" + std::to_string(m);
        switch (gen() % 3) {
            case 0:
                ks.add_model_key(oid, keyservice::seal_model_key(
                                          owner_key, on, oid, mid, crypto::SymKey::random(rng)));
                has_km[m] = true;
                break;
            case 1:
                ks.grant_access(oid, keyservice::seal_grant(owner_key, on, oid, mid,
                                                            meas[e], uids[u]));
                in_acm[m][e][u] = true;
                break;
            case 2:
                ks.add_req_key(uids[u],
                               keyservice::seal_req_key(ukeys[u], un[u], uids[u], mid,
                                                        meas[e], crypto::SymKey::random(rng)));
                in_ksr[m][e][u] = true;
                break;
        }
        full_check();  // all 75 triples after every store
    }

    c.expect(deviations == 0,
             "key_provisioning deviated from the brute-force predicate " +
                 std::to_string(deviations) + " times");
    c.require_elapsed_under(5.0);
}

// --- criterion 2 -----------------------------------------------------------

void criterion_canary_scan() {
    Criterion c(2, "confidentiality canary scan over 50 end-to-end requests");

    attest::PlatformAuthority authority;
    keyservice::KeyService ks(authority, ks_identity());
    clients::InProcKeyServiceClient client(ks);
    DeterministicRng rng(202);
    auto store = std::make_shared<runtime::MemModelStore>();
    clients::MemModelSink sink(*store);
    runtime::UntrustedCapture capture;

    Bytes weight_canary = rng.bytes(32);
    Bytes payload_canary = rng.bytes(32);

    // canary bytes embedded verbatim into four weight doubles
    model::Model m = model::make_demo_model("prod", 8, 8);
    std::memcpy(m.weights.data(), weight_canary.data(), 32);

    clients::OwnerContext owner(crypto::SymKey::random(rng), client);
    clients::UserContext user(crypto::SymKey::random(rng), client);
    owner.publish_model(m, sink);

    runtime::EnclaveConfig ecfg;
    auto prov = std::make_unique<runtime::InProcProvisioner>(
        ks, authority, ecfg.code_identity(), ks.measurement(), &capture);
    runtime::Enclave enclave(ecfg, store, std::move(prov), runtime::make_linear_backend(),
                             &capture);
    owner.grant("prod", enclave.measurement(), user.uid());
    user.deposit_req_key("prod", enclave.measurement());

    std::vector<double> input(8, 0.5);
    std::memcpy(input.data(), payload_canary.data(), 32);

    // positive control: the canaries are really inside the plaintexts
    c.expect(contains_bytes(model::serialize_weights(m), weight_canary),
             "weight canary missing from plaintext weights");
    c.expect(contains_bytes(model::encode_input(input), payload_canary),
             "payload canary missing from plaintext input");

    Bytes transcript;
    for (int i = 0; i < 50; ++i) {
        auto req = user.build_request("prod", input);
        append(transcript, req.payload.serialize());
        enclave.ec_model_inf(req, 0);
        append(transcript, enclave.ec_get_output(0).serialize());
    }
    append(transcript, capture.concat());  // staging, wires, handshake
    append(transcript, store->fetch("prod"));

    c.expect(!contains_bytes(transcript, weight_canary),
             "weight canary leaked to the untrusted side");
    c.expect(!contains_bytes(transcript, payload_canary),
             "payload canary leaked to the untrusted side");
    c.require_elapsed_under(10.0);
}

// --- criterion 3 -----------------------------------------------------------

void criterion_path_accounting() {
    Criterion c(3, "invocation-path accounting: exact hot/provision/reload counts");

    attest::PlatformAuthority authority;
    keyservice::KeyService ks(authority, ks_identity());
    clients::InProcKeyServiceClient client(ks);
    DeterministicRng rng(303);
    auto store = std::make_shared<runtime::MemModelStore>();
    clients::MemModelSink sink(*store);

    clients::OwnerContext owner(crypto::SymKey::random(rng), client);
    clients::UserContext u0(crypto::SymKey::random(rng), client);
    clients::UserContext u1(crypto::SymKey::random(rng), client);
    owner.publish_model(model::make_demo_model("mA", 4, 4), sink);
    owner.publish_model(model::make_demo_model("mB", 4, 4), sink);

    runtime::EnclaveConfig ecfg;
    auto prov = std::make_unique<runtime::InProcProvisioner>(ks, authority,
                                                             ecfg.code_identity(),
                                                             ks.measurement());
    runtime::Enclave enclave(ecfg, store, std::move(prov));
    for (auto* u : {&u0, &u1}) {
        for (const char* mid : {"mA", "mB"}) {
            owner.grant(mid, enclave.measurement(), u->uid());
            u->deposit_req_key(mid, enclave.measurement());
        }
    }
    std::vector<double> x{1, 2, 3, 4};

    int hot = 0, non_hot = 0;
    for (int i = 0; i < 10; ++i) {
        auto p = enclave.ec_model_inf(u0.build_request("mA", x), 0);
        (p == runtime::InvocationPath::Hot ? hot : non_hot) += 1;
    }
    auto after10 = enclave.counters();
    c.expect(non_hot == 1 && hot == 9,
             "10 same-user requests: expected 1 non-hot + 9 hot, got " +
                 std::to_string(non_hot) + "+" + std::to_string(hot));
    c.expect(after10.provisioning_calls == 1,
             "expected exactly 1 key_provisioning call, got " +
                 std::to_string(after10.provisioning_calls));

    enclave.ec_model_inf(u1.build_request("mA", x), 0);
    auto after_user = enclave.counters();
    c.expect(after_user.provisioning_calls == after10.provisioning_calls + 1,
             "user switch should add exactly 1 provisioning call");
    c.expect(after_user.model_loads == after10.model_loads,
             "user switch should reload 0 models");

    enclave.ec_model_inf(u0.build_request("mB", x), 0);
    auto after_model = enclave.counters();
    c.expect(after_model.model_loads == after_user.model_loads + 1,
             "model switch should reload exactly 1 model");
}

// --- criterion 4 -----------------------------------------------------------

void criterion_latency_ordering() {
    Criterion c(4, "micro-bench: hot < warm < cold per model, mbnet cold/hot in [10,25]");

    sim::ExperimentConfig cfg =
        sim::ExperimentConfig::from_json_text(read_config("micro_bench.json"));
    sim::SimResult res = sim::run_simulation(cfg);

    std::map<std::string, std::map<std::string, double>> lat;  // model -> path -> ms
    for (const auto& r : res.records) lat[r.model_id][r.path] = r.latency_ms;

    for (const auto& m : cfg.models) {
        auto it = lat.find(m.model_id);
        if (it == lat.end() || it->second.size() != 3) {
            c.expect(false, m.model_id + ": expected one cold, one hot, one warm record");
            continue;
        }
        double cold = it->second.at("cold"), warm = it->second.at("warm"),
               hot = it->second.at("hot");
        c.expect(hot < warm && warm < cold,
                 m.model_id + ": ordering violated (hot " + std::to_string(hot) + ", warm " +
                     std::to_string(warm) + ", cold " + std::to_string(cold) + ")");
    }
    double ratio = lat["mbnet"]["cold"] / lat["mbnet"]["hot"];
    c.expect(ratio >= 10.0 && ratio <= 25.0,
             "mbnet cold/hot ratio " + std::to_string(ratio) + " outside [10, 25]");
    c.require_elapsed_under(5.0);
}

// --- criterion 5 -----------------------------------------------------------

void criterion_memory_saving() {
    Criterion c(5, "memory saving: rsnet k=8 shared contexts >= 70%, monotone in k");

    sim::ModelSpec rsnet;
    rsnet.model_mb = 170;
    rsnet.buffer_mb = 24;

    double prev = -1;
    for (int k = 2; k <= 8; ++k) {
        double dedicated = k * sim::enclave_memory_mb(rsnet, 1);
        double shared = sim::enclave_memory_mb(rsnet, k);
        double saving = 1.0 - shared / dedicated;
        c.expect(saving > prev, "saving not monotone at k=" + std::to_string(k));
        prev = saving;
        if (k == 8)
            c.expect(saving >= 0.70,
                     "k=8 saving " + std::to_string(saving) + " below 0.70");
    }
}

// --- criterion 6 -----------------------------------------------------------

void criterion_cost_ledger() {
    Criterion c(6, "gb-second ledger: analytic cases exact, integrator within 1e-9");

    std::vector<sim::LedgerRecord> analytic{
        {"i0", "e", 256, 0, 10'000.0},
        {"i1", "e", 256, 0, 10'000.0},
    };
    double got = sim::account_gb_seconds(analytic, 60'000);
    c.expect(std::abs(got - 5.0) < 1e-12,
             "2 x 256 MB x 10 s gave " + std::to_string(got) + " GB-s, expected 5.0");

    // randomized schedules on integer-millisecond boundaries vs a 1 ms
    // brute-force integrator
    std::mt19937_64 gen(606);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<sim::LedgerRecord> rnd;
        double horizon = 30'000;
        for (int i = 0; i < 40; ++i) {
            double a = static_cast<double>(gen() % 40'000);
            double b = a + static_cast<double>(gen() % 15'000);
            int mb = 128 * static_cast<int>(1 + gen() % 6);
            rnd.push_back({"r", "e", mb, a,
                           (gen() % 5 == 0) ? std::nullopt : std::optional<double>(b)});
        }
        double integral = 0;
        for (double t = 0; t < horizon; t += 1.0) {
            for (const auto& r : rnd) {
                double end = std::min(r.end_ms.value_or(horizon), horizon);
                if (r.start_ms <= t && t < end) integral += r.budget_mb / 1024.0 / 1000.0;
            }
        }
        double acc = sim::account_gb_seconds(rnd, horizon);
        c.expect(std::abs(acc - integral) < 1e-9,
                 "trial " + std::to_string(trial) + ": |" + std::to_string(acc) + " - " +
                     std::to_string(integral) + "| >= 1e-9");
    }
}

// --- criterion 7 -----------------------------------------------------------

void criterion_fnpacker_scenario() {
    Criterion c(7, "fnpacker mixed workload: session-1 colds 3/1/0, all-in-one slowest streams");

    std::string text = read_config("fnpacker_mixed.json");
    std::map<sim::DeploymentMode, int> want_colds{
        {sim::DeploymentMode::OneToOne, 3},
        {sim::DeploymentMode::FnPacker, 1},
        {sim::DeploymentMode::AllInOne, 0},
    };
    std::map<sim::DeploymentMode, double> stream_mean;
    for (const auto& [dep, want] : want_colds) {
        sim::ExperimentConfig cfg = sim::ExperimentConfig::from_json_text(text);
        cfg.deployment = dep;
        sim::SimResult res = sim::run_simulation(cfg);
        int colds = 0, session_reqs = 0;
        double sum = 0;
        int n = 0;
        for (const auto& r : res.records) {
            if (r.origin == "session:1") {
                ++session_reqs;
                if (r.path == "cold") ++colds;
            }
            if (r.origin.rfind("stream:", 0) == 0) {
                sum += r.latency_ms;
                ++n;
            }
        }
        c.expect(session_reqs == 3,
                 std::string(sim::to_string(dep)) + ": session-1 should complete 3 requests");
        c.expect(colds == want, std::string(sim::to_string(dep)) + ": session-1 colds " +
                                    std::to_string(colds) + ", expected " +
                                    std::to_string(want));
        stream_mean[dep] = sum / n;
    }
    c.expect(stream_mean[sim::DeploymentMode::AllInOne] >
                     stream_mean[sim::DeploymentMode::OneToOne] &&
                 stream_mean[sim::DeploymentMode::AllInOne] >
                     stream_mean[sim::DeploymentMode::FnPacker],
             "all-in-one stream mean must strictly exceed both alternatives");
    c.require_elapsed_under(30.0);
}

// --- criterion 8 -----------------------------------------------------------

void criterion_mmpp_policies() {
    Criterion c(8, "mmpp burst: sesemi mean <= 0.5x iso-reuse, p95 recovery within 30 s");

    std::string text = read_config("mmpp_multinode.json");
    struct Out {
        double mean = 0, pre_p95 = 0, post_p95 = 0;
    };
    std::map<sim::Policy, Out> out;
    for (sim::Policy pol : {sim::Policy::SeSeMI, sim::Policy::IsoReuse}) {
        sim::ExperimentConfig cfg = sim::ExperimentConfig::from_json_text(text);
        cfg.policy = pol;
        sim::SimResult res = sim::run_simulation(cfg);
        double sum = 0;
        std::vector<double> pre, post;
        for (const auto& r : res.records) {
            sum += r.latency_ms;
            // burst occupies [60 s, 120 s); windows by submit time
            if (r.submit_ms >= 30'000 && r.submit_ms < 60'000) pre.push_back(r.latency_ms);
            if (r.submit_ms >= 140'000 && r.submit_ms < 150'000) post.push_back(r.latency_ms);
        }
        out[pol] = {sum / res.records.size(), p95_of(pre), p95_of(post)};
    }
    const Out& ss = out[sim::Policy::SeSeMI];
    const Out& iso = out[sim::Policy::IsoReuse];
    c.expect(ss.mean <= 0.5 * iso.mean,
             "sesemi mean " + std::to_string(ss.mean) + " not <= half of iso-reuse mean " +
                 std::to_string(iso.mean));
    c.expect(ss.post_p95 <= 1.5 * ss.pre_p95,
             "sesemi p95 did not recover: post " + std::to_string(ss.post_p95) + " vs pre " +
                 std::to_string(ss.pre_p95));
    c.expect(iso.post_p95 > 1.5 * iso.pre_p95,
             "iso-reuse p95 unexpectedly recovered: post " + std::to_string(iso.post_p95) +
                 " vs pre " + std::to_string(iso.pre_p95));
    c.require_elapsed_under(60.0);
}

// --- criterion 9 -----------------------------------------------------------

void criterion_crypto_properties() {
    Criterion c(9, "aead mutation rejection (10^4) and fail-closed attestation");

    DeterministicRng rng(909);
    std::mt19937_64 gen(910);
    crypto::SymKey k = crypto::SymKey::random(rng);
    crypto::NonceSequence seq;
    int false_accepts = 0;
    for (int i = 0; i < 10'000; ++i) {
        Bytes pt = rng.bytes(1 + gen() % 64);
        Bytes aad = rng.bytes(gen() % 16);
        crypto::AeadEnvelope env = crypto::aead_encrypt(k, pt, aad, seq);
        Bytes plain_check = crypto::aead_decrypt(k, env, aad);
        if (plain_check != pt) ++false_accepts;  // round-trip must hold
        Bytes wire = env.serialize();
        size_t bit = gen() % (wire.size() * 8);
        wire[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        try {
            crypto::AeadEnvelope tampered = crypto::AeadEnvelope::deserialize(wire);
            crypto::aead_decrypt(k, tampered, aad);
            ++false_accepts;
        } catch (const crypto::IntegrityError&) {
        } catch (const crypto::MalformedError&) {
        }
    }
    c.expect(false_accepts == 0,
             std::to_string(false_accepts) + " false accepts over 10^4 mutations");

    attest::PlatformAuthority authority;
    attest::CodeIdentity good;
    good.runtime_name = "semirt";
    good.runtime_version = "0.1";
    good.backend_name = "linear";
    attest::CodeIdentity rogue = good;
    rogue.runtime_version = "0.1-evil";

    int keys_released = 0;
    for (int i = 0; i < 50; ++i) {
        attest::HandshakeConfig icfg;
        icfg.attest_identity = good;
        icfg.authority = &authority;
        icfg.require_peer_report = true;
        icfg.expected_peer = attest::measure_code(good);  // expects good, gets rogue
        icfg.verifier = authority.verifier();
        attest::HandshakeConfig rcfg = icfg;
        rcfg.attest_identity = rogue;
        rcfg.expected_peer.reset();

        attest::HandshakeInitiator init(std::move(icfg));
        attest::HandshakeResponder resp(std::move(rcfg));
        try {
            std::string msg2 = resp.respond(init.msg1());
            std::string msg3 = init.finish(msg2);
            resp.finish(msg3);
            ++keys_released;
        } catch (const attest::HandshakeError&) {
            try {
                init.take_channel();
                ++keys_released;  // aborting side must not hand out a channel
            } catch (const attest::HandshakeError&) {
            }
        }
    }
    c.expect(keys_released == 0,
             std::to_string(keys_released) + " mismatched handshakes released keys");
}

// --- criterion 10 ----------------------------------------------------------

void criterion_determinism() {
    Criterion c(10, "three identical simulate runs produce byte-identical CSVs");

    sim::ExperimentConfig cfg =
        sim::ExperimentConfig::from_json_text(read_config("fnpacker_mixed.json"));
    std::string first = sim::run_simulation(cfg).metrics_csv();
    c.expect(!first.empty() && first.find('\n') != first.rfind('\n'),
             "simulation produced no data rows");
    for (int i = 1; i < 3; ++i) {
        std::string again = sim::run_simulation(cfg).metrics_csv();
        c.expect(again == first, "run " + std::to_string(i + 1) + " differs from run 1");
    }
}

}  // namespace

int main() {
    criterion_access_control();
    criterion_canary_scan();
    criterion_path_accounting();
    criterion_latency_ordering();
    criterion_memory_saving();
    criterion_cost_ledger();
    criterion_fnpacker_scenario();
    criterion_mmpp_policies();
    criterion_crypto_properties();
    criterion_determinism();

    if (g_failures == 0) {
        std::printf("acceptance: all 10 criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criteria FAILED\n", g_failures);
    return 1;
}
