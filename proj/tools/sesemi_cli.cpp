#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"

#include "sesemi/clients.h"
#include "sesemi/live.h"
#include "sesemi/sim.h"

using nlohmann::json;
using namespace sesemi;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

crypto::SymKey key_from_hex(const std::string& hex) {
    return crypto::SymKey::from_bytes(from_hex(hex));
}

json post(const std::string& addr, const std::string& path, const json& body) {
    auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw std::runtime_error("bad address: " + addr);
    httplib::Client cli(addr.substr(0, colon), std::stoi(addr.substr(colon + 1)));
    cli.set_read_timeout(30, 0);
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) throw std::runtime_error("no response from " + addr + path);
    json parsed = json::parse(res->body);
    if (res->status != 200)
        throw std::runtime_error(parsed.value("error", "http " + std::to_string(res->status)));
    return parsed;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir,
                 std::optional<uint64_t> seed) {
    sim::ExperimentConfig cfg = sim::ExperimentConfig::from_json_text(read_file(config_path));
    if (seed) cfg.seed = *seed;
    sim::SimResult res = sim::run_simulation(cfg);
    if (!out_dir.empty()) {
        write_file(out_dir + "/metrics.csv", res.metrics_csv());
        write_file(out_dir + "/summary.json", res.summary_json());
        std::cerr << "wrote " << out_dir << "/metrics.csv and summary.json\n";
    }
    std::cout << res.summary_json();
    return 0;
}

int cmd_report(const std::string& metrics_path) {
    std::istringstream is(read_file(metrics_path));
    std::string line;
    std::getline(is, line);  // header
    std::vector<double> lat;
    std::map<std::string, uint64_t> paths;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cols.push_back(c);
        if (cols.size() < 5) continue;
        lat.push_back(std::stod(cols[3]));
        ++paths[cols[4]];
    }
    std::sort(lat.begin(), lat.end());
    auto pct = [&](double p) {
        if (lat.empty()) return 0.0;
        size_t i = static_cast<size_t>(std::ceil(p * lat.size()));
        return lat[std::min(i ? i - 1 : 0, lat.size() - 1)];
    };
    double mean = 0;
    for (double v : lat) mean += v;
    if (!lat.empty()) mean /= lat.size();
    json out{{"requests", lat.size()},
             {"latency_ms", {{"mean", mean}, {"p50", pct(0.5)}, {"p95", pct(0.95)}}},
             {"paths", paths}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const std::string& mode, int tcs_count) {
    attest::PlatformAuthority authority;
    attest::CodeIdentity ks_identity;
    ks_identity.runtime_name = "ksvc";
    ks_identity.runtime_version = "0.1";
    ks_identity.backend_name = "store";
    keyservice::KeyService ks(authority, ks_identity);

    if (mode == "keyservice") {
        live::KeyServiceServer server(ks, authority);
        int port = server.start();
        std::cout << "keyservice listening on 127.0.0.1:" << port << "\n";
        std::signal(SIGINT, [](int) { g_stop = 1; });
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        return 0;
    }
    if (mode != "demo") throw CLI::ValidationError("--mode must be keyservice or demo");

    // End-to-end demo: broker, one worker, a routing proxy, one model, one
    // user, two requests (cold then hot), all on loopback.
    live::KeyServiceServer ks_server(ks, authority);
    int ks_port = ks_server.start();
    std::string ks_addr = "127.0.0.1:" + std::to_string(ks_port);

    auto store = std::make_shared<runtime::MemModelStore>();
    live::WorkerServer worker(authority, store);
    int worker_port = worker.start();
    std::string worker_addr = "127.0.0.1:" + std::to_string(worker_port);

    runtime::EnclaveConfig ecfg;
    ecfg.tcs_count = tcs_count;
    attest::Measurement es = attest::measure_code(ecfg.code_identity());

    live::HttpKeyServiceClient ks_client(ks_addr);
    clients::OwnerContext owner(crypto::SymKey::random(), ks_client);
    clients::MemModelSink sink(*store);
    model::Model m = model::make_demo_model("demo", 4, 4);
    owner.publish_model(m, sink);

    clients::UserContext user(crypto::SymKey::random(), ks_client);
    user.deposit_req_key("demo", es);
    owner.grant("demo", es, user.uid());

    post(worker_addr, "/init",
         {{"tcs_count", tcs_count},
          {"keyservice_addr", ks_addr},
          {"keyservice_measurement", ks.measurement().hex()}});

    live::FnPackerProxy proxy;
    fnpack::FnPool pool;
    pool.pool_id = "pool0";
    pool.models = {"demo"};
    pool.endpoints = {"ep0"};
    proxy.add_pool(pool, {{"ep0", worker_addr}});
    int proxy_port = proxy.start();
    std::string proxy_addr = "127.0.0.1:" + std::to_string(proxy_port);

    for (int i = 0; i < 2; ++i) {
        runtime::InferenceRequest req =
            user.build_request("demo", {1.0, 2.0, 3.0, 4.0}, ks_addr);
        json r = post(proxy_addr, "/invoke",
                      {{"user_id", req.user_id.hex()},
                       {"model_id", req.model_id},
                       {"payload", b64_encode(req.payload.serialize())},
                       {"seq", req.seq}});
        model::InferenceResult res = user.open_result(
            "demo", req.seq, crypto::AeadEnvelope::deserialize(b64_decode(r.at("result"))));
        std::cout << json{{"request", i + 1},
                          {"path", r.at("path")},
                          {"endpoint", r.at("endpoint")},
                          {"argmax", res.argmax}}
                         .dump()
                  << "\n";
    }
    return 0;
}

int cmd_owner(const std::string& ks_addr, const std::string& key_hex,
              const std::string& model_id, size_t rows, size_t cols, const std::string& dir,
              const std::string& grant_uid, const std::string& measurement) {
    live::HttpKeyServiceClient ks(ks_addr);
    clients::OwnerContext owner(key_from_hex(key_hex), ks);
    clients::DirModelSink sink(dir);
    owner.publish_model(model::make_demo_model(model_id, rows, cols), sink);
    if (!grant_uid.empty()) {
        owner.grant(model_id, attest::Measurement::from_hex(measurement),
                    crypto::Digest::from_bytes(from_hex(grant_uid)));
    }
    std::cout << json{{"oid", owner.oid().hex()}, {"model_id", model_id}}.dump() << "\n";
    return 0;
}

int cmd_user(const std::string& ks_addr, const std::string& key_hex,
             const std::string& model_id, const std::string& measurement,
             const std::string& worker_addr, const std::string& input_csv, uint64_t seq_hint) {
    live::HttpKeyServiceClient ks(ks_addr);
    clients::UserContext user(key_from_hex(key_hex), ks);
    user.deposit_req_key(model_id, attest::Measurement::from_hex(measurement));
    json out{{"uid", user.uid().hex()}};
    if (!worker_addr.empty()) {
        std::vector<double> input;
        std::istringstream is(input_csv);
        std::string tok;
        while (std::getline(is, tok, ',')) input.push_back(std::stod(tok));
        runtime::InferenceRequest req = user.build_request(model_id, input, ks_addr);
        req.seq = std::max(req.seq, seq_hint);
        json r = post(worker_addr, "/run",
                      {{"user_id", req.user_id.hex()},
                       {"model_id", req.model_id},
                       {"keyservice_addr", ks_addr},
                       {"payload", b64_encode(req.payload.serialize())},
                       {"seq", req.seq}});
        model::InferenceResult res = user.open_result(
            model_id, req.seq, crypto::AeadEnvelope::deserialize(b64_decode(r.at("result"))));
        out["path"] = r.at("path");
        out["argmax"] = res.argmax;
        out["scores"] = res.scores;
    }
    std::cout << out.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"secure serverless model inference: simulator and live harness"};
    app.require_subcommand(1);

    auto* sim_cmd = app.add_subcommand("simulate", "run a platform simulation");
    std::string config_path, out_dir;
    std::optional<uint64_t> seed;
    sim_cmd->add_option("--config", config_path, "experiment config JSON")->required();
    sim_cmd->add_option("--out", out_dir, "directory for metrics.csv and summary.json");
    sim_cmd->add_option("--seed", seed, "override the config seed");

    auto* report_cmd = app.add_subcommand("report", "summarize a metrics CSV");
    std::string metrics_path;
    report_cmd->add_option("--metrics", metrics_path, "metrics.csv path")->required();

    auto* serve_cmd = app.add_subcommand("serve", "run live HTTP services");
    std::string mode = "demo";
    int tcs = 1;
    serve_cmd->add_option("--mode", mode, "keyservice|demo");
    serve_cmd->add_option("--tcs", tcs, "request contexts per enclave");

    auto* owner_cmd = app.add_subcommand("owner", "publish a model to a live deployment");
    std::string o_ks, o_key, o_model = "demo", o_dir = ".", o_grant, o_meas;
    size_t o_rows = 4, o_cols = 4;
    owner_cmd->add_option("--ks", o_ks, "keyservice host:port")->required();
    owner_cmd->add_option("--key", o_key, "owner identity key (64 hex chars)")->required();
    owner_cmd->add_option("--model-id", o_model);
    owner_cmd->add_option("--rows", o_rows);
    owner_cmd->add_option("--cols", o_cols);
    owner_cmd->add_option("--dir", o_dir, "directory for the encrypted model file");
    owner_cmd->add_option("--grant-uid", o_grant, "user id (hex) to grant access");
    owner_cmd->add_option("--measurement", o_meas, "enclave measurement (hex) for the grant");

    auto* user_cmd = app.add_subcommand("user", "deposit a request key and invoke");
    std::string u_ks, u_key, u_model = "demo", u_meas, u_worker, u_input = "1,2,3,4";
    uint64_t u_seq = 1;
    user_cmd->add_option("--ks", u_ks, "keyservice host:port")->required();
    user_cmd->add_option("--key", u_key, "user identity key (64 hex chars)")->required();
    user_cmd->add_option("--model-id", u_model);
    user_cmd->add_option("--measurement", u_meas, "trusted enclave measurement (hex)")
        ->required();
    user_cmd->add_option("--worker", u_worker, "worker host:port to invoke");
    user_cmd->add_option("--input", u_input, "comma-separated input values");
    user_cmd->add_option("--seq", u_seq, "request sequence number");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim_cmd->parsed()) return cmd_simulate(config_path, out_dir, seed);
        if (report_cmd->parsed()) return cmd_report(metrics_path);
        if (serve_cmd->parsed()) return cmd_serve(mode, tcs);
        if (owner_cmd->parsed())
            return cmd_owner(o_ks, o_key, o_model, o_rows, o_cols, o_dir, o_grant, o_meas);
        if (user_cmd->parsed())
            return cmd_user(u_ks, u_key, u_model, u_meas, u_worker, u_input, u_seq);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
