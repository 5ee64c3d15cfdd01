#include "sesemi/sim.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <queue>
#include <sstream>

#include "json.hpp"

#include "sesemi/keyservice.h"

namespace sesemi::sim {

using nlohmann::json;
using nlohmann::ordered_json;

Policy policy_from_string(const std::string& s) {
    if (s == "native") return Policy::Native;
    if (s == "iso_reuse") return Policy::IsoReuse;
    if (s == "sesemi") return Policy::SeSeMI;
    throw ConfigError("unknown policy: " + s);
}

const char* to_string(Policy p) {
    switch (p) {
        case Policy::Native: return "native";
        case Policy::IsoReuse: return "iso_reuse";
        case Policy::SeSeMI: return "sesemi";
    }
    return "?";
}

DeploymentMode deployment_from_string(const std::string& s) {
    if (s == "one_to_one") return DeploymentMode::OneToOne;
    if (s == "all_in_one") return DeploymentMode::AllInOne;
    if (s == "fnpacker") return DeploymentMode::FnPacker;
    throw ConfigError("unknown deployment: " + s);
}

const char* to_string(DeploymentMode d) {
    switch (d) {
        case DeploymentMode::OneToOne: return "one_to_one";
        case DeploymentMode::AllInOne: return "all_in_one";
        case DeploymentMode::FnPacker: return "fnpacker";
    }
    return "?";
}

double StageCosts::enclave_init_ms(double enclave_mb, int concurrent_launches) const {
    double base = enclave_init_base_ms + enclave_init_per_mb_ms * enclave_mb;
    int extra = std::max(0, concurrent_launches - 1);
    return base * (1.0 + enclave_init_concurrency_factor * extra);
}

double StageCosts::attestation_ms(int concurrent_attestations) const {
    int extra = std::max(0, concurrent_attestations - 1);
    return attestation_base_ms * (1.0 + attestation_concurrency_factor * extra);
}

double StageCosts::exec_time_ms(const ModelSpec& m, int concurrent_execs, int cores,
                                bool epc_pressure) const {
    double t = m.exec_ms;
    if (cores > 0 && concurrent_execs > cores)
        t *= static_cast<double>(concurrent_execs) / cores;
    if (epc_pressure) t *= epc_exec_penalty;
    return t;
}

int required_budget_mb(double enclave_mb) {
    // Enclave plus sandbox overhead, rounded up to the platform's 128 MB
    // container granule.
    double needed = enclave_mb + 32.0;
    int granules = static_cast<int>(std::ceil(needed / 128.0));
    return std::max(1, granules) * 128;
}

double enclave_memory_mb(const ModelSpec& m, int tcs_count) {
    return m.model_mb + tcs_count * m.buffer_mb + 1.0;
}

const ModelSpec& ExperimentConfig::model(const std::string& id) const {
    for (const auto& m : models)
        if (m.model_id == id) return m;
    throw ConfigError("model not in config: " + id);
}

namespace {

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(ctx + " must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (k == a) ok = true;
        if (!ok) throw ConfigError("unknown field \"" + k + "\" in " + ctx);
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ModelSpec parse_model(const json& j) {
    check_keys(j, "models[]",
               {"model_id", "model_mb", "buffer_mb", "exec_ms", "runtime_init_ms",
                "fetch_ms", "decrypt_ms", "rows", "cols"});
    ModelSpec m;
    m.model_id = j.at("model_id").get<std::string>();
    get_if(j, "model_mb", m.model_mb);
    get_if(j, "buffer_mb", m.buffer_mb);
    get_if(j, "exec_ms", m.exec_ms);
    get_if(j, "runtime_init_ms", m.runtime_init_ms);
    get_if(j, "fetch_ms", m.fetch_ms);
    get_if(j, "decrypt_ms", m.decrypt_ms);
    get_if(j, "rows", m.rows);
    get_if(j, "cols", m.cols);
    if (m.model_id.empty()) throw ConfigError("model_id must not be empty");
    if (m.rows == 0 || m.cols == 0) throw ConfigError("model dims must be positive");
    return m;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    try {
        check_keys(j, "config",
                   {"cluster", "costs", "models", "policy", "deployment",
                    "endpoints_per_pool", "tcs_count", "sequential_isolation",
                    "memory_budget_mb", "keep_warm_timeout_ms", "seed", "horizon_ms",
                    "workload"});
        ExperimentConfig cfg;
        if (j.contains("cluster")) {
            const json& c = j.at("cluster");
            check_keys(c, "cluster", {"nodes", "invoker_memory_mb", "cores", "epc_limit_mb"});
            get_if(c, "nodes", cfg.cluster.nodes);
            get_if(c, "invoker_memory_mb", cfg.cluster.invoker_memory_mb);
            get_if(c, "cores", cfg.cluster.cores);
            get_if(c, "epc_limit_mb", cfg.cluster.epc_limit_mb);
        }
        if (j.contains("costs")) {
            const json& c = j.at("costs");
            check_keys(c, "costs",
                       {"sandbox_init_ms", "enclave_init_base_ms", "enclave_init_per_mb_ms",
                        "enclave_init_concurrency_factor", "attestation_base_ms",
                        "attestation_concurrency_factor", "key_fetch_ms",
                        "request_decrypt_ms", "result_encrypt_ms", "epc_exec_penalty"});
            get_if(c, "sandbox_init_ms", cfg.costs.sandbox_init_ms);
            get_if(c, "enclave_init_base_ms", cfg.costs.enclave_init_base_ms);
            get_if(c, "enclave_init_per_mb_ms", cfg.costs.enclave_init_per_mb_ms);
            get_if(c, "enclave_init_concurrency_factor", cfg.costs.enclave_init_concurrency_factor);
            get_if(c, "attestation_base_ms", cfg.costs.attestation_base_ms);
            get_if(c, "attestation_concurrency_factor", cfg.costs.attestation_concurrency_factor);
            get_if(c, "key_fetch_ms", cfg.costs.key_fetch_ms);
            get_if(c, "request_decrypt_ms", cfg.costs.request_decrypt_ms);
            get_if(c, "result_encrypt_ms", cfg.costs.result_encrypt_ms);
            get_if(c, "epc_exec_penalty", cfg.costs.epc_exec_penalty);
        }
        if (!j.contains("models") || !j.at("models").is_array() || j.at("models").empty())
            throw ConfigError("config needs a non-empty models array");
        for (const auto& m : j.at("models")) cfg.models.push_back(parse_model(m));
        for (size_t a = 0; a < cfg.models.size(); ++a)
            for (size_t b = a + 1; b < cfg.models.size(); ++b)
                if (cfg.models[a].model_id == cfg.models[b].model_id)
                    throw ConfigError("duplicate model_id " + cfg.models[a].model_id);
        if (j.contains("policy")) cfg.policy = policy_from_string(j.at("policy"));
        if (j.contains("deployment"))
            cfg.deployment = deployment_from_string(j.at("deployment"));
        get_if(j, "endpoints_per_pool", cfg.endpoints_per_pool);
        get_if(j, "tcs_count", cfg.tcs_count);
        get_if(j, "sequential_isolation", cfg.sequential_isolation);
        if (j.contains("memory_budget_mb"))
            cfg.memory_budget_mb = j.at("memory_budget_mb").get<int>();
        get_if(j, "keep_warm_timeout_ms", cfg.keep_warm_timeout_ms);
        get_if(j, "seed", cfg.seed);
        get_if(j, "horizon_ms", cfg.horizon_ms);
        if (cfg.tcs_count < 1) throw ConfigError("tcs_count must be >= 1");
        if (cfg.endpoints_per_pool < 1) throw ConfigError("endpoints_per_pool must be >= 1");
        if (cfg.cluster.nodes < 1) throw ConfigError("nodes must be >= 1");

        if (j.contains("workload")) {
            const json& w = j.at("workload");
            check_keys(w, "workload", {"streams", "mmpp", "sessions", "events"});
            if (w.contains("streams")) {
                for (const auto& s : w.at("streams")) {
                    check_keys(s, "streams[]",
                               {"model_id", "user_id", "rate_rps", "duration_s", "start_s"});
                    PoissonStreamSpec ps;
                    ps.model_id = s.at("model_id").get<std::string>();
                    ps.user_id = s.at("user_id").get<std::string>();
                    get_if(s, "rate_rps", ps.rate_rps);
                    get_if(s, "duration_s", ps.duration_s);
                    get_if(s, "start_s", ps.start_s);
                    cfg.workload.streams.push_back(std::move(ps));
                }
            }
            if (w.contains("mmpp")) {
                const json& m = w.at("mmpp");
                check_keys(m, "mmpp",
                           {"model_id", "user_id", "rate_low", "rate_high",
                            "switch_interval_s", "duration_s"});
                MmppSpec ms;
                ms.model_id = m.at("model_id").get<std::string>();
                ms.user_id = m.at("user_id").get<std::string>();
                get_if(m, "rate_low", ms.rate_low);
                get_if(m, "rate_high", ms.rate_high);
                get_if(m, "switch_interval_s", ms.switch_interval_s);
                get_if(m, "duration_s", ms.duration_s);
                cfg.workload.mmpp = std::move(ms);
            }
            if (w.contains("sessions")) {
                for (const auto& s : w.at("sessions")) {
                    check_keys(s, "sessions[]", {"start_s", "user_id", "models", "gap_ms"});
                    SessionSpec ss;
                    get_if(s, "start_s", ss.start_s);
                    ss.user_id = s.at("user_id").get<std::string>();
                    ss.models = s.at("models").get<std::vector<std::string>>();
                    get_if(s, "gap_ms", ss.gap_ms);
                    if (ss.models.empty())
                        throw ConfigError("session needs at least one model");
                    cfg.workload.sessions.push_back(std::move(ss));
                }
            }
            if (w.contains("events")) {
                for (const auto& e : w.at("events")) {
                    check_keys(e, "events[]", {"t_ms", "user_id", "model_id"});
                    cfg.workload.events.push_back({e.at("t_ms").get<double>(),
                                                   e.at("user_id").get<std::string>(),
                                                   e.at("model_id").get<std::string>()});
                }
            }
        }
        // referenced models must exist
        for (const auto& s : cfg.workload.streams) cfg.model(s.model_id);
        if (cfg.workload.mmpp) cfg.model(cfg.workload.mmpp->model_id);
        for (const auto& s : cfg.workload.sessions)
            for (const auto& m : s.models) cfg.model(m);
        for (const auto& e : cfg.workload.events) cfg.model(e.model_id);
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
}

double account_gb_seconds(const std::vector<LedgerRecord>& ledger, double horizon_ms) {
    double total = 0;
    for (const auto& r : ledger) {
        double start = std::clamp(r.start_ms, 0.0, horizon_ms);
        double end = std::clamp(r.end_ms.value_or(horizon_ms), 0.0, horizon_ms);
        if (end <= start) continue;
        total += (r.budget_mb / 1024.0) * ((end - start) / 1000.0);
    }
    return total;
}

namespace {

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

std::string fmt3(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

double percentile(std::vector<double> sorted, double p) {
    if (sorted.empty()) return 0;
    size_t idx = static_cast<size_t>(std::ceil(p * sorted.size()));
    if (idx > 0) --idx;
    return sorted[std::min(idx, sorted.size() - 1)];
}

struct Event {
    double t = 0;
    uint64_t seq = 0;
    std::function<void(double)> fn;
};

struct EventCmp {
    bool operator()(const Event& a, const Event& b) const {
        if (a.t != b.t) return a.t > b.t;
        return a.seq > b.seq;
    }
};

struct Node {
    double free_mb = 0;
    double enclave_mb = 0;
    int execs = 0;
    int launches = 0;
    int attests = 0;
};

struct PendingReq {
    uint64_t rid = 0;
    double submit_ms = 0;
    std::string user_id;
    std::string model_id;
    std::string origin;
    int session_idx = -1;
    size_t session_pos = 0;
    std::string endpoint;
};

struct SimInstance {
    std::string id;
    std::string endpoint;
    int node = 0;
    int budget_mb = 0;
    double enclave_mb = 0;
    std::unique_ptr<runtime::Enclave> enclave;
    double ready_at = 0;
    int busy = 0;
    std::vector<bool> ctx_busy;
    std::string inflight_user;
    std::string inflight_model;
    std::deque<PendingReq> assigned;  // waiting for the enclave to come up
    double last_used = 0;
    uint64_t reap_token = 0;
    bool reaped = false;
    bool fresh = true;
    size_t ledger_index = 0;
};

struct SimEndpoint {
    std::string id;
    std::vector<std::string> models;
    int budget_mb = 0;
    double enclave_mb = 0;
    std::vector<std::unique_ptr<SimInstance>> instances;
    std::deque<PendingReq> queue;
};

struct UserState {
    crypto::SymKey identity_key;
    crypto::Digest uid;
    crypto::NonceSequence deposit_nonces;
    std::map<std::string, crypto::SymKey> req_keys;            // per model
    std::map<std::string, crypto::NonceSequence> req_nonces;   // per model
    std::map<std::string, uint64_t> seq;                       // per model
};

class Engine {
  public:
    explicit Engine(const ExperimentConfig& cfg)
        : cfg_(cfg),
          setup_rng_(cfg.seed ^ 0x5e5e3d1au),
          ks_(authority_, keyservice_identity()) {}

    SimResult run();

  private:
    static attest::CodeIdentity keyservice_identity() {
        attest::CodeIdentity ci;
        ci.runtime_name = "ksvc";
        ci.runtime_version = "0.1";
        ci.backend_name = "store";
        return ci;
    }

    runtime::EnclaveConfig enclave_config() const {
        runtime::EnclaveConfig ec;
        ec.tcs_count = cfg_.tcs_count;
        ec.sequential_isolation = cfg_.sequential_isolation;
        return ec.normalized();
    }

    void schedule(double t, std::function<void(double)> fn) {
        events_.push(Event{t, event_seq_++, std::move(fn)});
    }

    model::Model build_model(const ModelSpec& spec) const {
        model::Model m = model::make_demo_model(spec.model_id, spec.rows, spec.cols);
        m.declared_size_bytes = static_cast<uint64_t>(spec.model_mb * 1024 * 1024);
        return m;
    }

    std::vector<double> model_input(const ModelSpec& spec) const {
        std::vector<double> x(spec.cols);
        for (size_t c = 0; c < spec.cols; ++c) x[c] = 0.5 + 0.25 * (c % 5);
        return x;
    }

    void build_workload();
    void setup_crypto();
    void build_endpoints();
    void seed_events();

    void submit(PendingReq req, double t);
    std::string route_endpoint(const std::string& model_id, double t);
    void dispatch(SimEndpoint& ep, double t);
    void dispatch_all(double t);
    SimInstance* find_ready(SimEndpoint& ep, const PendingReq& req, double t);
    SimInstance* find_starting(SimEndpoint& ep, double t);
    SimInstance* create_instance(SimEndpoint& ep, double t);
    void start_service(SimEndpoint& ep, SimInstance& inst, PendingReq req, double t);
    void complete(SimEndpoint& ep, SimInstance& inst, const PendingReq& req, int ctx,
                  const std::string& path, runtime::InvocationPath fnp_path, double tc);
    std::unique_ptr<runtime::Enclave> make_enclave();

    const ExperimentConfig& cfg_;
    DeterministicRng setup_rng_;
    attest::PlatformAuthority authority_;
    keyservice::KeyService ks_;
    std::shared_ptr<runtime::MemModelStore> store_ = std::make_shared<runtime::MemModelStore>();
    attest::Measurement enclave_meas_{};

    crypto::SymKey owner_key_;
    crypto::Digest owner_id_;
    std::map<std::string, model::Model> plain_models_;
    std::map<std::string, Bytes> inputs_;        // encoded request plaintext
    std::map<std::string, uint32_t> expected_argmax_;
    std::map<std::string, UserState> users_;     // keyed by workload user id
    std::vector<std::string> user_order_;

    workload::Trace trace_;
    std::vector<std::pair<std::string, workload::Trace>> tagged_traces_;

    std::vector<Node> nodes_;
    std::map<std::string, SimEndpoint> endpoints_;
    std::optional<fnpack::FnPacker> fnp_;

    std::priority_queue<Event, std::vector<Event>, EventCmp> events_;
    uint64_t event_seq_ = 0;
    uint64_t next_request_ = 0;
    uint64_t next_instance_ = 0;
    uint64_t submitted_ = 0;
    std::map<uint64_t, RequestRecord> pending_records_;

    SimResult result_;
};

void Engine::build_workload() {
    std::vector<workload::Trace> parts;
    uint64_t i = 0;
    for (const auto& s : cfg_.workload.streams) {
        workload::Trace t = workload::poisson_trace(s.rate_rps, s.duration_s, s.user_id,
                                                    s.model_id, cfg_.seed + 101 + i);
        for (auto& e : t) e.t_ms += s.start_s * 1000.0;
        tagged_traces_.emplace_back("stream:" + std::to_string(i), std::move(t));
        ++i;
    }
    if (cfg_.workload.mmpp) {
        const auto& m = *cfg_.workload.mmpp;
        tagged_traces_.emplace_back(
            "mmpp", workload::mmpp_trace(m.rate_low, m.rate_high, m.switch_interval_s,
                                         m.duration_s, m.user_id, m.model_id, cfg_.seed + 577));
    }
    if (!cfg_.workload.events.empty())
        tagged_traces_.emplace_back("trace", cfg_.workload.events);

    for (const auto& [tag, t] : tagged_traces_) parts.push_back(t);
    trace_ = workload::merge(parts);
}

void Engine::setup_crypto() {
    runtime::EnclaveConfig ec = enclave_config();
    enclave_meas_ = attest::measure_code(ec.code_identity());

    owner_key_ = crypto::SymKey::random(setup_rng_);
    owner_id_ = ks_.user_registration(owner_key_);
    crypto::NonceSequence owner_nonces;

    for (const auto& spec : cfg_.models) {
        model::Model m = build_model(spec);
        crypto::SymKey km = crypto::SymKey::random(setup_rng_);
        crypto::NonceSequence file_nonces;
        store_->put(spec.model_id, model::encode_model_file(m, km, file_nonces));
        ks_.add_model_key(owner_id_, keyservice::seal_model_key(owner_key_, owner_nonces,
                                                                owner_id_, spec.model_id, km));
        std::vector<double> x = model_input(spec);
        std::vector<double> scores = m.score(x);
        uint32_t argmax = 0;
        for (uint32_t k = 1; k < scores.size(); ++k)
            if (scores[k] > scores[argmax]) argmax = k;
        expected_argmax_[spec.model_id] = argmax;
        inputs_[spec.model_id] = model::encode_input(x);
        plain_models_.emplace(spec.model_id, std::move(m));
    }

    // users in order of first appearance across the workload
    auto see_user = [&](const std::string& u) {
        if (!users_.contains(u)) {
            UserState st;
            st.identity_key = crypto::SymKey::random(setup_rng_);
            st.uid = ks_.user_registration(st.identity_key);
            users_.emplace(u, std::move(st));
            user_order_.push_back(u);
        }
    };
    for (const auto& e : trace_) see_user(e.user_id);
    for (const auto& s : cfg_.workload.sessions) see_user(s.user_id);

    // every user gets request keys and grants for every model
    for (const auto& u : user_order_) {
        UserState& st = users_.at(u);
        for (const auto& spec : cfg_.models) {
            crypto::SymKey kr = crypto::SymKey::random(setup_rng_);
            ks_.add_req_key(st.uid,
                            keyservice::seal_req_key(st.identity_key, st.deposit_nonces,
                                                     st.uid, spec.model_id, enclave_meas_, kr));
            ks_.grant_access(owner_id_,
                             keyservice::seal_grant(owner_key_, owner_nonces, owner_id_,
                                                    spec.model_id, enclave_meas_, st.uid));
            st.req_keys.emplace(spec.model_id, kr);
            st.req_nonces.try_emplace(spec.model_id);
            st.seq.emplace(spec.model_id, 0);
        }
    }
}

void Engine::build_endpoints() {
    nodes_.assign(static_cast<size_t>(cfg_.cluster.nodes), Node{});
    for (auto& n : nodes_) n.free_mb = cfg_.cluster.invoker_memory_mb;

    auto make_ep = [&](const std::string& id, std::vector<std::string> models) {
        SimEndpoint ep;
        ep.id = id;
        ep.models = std::move(models);
        double mb = 0;
        for (const auto& m : ep.models)
            mb = std::max(mb, enclave_memory_mb(cfg_.model(m), cfg_.tcs_count));
        ep.enclave_mb = mb;
        ep.budget_mb = cfg_.memory_budget_mb.value_or(required_budget_mb(mb));
        endpoints_.emplace(id, std::move(ep));
    };

    std::vector<std::string> all;
    for (const auto& m : cfg_.models) all.push_back(m.model_id);

    switch (cfg_.deployment) {
        case DeploymentMode::OneToOne:
            for (const auto& m : all) make_ep("ep-" + m, {m});
            break;
        case DeploymentMode::AllInOne:
            make_ep("ep-all", all);
            break;
        case DeploymentMode::FnPacker: {
            std::vector<std::string> eps;
            for (int i = 0; i < cfg_.endpoints_per_pool; ++i)
                eps.push_back("pool0-ep" + std::to_string(i));
            for (const auto& e : eps) make_ep(e, all);
            fnp_.emplace();
            fnpack::FnPool pool;
            pool.pool_id = "pool0";
            pool.models = all;
            pool.memory_budget_mb = endpoints_.begin()->second.budget_mb;
            pool.endpoints = eps;
            fnp_->deploy_pool(std::move(pool));
            break;
        }
    }
}

void Engine::seed_events() {
    for (const auto& [tag, t] : tagged_traces_) {
        for (const auto& e : t) {
            PendingReq req;
            req.user_id = e.user_id;
            req.model_id = e.model_id;
            req.origin = tag;
            schedule(e.t_ms, [this, req](double t) { submit(req, t); });
        }
    }
    for (size_t i = 0; i < cfg_.workload.sessions.size(); ++i) {
        const SessionSpec& s = cfg_.workload.sessions[i];
        PendingReq req;
        req.user_id = s.user_id;
        req.model_id = s.models.front();
        req.origin = "session:" + std::to_string(i);
        req.session_idx = static_cast<int>(i);
        req.session_pos = 0;
        schedule(s.start_s * 1000.0, [this, req](double t) { submit(req, t); });
    }
}

std::string Engine::route_endpoint(const std::string& model_id, double t) {
    switch (cfg_.deployment) {
        case DeploymentMode::OneToOne: return "ep-" + model_id;
        case DeploymentMode::AllInOne: return "ep-all";
        case DeploymentMode::FnPacker: return fnp_->route(model_id, t);
    }
    throw std::logic_error("unreachable");
}

void Engine::submit(PendingReq req, double t) {
    req.rid = next_request_++;
    req.submit_ms = t;
    req.endpoint = route_endpoint(req.model_id, t);
    ++submitted_;
    SimEndpoint& ep = endpoints_.at(req.endpoint);
    ep.queue.push_back(std::move(req));
    dispatch(ep, t);
}

SimInstance* Engine::find_ready(SimEndpoint& ep, const PendingReq& req, double t) {
    SimInstance* best = nullptr;
    int best_rank = 99;
    for (auto& up : ep.instances) {
        SimInstance& in = *up;
        if (in.reaped || in.ready_at > t) continue;
        if (in.busy >= cfg_.tcs_count) continue;
        if (in.busy > 0 &&
            (in.inflight_user != req.user_id || in.inflight_model != req.model_id))
            continue;
        int rank;
        if (in.enclave->keys_cached(req.model_id, users_.at(req.user_id).uid) &&
            in.enclave->model_resident(req.model_id))
            rank = 0;
        else if (in.enclave->model_resident(req.model_id))
            rank = 1;
        else if (in.busy == 0)
            rank = 2;
        else
            rank = 3;
        if (rank < best_rank) {
            best_rank = rank;
            best = &in;
        }
    }
    return best;
}

SimInstance* Engine::find_starting(SimEndpoint& ep, double t) {
    for (auto& up : ep.instances) {
        SimInstance& in = *up;
        if (in.reaped || in.ready_at <= t) continue;
        if (static_cast<int>(in.assigned.size()) < cfg_.tcs_count) return &in;
    }
    return nullptr;
}

std::unique_ptr<runtime::Enclave> Engine::make_enclave() {
    runtime::EnclaveConfig ec = enclave_config();
    auto prov = std::make_unique<runtime::InProcProvisioner>(
        ks_, authority_, ec.code_identity(), ks_.measurement());
    return std::make_unique<runtime::Enclave>(ec, store_, std::move(prov));
}

SimInstance* Engine::create_instance(SimEndpoint& ep, double t) {
    int node = -1;
    // keep instances of one endpoint together when possible
    for (const auto& up : ep.instances) {
        if (up->reaped) continue;
        if (nodes_[up->node].free_mb >= ep.budget_mb) {
            node = up->node;
            break;
        }
    }
    if (node < 0) {
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].free_mb >= ep.budget_mb) {
                node = static_cast<int>(i);
                break;
            }
        }
    }
    if (node < 0) return nullptr;

    Node& nd = nodes_[node];
    nd.free_mb -= ep.budget_mb;
    nd.enclave_mb += ep.enclave_mb;
    ++nd.launches;

    auto inst = std::make_unique<SimInstance>();
    inst->id = "i" + std::to_string(next_instance_++);
    inst->endpoint = ep.id;
    inst->node = node;
    inst->budget_mb = ep.budget_mb;
    inst->enclave_mb = ep.enclave_mb;
    inst->enclave = make_enclave();
    inst->ctx_busy.assign(static_cast<size_t>(cfg_.tcs_count), false);

    double einit = cfg_.costs.enclave_init_ms(ep.enclave_mb, nd.launches);
    inst->ready_at = t + cfg_.costs.sandbox_init_ms + einit;
    inst->last_used = inst->ready_at;
    inst->ledger_index = result_.ledger.size();
    result_.ledger.push_back({inst->id, ep.id, ep.budget_mb, t, std::nullopt});

    SimInstance* raw = inst.get();
    ep.instances.push_back(std::move(inst));

    schedule(t + cfg_.costs.sandbox_init_ms + einit,
             [this, node](double) { --nodes_[node].launches; });
    schedule(raw->ready_at, [this, raw, epid = ep.id](double t2) {
        SimEndpoint& e = endpoints_.at(epid);
        std::deque<PendingReq> waiting;
        waiting.swap(raw->assigned);
        for (auto& req : waiting) {
            bool compat = raw->busy == 0 || (raw->inflight_user == req.user_id &&
                                             raw->inflight_model == req.model_id);
            if (!raw->reaped && raw->busy < cfg_.tcs_count && compat) {
                start_service(e, *raw, std::move(req), t2);
            } else {
                e.queue.push_front(std::move(req));
            }
        }
        dispatch(e, t2);
    });
    // idle instances that never receive traffic are still reaped
    uint64_t token = raw->reap_token;
    schedule(raw->ready_at + cfg_.keep_warm_timeout_ms, [this, raw, token, epid = ep.id](double t2) {
        if (raw->reaped || raw->reap_token != token) return;
        if (raw->busy > 0 || !raw->assigned.empty()) return;
        raw->reaped = true;
        result_.ledger[raw->ledger_index].end_ms = t2;
        Node& nd2 = nodes_[raw->node];
        nd2.free_mb += raw->budget_mb;
        nd2.enclave_mb -= raw->enclave_mb;
        dispatch_all(t2);
    });
    return raw;
}

void Engine::dispatch(SimEndpoint& ep, double t) {
    while (!ep.queue.empty()) {
        PendingReq& head = ep.queue.front();
        if (SimInstance* in = find_ready(ep, head, t)) {
            PendingReq req = std::move(head);
            ep.queue.pop_front();
            start_service(ep, *in, std::move(req), t);
            continue;
        }
        if (SimInstance* in = find_starting(ep, t)) {
            in->assigned.push_back(std::move(head));
            ep.queue.pop_front();
            continue;
        }
        if (SimInstance* in = create_instance(ep, t)) {
            in->assigned.push_back(std::move(head));
            ep.queue.pop_front();
            continue;
        }
        break;  // head-of-line waits for a completion or a reap
    }
}

void Engine::dispatch_all(double t) {
    for (auto& [id, ep] : endpoints_) dispatch(ep, t);
}

void Engine::start_service(SimEndpoint& ep, SimInstance& inst, PendingReq req, double t) {
    Node& nd = nodes_[inst.node];
    const ModelSpec& mspec = cfg_.model(req.model_id);
    UserState& user = users_.at(req.user_id);
    bool fresh = inst.fresh;
    inst.fresh = false;

    double stages = 0;
    if (cfg_.policy == Policy::Native && !fresh) {
        // a reused sandbox still launches a brand-new enclave
        inst.enclave = make_enclave();
        ++nd.launches;
        double einit = cfg_.costs.enclave_init_ms(inst.enclave_mb, nd.launches);
        int node = inst.node;
        schedule(t + einit, [this, node](double) { --nodes_[node].launches; });
        stages += einit;
    }
    if (cfg_.policy == Policy::IsoReuse) inst.enclave->reset_model_state();

    runtime::EnclaveCounters before = inst.enclave->counters();

    uint64_t seq = ++user.seq.at(req.model_id);
    runtime::InferenceRequest ireq;
    ireq.user_id = user.uid;
    ireq.model_id = req.model_id;
    ireq.keyservice_addr = "inproc";
    ireq.seq = seq;
    ireq.payload = crypto::aead_encrypt(
        user.req_keys.at(req.model_id), ByteView(inputs_.at(req.model_id)),
        to_bytes(runtime::request_aad(req.model_id, user.uid, seq)),
        user.req_nonces.at(req.model_id));

    int ctx = -1;
    for (size_t i = 0; i < inst.ctx_busy.size(); ++i) {
        if (!inst.ctx_busy[i]) {
            ctx = static_cast<int>(i);
            break;
        }
    }
    if (ctx < 0) throw std::logic_error("no free context on selected instance");

    runtime::InvocationPath rtpath = inst.enclave->ec_model_inf(ireq, ctx);
    crypto::AeadEnvelope out = inst.enclave->ec_get_output(ctx);
    Bytes plain = crypto::aead_decrypt(
        user.req_keys.at(req.model_id), out,
        to_bytes(runtime::result_aad(req.model_id, user.uid, seq)));
    model::InferenceResult res = model::InferenceResult::deserialize(plain);
    if (res.argmax != expected_argmax_.at(req.model_id))
        throw std::logic_error("inference result mismatch for " + req.model_id);
    if (cfg_.sequential_isolation) inst.enclave->ec_clear_exec_ctx(ctx);

    runtime::EnclaveCounters after = inst.enclave->counters();
    uint64_t chans = after.channels_established - before.channels_established;
    uint64_t provs = after.provisioning_calls - before.provisioning_calls;
    uint64_t loads = after.model_loads - before.model_loads;
    uint64_t rtinits = after.runtime_inits - before.runtime_inits;

    if (chans > 0) {
        ++nd.attests;
        double att = cfg_.costs.attestation_ms(nd.attests);
        int node = inst.node;
        schedule(t + att, [this, node](double) { --nodes_[node].attests; });
        stages += att;
    } else if (provs > 0) {
        stages += cfg_.costs.key_fetch_ms;
    }
    if (loads > 0) stages += mspec.fetch_ms + mspec.decrypt_ms;
    if (rtinits > 0) stages += mspec.runtime_init_ms;
    stages += cfg_.costs.request_decrypt_ms;

    ++nd.execs;
    bool epc = cfg_.cluster.epc_limit_mb > 0 && nd.enclave_mb > cfg_.cluster.epc_limit_mb;
    stages += cfg_.costs.exec_time_ms(mspec, nd.execs, cfg_.cluster.cores, epc);
    stages += cfg_.costs.result_encrypt_ms;

    inst.ctx_busy[ctx] = true;
    if (inst.busy == 0) {
        inst.inflight_user = req.user_id;
        inst.inflight_model = req.model_id;
    }
    ++inst.busy;

    std::string path = fresh ? "cold" : runtime::to_string(rtpath);
    runtime::InvocationPath fnp_path =
        fresh ? runtime::InvocationPath::Cold : rtpath;

    double tc = t + stages;
    PendingReq done = std::move(req);
    done.endpoint = ep.id;
    SimInstance* rawinst = &inst;
    std::string epid = ep.id;
    schedule(tc, [this, epid, rawinst, done, ctx, path, fnp_path](double t2) {
        complete(endpoints_.at(epid), *rawinst, done, ctx, path, fnp_path, t2);
    });

    RequestRecord rec;
    rec.request_id = done.rid;
    rec.submit_ms = done.submit_ms;
    rec.complete_ms = tc;
    rec.latency_ms = tc - done.submit_ms;
    rec.path = path;
    rec.endpoint = ep.id;
    rec.instance = inst.id;
    rec.node = inst.node;
    rec.user_id = done.user_id;
    rec.model_id = done.model_id;
    rec.origin = done.origin;
    rec.queue_ms = t - done.submit_ms;
    rec.stage_sum_ms = stages;
    pending_records_.emplace(done.rid, std::move(rec));
}

void Engine::complete(SimEndpoint& ep, SimInstance& inst, const PendingReq& req, int ctx,
                      const std::string& path, runtime::InvocationPath fnp_path, double tc) {
    Node& nd = nodes_[inst.node];
    --nd.execs;
    inst.ctx_busy[ctx] = false;
    --inst.busy;
    if (inst.busy == 0) {
        inst.inflight_user.clear();
        inst.inflight_model.clear();
    }
    inst.last_used = tc;
    uint64_t token = ++inst.reap_token;

    auto it = pending_records_.find(req.rid);
    RequestRecord rec = it->second;
    pending_records_.erase(it);
    result_.records.push_back(rec);
    ++result_.path_counts[path];

    if (fnp_) fnp_->complete(req.model_id, req.endpoint, rec.latency_ms, fnp_path, tc);

    if (req.session_idx >= 0) {
        const SessionSpec& s = cfg_.workload.sessions[req.session_idx];
        if (req.session_pos + 1 < s.models.size()) {
            PendingReq next;
            next.user_id = s.user_id;
            next.model_id = s.models[req.session_pos + 1];
            next.origin = req.origin;
            next.session_idx = req.session_idx;
            next.session_pos = req.session_pos + 1;
            schedule(tc + s.gap_ms, [this, next](double t2) { submit(next, t2); });
        }
    }

    SimInstance* rawinst = &inst;
    schedule(tc + cfg_.keep_warm_timeout_ms, [this, rawinst, token](double t2) {
        if (rawinst->reaped || rawinst->reap_token != token) return;
        if (rawinst->busy > 0 || !rawinst->assigned.empty()) return;
        rawinst->reaped = true;
        result_.ledger[rawinst->ledger_index].end_ms = t2;
        Node& nd2 = nodes_[rawinst->node];
        nd2.free_mb += rawinst->budget_mb;
        nd2.enclave_mb -= rawinst->enclave_mb;
        dispatch_all(t2);
    });

    dispatch(ep, tc);
}

SimResult Engine::run() {
    build_workload();
    setup_crypto();
    build_endpoints();
    seed_events();

    while (!events_.empty()) {
        Event e = std::move(const_cast<Event&>(events_.top()));
        events_.pop();
        if (e.t > cfg_.horizon_ms) break;  // strictly time-ordered: all later too
        e.fn(e.t);
    }

    result_.queued_at_horizon = submitted_ - result_.records.size();
    result_.gb_seconds = account_gb_seconds(result_.ledger, cfg_.horizon_ms);
    return std::move(result_);
}

}  // namespace

SimResult run_simulation(const ExperimentConfig& cfg) { return Engine(cfg).run(); }

std::string SimResult::metrics_csv() const {
    std::ostringstream os;
    os << "request_id,submit_ms,complete_ms,latency_ms,path,endpoint,instance,node\n";
    for (const auto& r : records) {
        os << r.request_id << "," << fmt3(r.submit_ms) << "," << fmt3(r.complete_ms) << ","
           << fmt3(r.latency_ms) << "," << r.path << "," << r.endpoint << "," << r.instance
           << "," << r.node << "\n";
    }
    return os.str();
}

std::string SimResult::summary_json() const {
    std::vector<double> lat;
    double sum = 0;
    for (const auto& r : records) {
        lat.push_back(r.latency_ms);
        sum += r.latency_ms;
    }
    std::sort(lat.begin(), lat.end());

    ordered_json j;
    j["requests"] = records.size() + queued_at_horizon;
    j["completed"] = records.size();
    j["queued_at_horizon"] = queued_at_horizon;
    ordered_json latj;
    latj["mean"] = round3(lat.empty() ? 0 : sum / lat.size());
    latj["p50"] = round3(percentile(lat, 0.50));
    latj["p95"] = round3(percentile(lat, 0.95));
    j["latency_ms"] = latj;
    ordered_json pj = ordered_json::object();
    for (const auto& [p, c] : path_counts) pj[p] = c;
    j["paths"] = pj;
    j["gb_seconds"] = round3(gb_seconds);
    return j.dump(2) + "\n";
}

}  // namespace sesemi::sim
